"""Retrieval evaluation: fused query-gallery distances, CMC and mAP.

Ranking uses a stable sort, so ties are broken by gallery index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import attention_profile, siamese_attention_from_features, spatial_consistency
from .backbone import FeatureBundle

MODES = ("fused", "feature_only")


@dataclass
class DistanceMatrix:
    values: np.ndarray  # (Q, G)
    query_ids: np.ndarray
    gallery_ids: np.ndarray
    query_cams: np.ndarray
    gallery_cams: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        for name in ("query_ids", "gallery_ids", "query_cams", "gallery_cams"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        q, g = self.values.shape
        if len(self.query_ids) != q or len(self.query_cams) != q:
            raise ValueError("query metadata does not match the matrix rows")
        if len(self.gallery_ids) != g or len(self.gallery_cams) != g:
            raise ValueError("gallery metadata does not match the matrix columns")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("distances must be finite and non-negative")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class RankingResult:
    order: np.ndarray  # (Q, G) gallery indices, nearest first
    average_precision: np.ndarray  # per valid query
    cmc: np.ndarray  # (max_rank,)
    mean_ap: float
    num_valid: int
    num_excluded: int
    excluded: list = field(default_factory=list)


def minmax(values):
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def feature_distances(fq, fg, chunk=256):
    """Pairwise Euclidean distances between rows of ``fq`` and ``fg``."""
    fq = torch.as_tensor(fq, dtype=torch.float64)
    fg = torch.as_tensor(fg, dtype=torch.float64)
    out = [((fq[i:i + chunk, None] - fg[None]) ** 2).sum(-1).sqrt() for i in range(0, len(fq), chunk)]
    return torch.cat(out).numpy()


@torch.no_grad()
def extract(model, images, chunk=64):
    maps, vecs = [], []
    images = images.to(next(model.parameters()).dtype)
    for i in range(0, len(images), chunk):
        feats = model.extract_features(images[i:i + chunk])
        maps.append(feats.maps)
        vecs.append(feats.vector)
    return torch.cat(maps), torch.cat(vecs)


def attention_distances(model, query_maps, gallery_maps, threshold=0.5, length=None, chunk=256):
    """Distance between aligned row profiles of the pair attention maps, for
    every (query, gallery) pair. Each pair gets its own maps, derived from the
    pair head's same-identity logit with the query as the first image."""
    nq, ng = len(query_maps), len(gallery_maps)
    if length is None:
        length = query_maps.shape[-2]
    qi, gi = np.divmod(np.arange(nq * ng), ng)
    out = np.empty(nq * ng)
    with torch.enable_grad():
        for s in range(0, nq * ng, chunk):
            q, g = qi[s:s + chunk], gi[s:s + chunk]
            maps = torch.cat([query_maps[q], gallery_maps[g]]).detach().requires_grad_(True)
            feats = FeatureBundle(maps, model.pool(maps))
            att = siamese_attention_from_features(model, feats, len(q))
            d = spatial_consistency(attention_profile(att.map1, threshold, length),
                                    attention_profile(att.map2, threshold, length))
            out[s:s + len(q)] = d.detach().double().numpy()
    return out.reshape(nq, ng)


def fused_distances(model, query_images, gallery_images, query_ids, gallery_ids, query_cams,
                    gallery_cams, mode="fused", threshold=0.5, length=None, weights=(1.0, 1.0),
                    return_components=False):
    """Query-gallery distance matrix.

    ``feature_only`` returns raw Euclidean feature distances. ``fused`` returns
    ``w_f * minmax(d_f) + w_a * minmax(d_a)``, each min-max taken over the whole
    matrix. With ``return_components`` the raw ``(d_f, d_a)`` are returned as well
    (``d_a`` is None in feature_only mode).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    if len(query_images) == 0 or len(gallery_images) == 0:
        raise ValueError("query and gallery sets must be non-empty")
    if model.training:
        raise RuntimeError("evaluate with a frozen model (call model.eval())")
    q_maps, q_vec = extract(model, query_images)
    g_maps, g_vec = extract(model, gallery_images)
    d_f = feature_distances(q_vec, g_vec)
    d_a = None
    if mode == "feature_only":
        values = d_f
    else:
        d_a = attention_distances(model, q_maps, g_maps, threshold, length)
        values = weights[0] * minmax(d_f) + weights[1] * minmax(d_a)
    dm = DistanceMatrix(values, query_ids, gallery_ids, query_cams, gallery_cams)
    if return_components:
        return dm, d_f, d_a
    return dm


def _valid_matches(dm, q):
    order = np.argsort(dm.values[q], kind="stable")
    g_ids, g_cams = dm.gallery_ids[order], dm.gallery_cams[order]
    keep = ~((g_ids == dm.query_ids[q]) & (g_cams == dm.query_cams[q]))
    return order, (g_ids[keep] == dm.query_ids[q])


def rank(dm, max_rank=50):
    """Single-gallery-shot CMC and mAP with the Market-1501 exclusion rule.

    Gallery entries sharing both identity and camera with the query are
    dropped for that query. Queries left without any correct match are
    excluded from both averages and listed in ``excluded``.
    """
    nq = dm.shape[0]
    orders, curves, aps, excluded = [], [], [], []
    for q in range(nq):
        order, matches = _valid_matches(dm, q)
        orders.append(order)
        if not matches.any():
            excluded.append(q)
            continue
        hits = np.cumsum(matches)
        curve = (hits[:max_rank] >= 1).astype(np.float64)
        if len(curve) < max_rank:
            curve = np.concatenate([curve, np.ones(max_rank - len(curve))])
        curves.append(curve)
        ranks = np.flatnonzero(matches) + 1
        aps.append(np.mean(hits[ranks - 1] / ranks))
    if not curves:
        raise ValueError("no query has a valid gallery match")
    return RankingResult(
        order=np.stack(orders),
        average_precision=np.asarray(aps),
        cmc=np.mean(curves, axis=0),
        mean_ap=float(np.mean(aps)),
        num_valid=len(curves),
        num_excluded=len(excluded),
        excluded=excluded,
    )


def cmc(dm, max_rank=50):
    return rank(dm, max_rank).cmc


def mean_average_precision(dm):
    return rank(dm, max_rank=1).mean_ap


def save_distance_matrix(dm, prefix):
    """Write ``<prefix>.bin`` (little-endian float64, row-major) and a text
    header ``<prefix>.hdr`` with dims, identities and cameras."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    dm.values.astype("<f8").tofile(str(prefix) + ".bin")
    q, g = dm.shape
    lines = [
        f"rows={q}",
        f"cols={g}",
        "dtype=float64-le",
        "query_ids=" + " ".join(map(str, dm.query_ids)),
        "query_cams=" + " ".join(map(str, dm.query_cams)),
        "gallery_ids=" + " ".join(map(str, dm.gallery_ids)),
        "gallery_cams=" + " ".join(map(str, dm.gallery_cams)),
    ]
    Path(str(prefix) + ".hdr").write_text("\n".join(lines) + "\n")


def load_distance_matrix(prefix):
    header = dict(
        line.split("=", 1) for line in Path(str(prefix) + ".hdr").read_text().splitlines() if line
    )
    q, g = int(header["rows"]), int(header["cols"])
    values = np.fromfile(str(prefix) + ".bin", dtype="<f8").reshape(q, g)

    def ints(key):
        return np.array(header[key].split(), dtype=np.int64)

    return DistanceMatrix(values, ints("query_ids"), ints("gallery_ids"), ints("query_cams"),
                          ints("gallery_cams"))


def write_results(path, metrics):
    """Write ``key=value`` lines, one per metric, in insertion order."""
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in metrics.items()))


def read_results(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if line:
            k, v = line.split("=", 1)
            out[k] = v
    return out

"""Training objectives.

``ide_loss`` and ``bce_loss`` default to summing over the batch; the training
step uses ``reduction="mean"`` for every term so the loss weights do not depend
on the batch size (the published weights were tuned at batch size 16).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .attention import (
    MaskParams,
    attention_profile,
    identification_attention,
    siamese_attention_from_features,
    spatial_consistency,
)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5  # identification attention
    lambda2: float = 0.05  # Siamese attention
    sa_alpha: float = 0.2  # spatial term inside the Siamese attention loss

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "sa_alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


def _reduce(per_item, reduction):
    if reduction == "sum":
        return per_item.sum()
    if reduction == "mean":
        return per_item.mean()
    if reduction == "none":
        return per_item
    raise ValueError(f"unknown reduction {reduction!r}")


def _check_labels(labels, n_classes, what):
    labels = torch.as_tensor(labels)
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"{what} must lie in [0, {n_classes}), got {labels.tolist()}")
    return labels


def cross_entropy(logits, labels):
    """Per-row ``-log softmax(logits)[label]``.

    Written as ``softplus(logsumexp_{j != c}(z_j - z_c))`` rather than
    ``logsumexp(z) - z_c``: the two agree, but the latter cancels
    catastrophically when the loss is tiny (confident correct rows).
    """
    if logits.shape[-1] == 1:
        return torch.zeros(logits.shape[:-1], dtype=logits.dtype, device=logits.device)
    shifted = logits - logits.gather(-1, labels[:, None])
    others = shifted.masked_fill(F.one_hot(labels, logits.shape[-1]).bool(), float("-inf"))
    return F.softplus(torch.logsumexp(others, dim=-1))


def ide_loss(logits, labels, reduction="sum"):
    """Multi-class cross-entropy over identity logits (N, C)."""
    labels = _check_labels(labels, logits.shape[-1], "identity labels").to(logits.device)
    return _reduce(cross_entropy(logits, labels), reduction)


def bce_loss(pair_logits, pair_labels, reduction="sum"):
    """Two-way cross-entropy over pair logits (P, 2); label 1 = same identity."""
    if pair_logits.shape[-1] != 2:
        raise ValueError(f"pair logits must have 2 entries, got {pair_logits.shape[-1]}")
    pair_labels = _check_labels(pair_labels, 2, "pair labels").to(pair_logits.device)
    return _reduce(cross_entropy(pair_logits, pair_labels), reduction)


@dataclass
class SiameseTerms:
    loss: torch.Tensor  # mean over pairs of bce + sa_alpha * spatial (positives only)
    bce: torch.Tensor  # mean BCE over pairs
    spatial: torch.Tensor  # per-pair spatial distance, zero for negative pairs
    n_positive: int


def siamese_terms(model, feats, pair_labels, weights=LossWeights(), threshold=0.5,
                  length=None, create_graph=True):
    n_pairs = feats.vector.shape[0] // 2
    pair_labels = _check_labels(pair_labels, 2, "pair labels").to(feats.vector.device)
    positive = pair_labels == 1
    n_pos = int(positive.sum())
    f_diff = feats.vector[:n_pairs] - feats.vector[n_pairs:]
    if n_pos == 0 or weights.sa_alpha == 0:
        z = model.bce_head(f_diff)
        spatial = torch.zeros(n_pairs, dtype=z.dtype, device=z.device)
        bce = bce_loss(z, pair_labels, reduction="none")
        return SiameseTerms(bce.mean(), bce.mean(), spatial, n_pos)
    att = siamese_attention_from_features(model, feats, n_pairs, create_graph=create_graph)
    bce = bce_loss(att.pair_logits, pair_labels, reduction="none")
    dist = spatial_consistency(
        attention_profile(att.map1, threshold, length),
        attention_profile(att.map2, threshold, length),
    )
    spatial = torch.where(positive, dist, torch.zeros_like(dist))
    loss = (bce + weights.sa_alpha * spatial).mean()
    return SiameseTerms(loss, bce.mean(), spatial, n_pos)


def siamese_attention_loss(model, images_a, images_b, pair_labels, weights=LossWeights(),
                           threshold=0.5, length=None, create_graph=True):
    """Pair classification loss plus the attention-consistency penalty on
    positive pairs, averaged over pairs."""
    feats = model.extract_features(torch.cat([images_a, images_b]))
    return siamese_terms(model, feats, pair_labels, weights, threshold, length, create_graph).loss


@dataclass
class LossTerms:
    total: torch.Tensor
    ide: torch.Tensor
    ia: torch.Tensor | None = None
    sa: torch.Tensor | None = None
    bce: torch.Tensor | None = None
    spatial: torch.Tensor | None = None  # mean over positive pairs

    def as_floats(self):
        return {k: float(v.detach()) for k, v in vars(self).items() if v is not None}


def total_loss(model, batch, weights=LossWeights(), mask_params=MaskParams(), threshold=0.5,
               length=None, enable_ia=True, enable_sa=True):
    """``L_ide + lambda1 * L_ia + lambda2 * L_sa`` on one pair batch.

    Each term is averaged (per image for the identity terms, per pair for the
    Siamese term). Disabled or zero-weighted terms are not computed at all, so
    the baseline configuration reduces to ``L_ide`` exactly.
    """
    images = torch.cat([batch.images_a, batch.images_b])
    labels = torch.cat([batch.identity_a, batch.identity_b]).to(images.device)
    feats = model.extract_features(images)
    logits = model.ide_head(feats.vector)
    l_ide = ide_loss(logits, labels, reduction="mean")
    terms = LossTerms(total=l_ide, ide=l_ide)
    total = l_ide
    if enable_ia and weights.lambda1 > 0:
        probs, _ = identification_attention(model, images, labels, mask_params, feats=feats)
        terms.ia = probs.mean()
        total = total + weights.lambda1 * terms.ia
    if enable_sa and weights.lambda2 > 0:
        st = siamese_terms(model, feats, batch.pair_label, weights, threshold, length)
        terms.sa = st.loss
        terms.bce = st.bce
        if st.n_positive:
            terms.spatial = st.spatial.sum() / st.n_positive
        total = total + weights.lambda2 * st.loss
    terms.total = total
    return terms

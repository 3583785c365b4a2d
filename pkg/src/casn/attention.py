"""Gradient-derived attention: Grad-CAM, soft masking, Siamese attention maps
and the row-profile consistency machinery.

Every map-producing function accepts ``create_graph``. With ``create_graph=True``
the returned maps are themselves differentiable w.r.t. the model parameters,
which is what the training losses need (the loss differentiates through a
first-order gradient).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

_EPS = 1e-8


@dataclass(frozen=True)
class MaskParams:
    """Parameters of the sigmoid soft mask ``sigmoid(sharpness * (m - threshold))``."""

    sharpness: float = 8.0
    threshold: float = 0.5

    def __post_init__(self):
        if not self.sharpness > 0:
            raise ValueError(f"mask sharpness must be > 0, got {self.sharpness}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"mask threshold must lie in (0, 1), got {self.threshold}")


def channel_weights(score, maps, create_graph=False):
    """Global-average-pooled gradient of ``score`` w.r.t. ``maps``.

    ``maps`` is (N, K, h, w) or (K, h, w); returns (N, K) or (K,). Because the
    score is summed over the batch, each row only receives its own gradient as
    long as samples do not interact downstream of ``maps``.
    """
    if score.dim() != 0:
        raise ValueError(f"score must be a scalar, got shape {tuple(score.shape)}")
    if not score.requires_grad:
        raise RuntimeError("score is not connected to the feature maps")
    (grad,) = torch.autograd.grad(
        score, maps, retain_graph=True, create_graph=create_graph, allow_unused=True
    )
    if grad is None:
        raise RuntimeError("score is not connected to the feature maps")
    return grad.mean(dim=(-2, -1))


def grad_cam(score, maps, create_graph=False):
    """ReLU of the gradient-weighted channel sum of ``maps``."""
    weights = channel_weights(score, maps, create_graph=create_graph)
    cam = (weights[..., None, None] * maps).sum(dim=-3)
    return F.relu(cam)


def normalize_map(x, dims=(-2, -1)):
    """Min-max normalize each map (or profile, with ``dims=(-1,)``) to [0, 1].

    Maps with (numerically) zero range are not rescaled; they are clamped to
    [0, 1] instead, so an all-zero map stays zero and a constant map keeps its
    level.
    """
    lo = x.amin(dim=dims, keepdim=True)
    hi = x.amax(dim=dims, keepdim=True)
    span = hi - lo
    ok = span > _EPS
    scaled = (x - lo) / torch.where(ok, span, torch.ones_like(span))
    return torch.where(ok, scaled, x.clamp(0.0, 1.0))


def soft_mask(images, maps, params=MaskParams(), normalize=True):
    """Erase high-attention pixels: ``I * (1 - sigmoid(sharpness * (m - threshold)))``.

    ``images`` is (N, C, H, W) and ``maps`` is (N, h, w); maps are normalized
    per image and bilinearly upsampled to (H, W).
    """
    if maps.dim() == 2:
        maps = maps[None]
    if images.dim() == 3:
        return soft_mask(images[None], maps, params, normalize)[0]
    if normalize:
        maps = normalize_map(maps)
    up = F.interpolate(maps[:, None], size=images.shape[-2:], mode="bilinear", align_corners=False)
    sigma = torch.sigmoid(params.sharpness * (up - params.threshold))
    return images * (1.0 - sigma)


def identification_attention(model, images, labels, params=MaskParams(), feats=None,
                             create_graph=True):
    """Return ``(probs, maps)``: the probability of the true class on each
    soft-masked image, and the Grad-CAM maps used for masking."""
    labels = torch.as_tensor(labels, device=images.device)
    num_classes = model.num_classes
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"identity labels must lie in [0, {num_classes}), got {labels.tolist()}")
    if feats is None:
        feats = model.extract_features(images)
    logits = model.ide_head(feats.vector)
    score = logits.gather(1, labels[:, None]).sum()
    maps = grad_cam(score, feats.maps, create_graph=create_graph)
    masked = soft_mask(images, maps, params)
    masked_logits = model.ide_head(model.extract_features(masked).vector)
    probs = masked_logits.softmax(dim=1).gather(1, labels[:, None])[:, 0]
    return probs, maps


def identification_attention_loss(model, images, labels, params=MaskParams(), feats=None,
                                  create_graph=True):
    """Mean over images of the true-class probability after masking; in [0, 1]."""
    probs, _ = identification_attention(model, images, labels, params, feats, create_graph)
    return probs.mean()


def indicator_vector(pair_logits, f_diff):
    """1 where the same-identity logit grows with the feature difference, else 0.

    The result is detached: it is a discrete selection and acts as a constant
    in every downstream loss.
    """
    same = pair_logits[..., 1].sum()
    (grad,) = torch.autograd.grad(same, f_diff, retain_graph=True, allow_unused=True)
    if grad is None:
        raise RuntimeError("pair logits are not connected to the feature difference")
    return (grad > 0).to(f_diff.dtype).detach()


def importance_scores(alpha, f1, f2):
    if alpha.shape != f1.shape or f1.shape != f2.shape:
        raise ValueError(
            f"indicator and feature shapes must match, got {tuple(alpha.shape)}, "
            f"{tuple(f1.shape)}, {tuple(f2.shape)}"
        )
    return (alpha * f1).sum(dim=-1), (alpha * f2).sum(dim=-1)


class SiameseAttention(NamedTuple):
    pair_logits: torch.Tensor
    alpha: torch.Tensor
    s1: torch.Tensor
    s2: torch.Tensor
    map1: torch.Tensor
    map2: torch.Tensor


def siamese_attention_from_features(model, feats, n_pairs, create_graph=False):
    """Run the pair head and Grad-CAM on an already extracted batch.

    ``feats`` holds the first images of ``n_pairs`` pairs followed by the
    second images, i.e. rows ``i`` and ``n_pairs + i`` form pair ``i``.
    """
    f1, f2 = feats.vector[:n_pairs], feats.vector[n_pairs:]
    f_diff = f1 - f2
    z = model.bce_head(f_diff)
    alpha = indicator_vector(z, f_diff)
    s1, s2 = importance_scores(alpha, f1, f2)
    # each row of the maps only feeds its own score, so one backward serves both branches
    maps = grad_cam(s1.sum() + s2.sum(), feats.maps, create_graph=create_graph)
    return SiameseAttention(z, alpha, s1, s2, maps[:n_pairs], maps[n_pairs:])


def siamese_attention_maps(model, image1, image2, create_graph=False):
    """Attention maps of both images w.r.t. the pair head's same-identity logit.

    Accepts single images (C, H, W) or batches of pairs (P, C, H, W).
    """
    single = image1.dim() == 3
    if single:
        image1, image2 = image1[None], image2[None]
    if image1.shape != image2.shape:
        raise ValueError(f"pair images differ in shape: {tuple(image1.shape)} vs {tuple(image2.shape)}")
    feats = model.extract_features(torch.cat([image1, image2]))
    out = siamese_attention_from_features(model, feats, image1.shape[0], create_graph)
    if single:
        return out.map1[0], out.map2[0]
    return out.map1, out.map2


def row_max_pool(maps):
    """Highest response in each horizontal row: (..., h, w) -> (..., h)."""
    return maps.amax(dim=-1)


def align_profiles(v, threshold, length=None):
    """Trim each row of ``v`` (..., h) to its above-threshold span and resample
    the span to ``length`` points (default: ``h``) by linear interpolation.

    The span runs from the first to the last entry whose min-max normalized
    value exceeds ``threshold``; rows with no such entry keep the full range.
    Only the span endpoints are chosen non-differentiably; the output is
    linear in ``v``.
    """
    shape = v.shape
    if length is None:
        length = shape[-1]
    if length < 1:
        raise ValueError(f"alignment length must be >= 1, got {length}")
    flat = v.reshape(-1, shape[-1])
    n, h = flat.shape
    with torch.no_grad():
        above = normalize_map(flat, dims=(-1,)) > threshold
        idx = torch.arange(h, device=v.device).expand(n, h)
        any_above = above.any(dim=1)
        first = torch.where(above, idx, h).amin(dim=1)
        last = torch.where(above, idx, -1).amax(dim=1)
        first = torch.where(any_above, first, 0)
        last = torch.where(any_above, last, h - 1)
        # integer numerator keeps sample positions exact when they land on the grid
        ticks = torch.arange(length, device=v.device)
        pos = first[:, None].double() + ((last - first)[:, None] * ticks).double() / max(length - 1, 1)
        lo = pos.floor().long().clamp(0, h - 1)
        hi = (lo + 1).clamp(max=h - 1)
        frac = (pos - lo.double()).to(v.dtype)
    out = flat.gather(1, lo) * (1 - frac) + flat.gather(1, hi) * frac
    return out.reshape(*shape[:-1], length)


def trim_and_align(v1, v2, threshold, length=None):
    return align_profiles(v1, threshold, length), align_profiles(v2, threshold, length)


def spatial_consistency(v1, v2):
    """Euclidean distance between aligned profiles (along the last dim)."""
    if v1.shape != v2.shape:
        raise ValueError(f"aligned profiles differ in shape: {tuple(v1.shape)} vs {tuple(v2.shape)}")
    return torch.linalg.vector_norm(v1 - v2, dim=-1)


def attention_profile(maps, threshold, length=None):
    """Normalized map -> row-max profile -> aligned profile."""
    return align_profiles(row_max_pool(normalize_map(maps)), threshold, length)

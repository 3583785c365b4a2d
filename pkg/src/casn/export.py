"""Attention map export: grayscale PNGs, color overlays and profile dumps.

File names are ``<split>_<imageid>_<branch>.png`` for the map and
``<split>_<imageid>_<branch>_overlay.png`` for the overlay.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .attention import align_profiles, grad_cam, normalize_map, row_max_pool, siamese_attention_maps


def map_to_uint8(att):
    """Min-max scale a (h, w) map to 0..255 (all-zero maps stay black)."""
    arr = normalize_map(torch.as_tensor(att, dtype=torch.float64)).numpy()
    return np.round(arr * 255).astype(np.uint8)


def _jet(x):
    # piecewise-linear jet colormap on [0, 1]
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def overlay(source, att, alpha=0.5):
    """Blend a jet-colored upsampled map over ``source`` (a PIL image)."""
    source = source.convert("RGB")
    w, h = source.size
    m = normalize_map(torch.as_tensor(att, dtype=torch.float64))
    up = F.interpolate(m[None, None], size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
    base = np.asarray(source, dtype=np.float64) / 255.0
    mixed = (1 - alpha) * base + alpha * _jet(up)
    return Image.fromarray(np.round(mixed * 255).astype(np.uint8))


def image_key(path):
    path = Path(path)
    return f"{path.parent.name}_{path.stem}"


def write_map(out_dir, path, branch, att):
    """Write map + overlay for the image at ``path``; returns both file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{image_key(path)}_{branch}"
    gray = out_dir / f"{stem}.png"
    over = out_dir / f"{stem}_overlay.png"
    Image.fromarray(map_to_uint8(att), mode="L").save(gray)
    with Image.open(path) as src:
        overlay(src, att).save(over)
    return gray, over


def export_pair(model, image_a, image_b, path_a, path_b, out_dir, threshold=0.5, length=None):
    """Siamese attention maps for one pair plus the aligned row profiles as text."""
    m1, m2 = siamese_attention_maps(model, image_a, image_b)
    m1, m2 = m1.detach(), m2.detach()
    files = [*write_map(out_dir, path_a, "a", m1), *write_map(out_dir, path_b, "b", m2)]
    v1 = align_profiles(row_max_pool(normalize_map(m1)), threshold, length)
    v2 = align_profiles(row_max_pool(normalize_map(m2)), threshold, length)
    prof = Path(out_dir) / f"{image_key(path_a)}__{image_key(path_b)}_profiles.txt"
    prof.write_text(
        "a " + " ".join(f"{x:.6f}" for x in v1.tolist()) + "\n"
        + "b " + " ".join(f"{x:.6f}" for x in v2.tolist()) + "\n"
        + f"distance {float(torch.linalg.vector_norm(v1 - v2)):.6f}\n"
    )
    files.append(prof)
    return files


def export_identification(model, image, path, label, out_dir):
    """Grad-CAM map of identity ``label`` for a single image."""
    if not 0 <= label < model.num_classes:
        raise ValueError(f"label must lie in [0, {model.num_classes}), got {label}")
    feats = model.extract_features(image[None])
    score = model.ide_head(feats.vector)[0, label]
    att = grad_cam(score, feats.maps)[0].detach()
    return list(write_map(out_dir, path, "ia", att))

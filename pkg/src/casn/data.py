"""Dataset scanning, pair sampling and the synthetic person generator.

Directory layout (Market-1501 style)::

    root/train/0007_c2_001.png
    root/query/...
    root/gallery/...

File names follow ``<identity>_c<camera>_<seq>.<ext>``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

SPLITS = ("train", "query", "gallery")
IMAGE_EXTS = (".png", ".jpg", ".jpeg")
NAME_RE = re.compile(r"^(\d+)_c(\d+)_([A-Za-z0-9]+)\.(png|jpg|jpeg)$", re.IGNORECASE)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ReidSample:
    image_path: Path
    identity: int  # raw identity from the file name
    camera: int
    split: str
    label: int  # dense identity index within the split


@dataclass
class PairBatch:
    images_a: torch.Tensor
    images_b: torch.Tensor
    identity_a: torch.Tensor
    identity_b: torch.Tensor
    pair_label: torch.Tensor

    def __post_init__(self):
        same = (self.identity_a == self.identity_b).long()
        if not torch.equal(same, self.pair_label.long()):
            raise AssertionError("pair_label disagrees with the identities of the pair")


def parse_name(path):
    m = NAME_RE.match(Path(path).name)
    if m is None:
        raise DatasetError(f"malformed file name {str(path)!r}: expected <identity>_c<camera>_<seq>.<ext>")
    return int(m.group(1)), int(m.group(2))


def scan_dataset(root):
    """List every image under ``root/{train,query,gallery}`` in a stable order."""
    root = Path(root)
    samples = []
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            raise DatasetError(f"missing split directory {str(split_dir)!r}")
        files = sorted(p for p in split_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS)
        if not files:
            raise DatasetError(f"split {split!r} under {str(root)!r} contains no images")
        parsed = [(p, *parse_name(p)) for p in files]
        dense = {pid: i for i, pid in enumerate(sorted({pid for _, pid, _ in parsed}))}
        samples += [ReidSample(p, pid, cam, split, dense[pid]) for p, pid, cam in parsed]
    return samples


def split_samples(samples, split):
    return [s for s in samples if s.split == split]


def load_image(path, size, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Read an image, resize to ``size`` = (height, width), normalize; returns CHW."""
    with Image.open(path) as im:
        im = im.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


class ImageSet:
    """Images of one split held in memory as a single (N, C, H, W) tensor."""

    def __init__(self, samples, size):
        self.samples = list(samples)
        self.size = tuple(size)
        self.images = torch.stack([load_image(s.image_path, self.size) for s in self.samples])
        self.labels = torch.tensor([s.label for s in self.samples])
        self.identities = np.array([s.identity for s in self.samples])
        self.cameras = np.array([s.camera for s in self.samples])

    def __len__(self):
        return len(self.samples)

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1


def sample_pair_indices(labels, cameras, batch_size=16, positive_fraction=0.5, rng_seed=0):
    """Endless stream of ``(idx_a, idx_b, pair_label)`` index batches.

    Positives pick an identity with at least two images, then a partner from a
    different camera when one exists.
    """
    labels = np.asarray(labels)
    cameras = np.asarray(cameras)
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError(f"positive_fraction must lie in [0, 1], got {positive_fraction}")
    by_id = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
    if len(by_id) < 2:
        raise DatasetError("pair sampling needs at least two identities")
    multi = sorted(c for c, idx in by_id.items() if len(idx) >= 2)
    n_pos = int(round(positive_fraction * batch_size))
    if n_pos and not multi:
        raise DatasetError("no identity has two or more images; cannot form positive pairs")
    ids = sorted(by_id)
    rng = np.random.default_rng(rng_seed)
    while True:
        a, b, y = [], [], []
        for _ in range(n_pos):
            c = multi[rng.integers(len(multi))]
            i = rng.choice(by_id[c])
            others = by_id[c][by_id[c] != i]
            cross = others[cameras[others] != cameras[i]]
            j = rng.choice(cross if len(cross) else others)
            a.append(i), b.append(j), y.append(1)
        for _ in range(batch_size - n_pos):
            c1, c2 = rng.choice(ids, size=2, replace=False)
            a.append(rng.choice(by_id[int(c1)])), b.append(rng.choice(by_id[int(c2)])), y.append(0)
        order = rng.permutation(batch_size)
        yield np.asarray(a)[order], np.asarray(b)[order], np.asarray(y)[order]


def sample_pairs(image_set, batch_size=16, positive_fraction=0.5, rng_seed=0, flip=False):
    """Endless stream of :class:`PairBatch` drawn from an :class:`ImageSet`."""
    flip_rng = np.random.default_rng([rng_seed, 1])
    stream = sample_pair_indices(image_set.labels.numpy(), image_set.cameras, batch_size,
                                 positive_fraction, rng_seed)
    for ia, ib, y in stream:
        xa, xb = image_set.images[ia], image_set.images[ib]
        if flip:
            fa = torch.from_numpy(flip_rng.random(len(ia)) < 0.5)
            fb = torch.from_numpy(flip_rng.random(len(ib)) < 0.5)
            xa = torch.where(fa[:, None, None, None], xa.flip(-1), xa)
            xb = torch.where(fb[:, None, None, None], xb.flip(-1), xb)
        yield PairBatch(xa, xb, image_set.labels[ia], image_set.labels[ib], torch.from_numpy(y))


# ---------------------------------------------------------------- synthetic data

PALETTE = np.array([
    (220, 30, 30), (30, 160, 40), (40, 60, 220), (240, 200, 20), (200, 40, 200),
    (20, 200, 210), (250, 130, 20), (120, 60, 20), (240, 240, 240), (20, 20, 20),
    (130, 130, 250), (150, 220, 120),
])
PATTERNS = ("solid", "hstripe", "vstripe", "belt")


def identity_signature(rng):
    top, bottom = rng.choice(len(PALETTE), size=2, replace=False)
    return {
        "top": tuple(int(v) for v in PALETTE[top]),
        "bottom": tuple(int(v) for v in PALETTE[bottom]),
        "hat": tuple(int(v) for v in PALETTE[rng.integers(len(PALETTE))]),
        "pattern": PATTERNS[rng.integers(len(PATTERNS))],
        "build": float(rng.uniform(0.75, 1.0)),  # torso width factor
        "legs": int(rng.integers(1, 3)),  # one skirt-like block or two legs
    }


def render_person(sig, size, rng, camera_gain=(1.0, 1.0, 1.0)):
    """Draw one view of an identity on a cluttered background.

    ``camera_gain`` is a per-channel color cast shared by all images of a
    camera; each image also gets its own brightness jitter.
    """
    h, w = size
    noise = rng.integers(60, 190, size=(h, w, 3)).astype(np.uint8)
    im = Image.fromarray(noise)
    draw = ImageDraw.Draw(im)
    for _ in range(int(rng.integers(3, 7))):
        x0, y0 = rng.integers(0, w), rng.integers(0, h)
        x1, y1 = x0 + rng.integers(2, w // 2 + 2), y0 + rng.integers(2, h // 3 + 2)
        color = tuple(int(v) for v in rng.integers(40, 215, size=3))
        if rng.random() < 0.5:
            draw.rectangle([x0, y0, x1, y1], fill=color)
        else:
            draw.ellipse([x0, y0, x1, y1], fill=color)

    scale = rng.uniform(0.7, 1.0)
    ph = h * 0.9 * scale
    pw = w * 0.6 * scale
    cx = w / 2 + rng.uniform(-0.15, 0.15) * w
    top = (h - ph) / 2 + rng.uniform(-0.05, 0.05) * h

    head_r = ph * 0.08
    head_cy = top + head_r
    draw.ellipse([cx - head_r, head_cy - head_r, cx + head_r, head_cy + head_r], fill=(225, 185, 150))
    draw.rectangle([cx - head_r, top - head_r * 0.4, cx + head_r, top + head_r * 0.5], fill=sig["hat"])

    torso_top, torso_bot = top + ph * 0.18, top + ph * 0.55
    tw = pw * sig["build"] / 2
    draw.rectangle([cx - tw, torso_top, cx + tw, torso_bot], fill=sig["top"])
    dark = tuple(max(0, v - 110) for v in sig["top"])
    if sig["pattern"] == "hstripe":
        for y in np.arange(torso_top + 2, torso_bot, 4):
            draw.line([cx - tw, y, cx + tw, y], fill=dark, width=1)
    elif sig["pattern"] == "vstripe":
        for x in np.arange(cx - tw + 2, cx + tw, 4):
            draw.line([x, torso_top, x, torso_bot], fill=dark, width=1)
    elif sig["pattern"] == "belt":
        draw.rectangle([cx - tw, torso_bot - ph * 0.06, cx + tw, torso_bot], fill=dark)

    leg_bot = top + ph
    if sig["legs"] == 1:
        draw.rectangle([cx - tw * 0.9, torso_bot, cx + tw * 0.9, leg_bot], fill=sig["bottom"])
    else:
        gap = max(1.0, tw * 0.2)
        draw.rectangle([cx - tw * 0.9, torso_bot, cx - gap / 2, leg_bot], fill=sig["bottom"])
        draw.rectangle([cx + gap / 2, torso_bot, cx + tw * 0.9, leg_bot], fill=sig["bottom"])

    if rng.random() < 0.3:
        # partial occlusion by a gray block entering from one side
        oy = rng.uniform(0.3, 0.8) * h
        oh = rng.uniform(0.1, 0.2) * h
        ow = rng.uniform(0.2, 0.4) * w
        x0 = 0 if rng.random() < 0.5 else w - ow
        shade = int(rng.integers(90, 160))
        draw.rectangle([x0, oy, x0 + ow, oy + oh], fill=(shade, shade, shade))
    gain = np.asarray(camera_gain) * rng.uniform(0.8, 1.2)
    arr = np.asarray(im, dtype=np.float64) * gain
    return Image.fromarray(np.clip(np.round(arr), 0, 255).astype(np.uint8))


def generate_synthetic(root, n_identities=8, images_per_identity=6, image_size=(64, 32),
                       seed=0, n_cameras=3):
    """Write a synthetic re-id dataset and return its manifest rows.

    Per identity: one query image (camera 0), one gallery image (camera 1),
    and ``images_per_identity - 2`` training images spread over all cameras.
    A ``manifest.csv`` with ``path,identity,camera,split`` rows is written
    next to the split directories.
    """
    if images_per_identity < 3:
        raise ValueError("images_per_identity must be >= 3 (train, query and gallery each need one)")
    if n_cameras < 2:
        raise ValueError("n_cameras must be >= 2 so query and gallery views differ")
    root = Path(root)
    try:
        for split in SPLITS:
            (root / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directories under {str(root)!r}: {exc}") from exc

    sig_rng = np.random.default_rng([seed, 0])
    gains = np.random.default_rng([seed, 2]).uniform(0.7, 1.3, size=(n_cameras, 3))
    rows = []
    for pid in range(n_identities):
        sig = identity_signature(sig_rng)
        for k in range(images_per_identity):
            if k == 0:
                split, cam = "query", 0
            elif k == 1:
                split, cam = "gallery", 1
            else:
                split, cam = "train", (k - 2) % n_cameras
            img_rng = np.random.default_rng([seed, 1, pid, k])
            im = render_person(sig, image_size, img_rng, gains[cam])
            rel = Path(split) / f"{pid:04d}_c{cam}_{k:03d}.png"
            im.save(root / rel)
            rows.append((rel.as_posix(), pid, cam, split))
    rows.sort()
    with open(root / "manifest.csv", "w") as fh:
        fh.write("path,identity,camera,split\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    return rows


def read_manifest(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    rows = []
    for line in lines[1:]:
        p, pid, cam, split = line.split(",")
        rows.append((p, int(pid), int(cam), split))
    return rows

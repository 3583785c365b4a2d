"""Two-branch training loop, checkpoints and the consistency diagnostic."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import torch

from .attention import attention_profile, siamese_attention_from_features, spatial_consistency
from .backbone import CASNModel
from .config import RunConfig
from .data import ImageSet, sample_pairs, scan_dataset, split_samples
from .losses import total_loss

log = logging.getLogger(__name__)

LOG_KEYS = ("total", "ide", "ia", "sa", "bce", "spatial")


class CheckpointError(ValueError):
    pass


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_model(config, num_classes):
    model = CASNModel(num_classes, backbone=config.backbone, hidden_dim=config.hidden_dim,
                      pretrained=config.pretrained)
    return model.to(config.dtype)


def positive_pairs(labels, cameras=None, cross_camera=True):
    """All unordered same-identity index pairs (cross-camera only if requested
    and available for that identity)."""
    labels = np.asarray(labels)
    pairs = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        cand = list(combinations(idx.tolist(), 2))
        if cross_camera and cameras is not None:
            cross = [(i, j) for i, j in cand if cameras[i] != cameras[j]]
            cand = cross or cand
        pairs += cand
    return pairs


def pair_consistency(model, images, pairs, threshold, length=None, chunk=64):
    """Mean spatial-consistency distance over the given image pairs, computed
    with the model in eval mode (the training mode is restored afterwards)."""
    if not pairs:
        return float("nan")
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        for s in range(0, len(pairs), chunk):
            block = np.asarray(pairs[s:s + chunk])
            feats = model.extract_features(torch.cat([images[block[:, 0]], images[block[:, 1]]]))
            att = siamese_attention_from_features(model, feats, len(block))
            d = spatial_consistency(attention_profile(att.map1, threshold, length),
                                    attention_profile(att.map2, threshold, length))
            total += float(d.detach().sum())
    finally:
        model.train(was_training)
    return total / len(pairs)


@dataclass
class TrainResult:
    model: CASNModel
    history: list = field(default_factory=list)  # one dict per epoch
    step_losses: list = field(default_factory=list)
    checkpoint: Path | None = None


def train(config: RunConfig, output_dir=None, train_set=None, write_files=True, progress=None):
    """Train on ``config.dataset_root``'s train split (or a preloaded ``train_set``)."""
    config.validate()
    seed_everything(config.seed)
    if train_set is None:
        train_set = ImageSet(split_samples(scan_dataset(config.dataset_root), "train"), config.image_size)
    train_set.images = train_set.images.to(config.dtype)
    model = build_model(config, train_set.num_classes)
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=config.decay_epoch or config.epochs + 1,
                                                gamma=config.decay_factor)
    batches = sample_pairs(train_set, config.batch_size, config.positive_fraction, config.seed,
                           flip=config.flip)
    steps = config.steps_per_epoch or math.ceil(len(train_set) / config.batch_size)
    length = config.align_length or None
    diag_pairs = positive_pairs(train_set.labels.numpy(), train_set.cameras)

    result = TrainResult(model)
    for epoch in range(1, config.epochs + 1):
        sums = {}
        lr = optimizer.param_groups[0]["lr"]
        for _ in range(steps):
            batch = next(batches)
            terms = total_loss(model, batch, config.loss_weights, config.mask_params,
                               config.trim_threshold, length, config.enable_ia, config.enable_sa)
            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step()
            values = terms.as_floats()
            result.step_losses.append(values["total"])
            for k, v in values.items():
                sums.setdefault(k, []).append(v)
        scheduler.step()
        row = {"epoch": epoch, "lr": lr}
        row.update({k: float(np.mean(sums[k])) for k in LOG_KEYS if k in sums})
        row["consistency"] = pair_consistency(model, train_set.images, diag_pairs,
                                              config.trim_threshold, length)
        result.history.append(row)
        log.info(format_row(row))
        if progress is not None:
            progress(row)

    if write_files:
        out = Path(output_dir or config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out / "checkpoint.pt"
        save_checkpoint(result.checkpoint, model, optimizer, config, train_set.num_classes)
        write_history(out / "metrics.log", result.history)
        plot_losses(out / "loss_curve.png", result.history)
    return result


def format_row(row):
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items())


def write_history(path, history):
    with open(path, "w") as fh:
        for row in history:
            fh.write(format_row(row) + "\n")


def plot_losses(path, history):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in LOG_KEYS:
        if any(key in r for r in history):
            ax.plot(epochs, [r.get(key, np.nan) for r in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_checkpoint(path, model, optimizer, config, num_classes):
    torch.save({
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "config": config.to_ini(),
        "config_fingerprint": config.fingerprint(),
        "num_classes": num_classes,
        "feature_dim": model.feature_dim,
        "backbone": model.backbone_name,
        "hidden_dim": model.hidden_dim,
        "seed": config.seed,
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": np.random.get_state(),
    }, path)


def load_checkpoint(path, config=None):
    """Rebuild the model stored at ``path``; returns ``(model, checkpoint dict)``.

    When ``config`` is given its model settings must match the checkpoint.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    stored = RunConfig.from_ini(ckpt["config"])
    if config is not None:
        mismatched = [
            f"{name}: checkpoint={getattr(stored, name)} config={getattr(config, name)}"
            for name in ("backbone", "hidden_dim", "precision")
            if getattr(stored, name) != getattr(config, name)
        ]
        if mismatched:
            raise CheckpointError("checkpoint incompatible with config (" + "; ".join(mismatched) + ")")
    model = build_model(stored, ckpt["num_classes"])
    try:
        model.load_state_dict(ckpt["model"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint weights do not fit the model: {exc}") from exc
    model.eval()
    return model, ckpt

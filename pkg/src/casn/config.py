"""Run configuration: one INI-style file, flat keys grouped in sections.

Keys are unique across sections, so overrides may name either ``key`` or
``section.key``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

import torch

from .attention import MaskParams
from .losses import LossWeights


class ConfigError(ValueError):
    pass


def _f(section, default, **kw):
    return field(default=default, metadata={"section": section, **kw})


@dataclass
class RunConfig:
    # data
    dataset_root: str = _f("data", "data/synthetic")
    output_dir: str = _f("data", "runs/default")
    image_height: int = _f("data", 288)
    image_width: int = _f("data", 144)
    positive_fraction: float = _f("data", 0.5)
    flip: bool = _f("data", False)
    # synthetic generator
    synth_identities: int = _f("synthetic", 8)
    synth_images_per_identity: int = _f("synthetic", 6)
    synth_cameras: int = _f("synthetic", 3)
    # model
    backbone: str = _f("model", "small")
    hidden_dim: int = _f("model", 512)
    pretrained: bool = _f("model", False)
    precision: str = _f("model", "float32")  # or float64
    # optimizer / schedule
    lr: float = _f("optim", 0.03)
    momentum: float = _f("optim", 0.9)
    weight_decay: float = _f("optim", 5e-4)
    epochs: int = _f("optim", 40)
    decay_epoch: int = _f("optim", 30)
    decay_factor: float = _f("optim", 0.1)
    batch_size: int = _f("optim", 16)
    steps_per_epoch: int = _f("optim", 0)  # 0: ceil(train images / batch size)
    # loss weights
    lambda1: float = _f("loss", 0.5)
    lambda2: float = _f("loss", 0.05)
    sa_alpha: float = _f("loss", 0.2)
    # attention
    mask_sharpness: float = _f("attention", 8.0)
    mask_threshold: float = _f("attention", 0.5)
    trim_threshold: float = _f("attention", 0.5)
    align_length: int = _f("attention", 0)  # 0: feature-map height
    # ablation switches
    enable_ia: bool = _f("ablation", True)
    enable_sa: bool = _f("ablation", True)
    # evaluation
    eval_mode: str = _f("eval", "feature_only")
    max_rank: int = _f("eval", 50)
    max_gallery: int = _f("eval", 0)  # 0: no cap
    fusion_feature_weight: float = _f("eval", 1.0)
    fusion_attention_weight: float = _f("eval", 1.0)
    # run
    seed: int = _f("run", 0)

    def __post_init__(self):
        self.validate()

    @property
    def image_size(self):
        return (self.image_height, self.image_width)

    @property
    def dtype(self):
        return torch.float64 if self.precision == "float64" else torch.float32

    @property
    def loss_weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.sa_alpha)

    @property
    def mask_params(self):
        return MaskParams(self.mask_sharpness, self.mask_threshold)

    def validate(self):
        errors = []
        for name in ("image_height", "image_width", "hidden_dim", "epochs", "batch_size",
                     "max_rank", "synth_identities", "synth_cameras"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be positive")
        for name in ("lr", "mask_sharpness", "decay_factor"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be positive")
        for name in ("momentum", "weight_decay", "lambda1", "lambda2", "sa_alpha",
                     "steps_per_epoch", "align_length", "max_gallery", "decay_epoch",
                     "fusion_feature_weight", "fusion_attention_weight", "seed"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be non-negative")
        if not 0 <= self.positive_fraction <= 1:
            errors.append("positive_fraction must lie in [0, 1]")
        for name in ("mask_threshold", "trim_threshold"):
            if not 0 < getattr(self, name) < 1:
                errors.append(f"{name} must lie in (0, 1)")
        if self.precision not in ("float32", "float64"):
            errors.append("precision must be 'float32' or 'float64'")
        if self.eval_mode not in ("fused", "feature_only"):
            errors.append("eval_mode must be 'fused' or 'feature_only'")
        if self.synth_images_per_identity < 3:
            errors.append("synth_images_per_identity must be >= 3")
        if errors:
            raise ConfigError("invalid config: " + "; ".join(errors))

    # -- serialization

    def to_ini(self):
        sections = {}
        for f in fields(self):
            sections.setdefault(f.metadata["section"], []).append((f.name, _fmt(getattr(self, f.name))))
        out = []
        for sec, items in sections.items():
            out.append(f"[{sec}]")
            out += [f"{k} = {v}" for k, v in items]
            out.append("")
        return "\n".join(out)

    def fingerprint(self):
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    @classmethod
    def from_ini(cls, text, overrides=()):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        by_name = {f.name: f for f in fields(cls)}
        values = {}
        for sec in parser.sections():
            for key, raw in parser.items(sec):
                if key not in by_name:
                    raise ConfigError(f"unknown config key {sec}.{key}")
                if by_name[key].metadata["section"] != sec:
                    raise ConfigError(f"key {key!r} belongs in section [{by_name[key].metadata['section']}]")
                values[key] = _parse(by_name[key], raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            key = key.strip().split(".")[-1]
            if key not in by_name:
                raise ConfigError(f"unknown config key {key!r} in override")
            values[key] = _parse(by_name[key], raw.strip())
        return cls(**values)

    @classmethod
    def load(cls, path, overrides=()):
        with open(path) as fh:
            return cls.from_ini(fh.read(), overrides)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(f, raw):
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as {kind.__name__}") from None

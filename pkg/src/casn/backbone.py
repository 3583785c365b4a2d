"""Feature extractor and the two classifier heads.

Images are NCHW float tensors (the usual PyTorch layout). The extractor returns
the last convolutional maps ``A`` with shape (N, K, h, w) together with the
globally average-pooled vector ``f`` of shape (N, K); both stay on the autograd
graph so attention code can differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class BackbonePreset:
    stem_width: int
    stem_stride: int
    stem_pool: bool
    widths: tuple[int, ...]
    blocks: tuple[int, ...]
    strides: tuple[int, ...]


PRESETS = {
    # 4 stages, <=16 channels, total stride 8: cheap enough for finite differences
    "tiny": BackbonePreset(8, 1, False, (8, 8, 16, 16), (1, 1, 1, 1), (1, 2, 2, 2)),
    "small": BackbonePreset(16, 2, False, (16, 32, 48, 64), (1, 1, 1, 1), (1, 2, 2, 1)),
    # ResNet-18 layout, total stride 32
    "resnet18": BackbonePreset(64, 2, True, (64, 128, 256, 512), (2, 2, 2, 2), (1, 2, 2, 2)),
}


@dataclass
class FeatureBundle:
    maps: torch.Tensor
    vector: torch.Tensor


def check_finite(images):
    if not torch.is_tensor(images) or images.dim() != 4:
        raise ValueError(f"expected an NCHW image tensor, got {getattr(images, 'shape', type(images))}")
    if images.shape[2] < 1 or images.shape[3] < 1:
        raise ValueError(f"image spatial dims must be positive, got {tuple(images.shape[2:])}")
    if not torch.isfinite(images).all():
        raise ValueError("input images contain non-finite values")


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        # trailing ReLU is applied by the extractor loop
        return out + identity


class ResidualExtractor(nn.Module):
    """Small residual CNN. Output channels K = last stage width."""

    def __init__(self, preset: BackbonePreset, in_channels: int = 3):
        super().__init__()
        self.preset = preset
        stem = [
            nn.Conv2d(in_channels, preset.stem_width, 3, preset.stem_stride, 1, bias=False),
            nn.BatchNorm2d(preset.stem_width),
            nn.ReLU(inplace=True),
        ]
        if preset.stem_pool:
            stem.append(nn.MaxPool2d(3, 2, 1))
        self.stem = nn.Sequential(*stem)
        layers = []
        ch = preset.stem_width
        for width, n_blocks, stride in zip(preset.widths, preset.blocks, preset.strides):
            for i in range(n_blocks):
                layers.append(BasicBlock(ch, width, stride if i == 0 else 1))
                ch = width
        self.layers = nn.ModuleList(layers)
        self.out_channels = ch

    @property
    def total_stride(self):
        s = self.preset.stem_stride * (2 if self.preset.stem_pool else 1)
        for stride in self.preset.strides:
            s *= stride
        return s

    def forward(self, x):
        x = self.stem(x)
        for layer in self.layers:
            x = F.relu(layer(x))
        return x


class TorchvisionResNet50(nn.Module):
    """ResNet-50 conv1..conv5 from torchvision, optionally ImageNet-initialized."""

    total_stride = 32

    def __init__(self, pretrained=False):
        super().__init__()
        from torchvision import models

        weights = models.ResNet50_Weights.DEFAULT if pretrained else None
        resnet = models.resnet50(weights=weights)
        self.body = nn.Sequential(*list(resnet.children())[:-2])
        self.out_channels = 2048

    def forward(self, x):
        return self.body(x)


def build_extractor(name, pretrained=False):
    if name == "resnet50":
        return TorchvisionResNet50(pretrained=pretrained)
    if name not in PRESETS:
        raise ValueError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS) + ['resnet50']}")
    if pretrained:
        raise ValueError(f"no pretrained weights available for preset {name!r}")
    return ResidualExtractor(PRESETS[name])


class TwoLayerHead(nn.Module):
    """Two fully-connected layers with a ReLU in between."""

    def __init__(self, in_dim, hidden_dim, out_dim):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"head expects input dim {self.in_dim}, got {x.shape[-1]}")
        return self.fc2(F.relu(self.fc1(x)))


class CASNModel(nn.Module):
    """Shared extractor plus the identity (IDE) head and the pair (BCE) head.

    Both Siamese branches call the same :meth:`extract_features`; there is
    only one copy of the extractor weights.
    """

    def __init__(self, num_classes, backbone="small", hidden_dim=512, pretrained=False):
        super().__init__()
        self.backbone_name = backbone
        self.num_classes = num_classes
        self.hidden_dim = hidden_dim
        self.extractor = build_extractor(backbone, pretrained)
        self.feature_dim = self.extractor.out_channels
        self.ide = TwoLayerHead(self.feature_dim, hidden_dim, num_classes)
        self.bce = TwoLayerHead(self.feature_dim, hidden_dim, 2)

    def pool(self, maps):
        return maps.mean(dim=(2, 3))

    def extract_features(self, images):
        check_finite(images)
        maps = self.extractor(images)
        return FeatureBundle(maps, self.pool(maps))

    def ide_head(self, f):
        return self.ide(f)

    def bce_head(self, f_diff):
        return self.bce(f_diff)

    def map_size(self, height, width):
        """Spatial size of the feature maps for a given input size."""
        s = self.extractor.total_stride
        return -(-height // s), -(-width // s)

    def forward(self, images):
        feats = self.extract_features(images)
        return feats, self.ide_head(feats.vector)

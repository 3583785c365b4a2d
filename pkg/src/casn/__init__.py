"""Consistent attentive Siamese network for person re-identification."""

from .attention import (
    MaskParams,
    grad_cam,
    identification_attention_loss,
    importance_scores,
    indicator_vector,
    row_max_pool,
    siamese_attention_maps,
    soft_mask,
    spatial_consistency,
    trim_and_align,
)
from .backbone import CASNModel, FeatureBundle
from .config import RunConfig
from .losses import LossWeights, bce_loss, ide_loss, siamese_attention_loss, total_loss

__version__ = "0.1.0"

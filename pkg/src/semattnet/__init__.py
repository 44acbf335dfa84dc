"""Depth completion from sparse LiDAR, RGB and semantic guidance.

Three encoder-decoder branches (color-, semantic- and depth-guided) are fused
through attention blocks and per-pixel confidences, then optionally refined by
dilated spatial propagation.
"""
from .attention import SAMMAFB, ChannelAttention, SpatialAttention, channel_attention, sammafb_fuse, spatial_attention
from .backbone import Backbone, Branch
from .config import ABLATIONS, RunConfig, ablation_config
from .cspn import normalize_affinity, propagate_step, refine
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    EmptyMaskError,
    FormatError,
    NonFiniteLossError,
    SemAttNetError,
    ShapeError,
    ValidationError,
    VersionError,
)
from .fusion import confidence_fuse, fusion_weights
from .losses import LossWeights, lambda_schedule, masked_l2, metrics, total_loss
from .model import Prediction, SemAttNet

__version__ = "0.1.0"

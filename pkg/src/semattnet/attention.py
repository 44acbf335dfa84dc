"""Semantic-aware multi-modal attention fusion (SAMMAFB).

Modality feature maps are concatenated along channels in the fixed order
[color; semantic; depth], gated per channel from pooled statistics, then
gated per location from cross-channel pooled planes.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, ValidationError


def default_reduction(channels: int) -> int:
    """Largest CBAM-style reduction ratio that divides ``channels``.

    16 whenever it divides, otherwise the largest divisor not exceeding
    min(16, channels // 2) (so at least two hidden units survive when possible).
    """
    if channels >= 16 and channels % 16 == 0:
        return 16
    for r in range(min(16, max(1, channels // 2)), 0, -1):
        if channels % r == 0:
            return r
    return 1


def _check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise ValidationError(f"{name} contains non-finite values")


def _as_batched(f: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if f.dim() == 3:
        return f.unsqueeze(0), True
    if f.dim() == 4:
        return f, False
    raise DimensionError(f"expected C x H x W or B x C x H x W, got shape {tuple(f.shape)}")


def channel_attention(f: torch.Tensor, w0: torch.Tensor, w1: torch.Tensor) -> torch.Tensor:
    """Per-channel gates ``sigmoid(W1 relu(W0 avg) + W1 relu(W0 max))``.

    Returns shape (B, C, 1, 1), or (C, 1, 1) for unbatched input.
    """
    x, squeeze = _as_batched(f)
    _check_finite(x, "feature map")
    c = x.shape[1]
    if w0.dim() != 2 or w1.dim() != 2 or w0.shape[1] != c or w1.shape != (c, w0.shape[0]):
        raise DimensionError(
            f"channel attention weights {tuple(w0.shape)}/{tuple(w1.shape)} do not fit {c} channels"
        )
    avg = x.mean(dim=(2, 3))
    mx = x.amax(dim=(2, 3))

    def mlp(v: torch.Tensor) -> torch.Tensor:
        return F.relu(v @ w0.t()) @ w1.t()

    att = torch.sigmoid(mlp(avg) + mlp(mx))[:, :, None, None]
    return att[0] if squeeze else att


def spatial_attention(f: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-location gates from the channel-wise mean and max planes.

    ``kernel`` has shape (1, 2, k, k) with odd k; zero padding keeps H x W.
    Returns shape (B, 1, H, W), or (1, H, W) for unbatched input.
    """
    x, squeeze = _as_batched(f)
    _check_finite(x, "feature map")
    if kernel.dim() != 4 or kernel.shape[:2] != (1, 2) or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"spatial kernel must be 1 x 2 x k x k, got {tuple(kernel.shape)}")
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ValidationError(f"spatial kernel size must be odd, got {k}")
    pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
    att = torch.sigmoid(F.conv2d(pooled, kernel, bias.reshape(1), padding=k // 2))
    return att[0] if squeeze else att


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int | None = None):
        super().__init__()
        r = default_reduction(channels) if reduction is None else reduction
        if r < 1 or channels % r:
            raise ValidationError(f"reduction ratio {r} must divide channel count {channels}")
        self.channels = channels
        self.reduction = r
        hidden = channels // r
        self.w0 = nn.Parameter(torch.empty(hidden, channels))
        self.w1 = nn.Parameter(torch.empty(channels, hidden))
        nn.init.kaiming_uniform_(self.w0, a=math.sqrt(5))
        nn.init.kaiming_uniform_(self.w1, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return channel_attention(x, self.w0, self.w1)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValidationError(f"spatial kernel size must be odd, got {kernel_size}")
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(torch.empty(1, 2, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(1))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return spatial_attention(x, self.weight, self.bias)


def sammafb_fuse(
    features: Sequence[torch.Tensor],
    channel_att: ChannelAttention,
    spatial_att: SpatialAttention,
) -> torch.Tensor:
    """Concatenate 2 or 3 same-shape modality maps and apply both gates.

    ``features`` must already be in [color; semantic; depth] order.
    """
    if len(features) not in (2, 3):
        raise ValidationError(f"SAMMAFB fuses 2 or 3 modalities, got {len(features)}")
    shape = features[0].shape
    for i, feat in enumerate(features[1:], start=1):
        if feat.shape != shape:
            raise DimensionError(f"modality {i} has shape {tuple(feat.shape)}, expected {tuple(shape)}")
    cat_dim = 0 if features[0].dim() == 3 else 1
    fused = torch.cat(list(features), dim=cat_dim)
    refined = channel_att(fused) * fused
    return spatial_att(refined) * refined


class SAMMAFB(nn.Module):
    """Attention fusion block over ``n_modalities`` maps of ``channels`` each."""

    def __init__(
        self,
        channels: int,
        n_modalities: int,
        reduction: int | None = None,
        kernel_size: int = 7,
    ):
        super().__init__()
        if n_modalities not in (2, 3):
            raise ValidationError(f"SAMMAFB fuses 2 or 3 modalities, got {n_modalities}")
        self.n_modalities = n_modalities
        self.channel = ChannelAttention(channels * n_modalities, reduction)
        self.spatial = SpatialAttention(kernel_size)

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(features) != self.n_modalities:
            raise ValidationError(
                f"block built for {self.n_modalities} modalities, got {len(features)}"
            )
        return sammafb_fuse(features, self.channel, self.spatial)

"""Confidence-weighted fusion of per-branch depth predictions."""
from __future__ import annotations

from typing import Sequence

import torch

from .errors import DimensionError, ValidationError


def _stack(maps: Sequence[torch.Tensor], what: str) -> torch.Tensor:
    shape = maps[0].shape
    for i, m in enumerate(maps):
        if m.shape != shape:
            raise DimensionError(f"{what} {i} has shape {tuple(m.shape)}, expected {tuple(shape)}")
    return torch.stack(list(maps), dim=0)


def fusion_weights(confidences: Sequence[torch.Tensor]) -> torch.Tensor:
    """Per-pixel softmax over branches, stacked along a new leading axis.

    Max-subtraction happens inside ``torch.softmax`` so large logits do not overflow.
    """
    if len(confidences) < 2:
        raise ValidationError("need at least two confidence maps")
    conf = _stack(confidences, "confidence map")
    if not torch.isfinite(conf).all():
        raise ValidationError("confidence maps contain non-finite values")
    return torch.softmax(conf, dim=0)


def confidence_fuse(depths: Sequence[torch.Tensor], confidences: Sequence[torch.Tensor]) -> torch.Tensor:
    """``sum_b exp(C_b) D_b / sum_b exp(C_b)`` evaluated pixelwise.

    The result lies between the smallest and largest branch depth at every pixel.
    """
    if len(depths) != len(confidences):
        raise DimensionError(f"{len(depths)} depth maps but {len(confidences)} confidence maps")
    d = _stack(depths, "depth map")
    w = fusion_weights(confidences)
    if d.shape != w.shape:
        raise DimensionError(f"depth maps {tuple(d.shape[1:])} vs confidences {tuple(w.shape[1:])}")
    if not torch.isfinite(d).all():
        raise ValidationError("depth maps contain non-finite values")
    return (w * d).sum(dim=0)

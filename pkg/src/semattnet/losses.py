"""Masked training losses, the branch-weight schedule and KITTI metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, EmptyMaskError, ValidationError

# Full-scale KITTI test-set reference numbers, kept for reports only.
REFERENCE_KITTI_TEST = {"rmse_mm": 709.41, "mae_mm": 205.49, "irmse_per_km": 2.03, "imae_per_km": 0.90}


@dataclass(frozen=True)
class LossWeights:
    lambda_cg: float = 0.2
    lambda_sg: float = 0.2
    lambda_dg: float = 0.2
    decay_end_epoch: int = 10

    def __post_init__(self):
        if min(self.lambda_cg, self.lambda_sg, self.lambda_dg) < 0:
            raise ValidationError("branch loss weights must be nonnegative")
        if self.decay_end_epoch < 1:
            raise ValidationError("decay_end_epoch must be a positive integer")


def valid_mask(gt):
    return gt > 0


def masked_l2(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error over pixels where ``gt > 0``."""
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {tuple(pred.shape)} vs ground truth {tuple(gt.shape)}")
    mask = valid_mask(gt)
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("ground truth has no valid pixels")
    diff = (gt - pred)[mask]
    return (diff * diff).sum() / n


def lambda_schedule(epoch: int, w: LossWeights = LossWeights()) -> tuple[float, float, float]:
    """Linear decay from the initial weights to zero at ``decay_end_epoch``."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    scale = max(0.0, 1.0 - epoch / w.decay_end_epoch)
    return (w.lambda_cg * scale, w.lambda_sg * scale, w.lambda_dg * scale)


def total_loss(l_cg, l_sg, l_dg, l_fused, w: LossWeights = LossWeights(), epoch: int = 0):
    """``lambda_cg L_cg + lambda_sg L_sg + lambda_dg L_dg + L_fused``.

    Works on python floats or scalar tensors.  ``l_sg`` may be None for the
    two-branch (color + depth) configuration.
    """
    for name, v in (("l_cg", l_cg), ("l_sg", l_sg), ("l_dg", l_dg), ("l_fused", l_fused)):
        if v is None:
            continue
        x = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(x) or x < 0:
            raise ValidationError(f"{name} must be finite and nonnegative, got {x}")
    lam_cg, lam_sg, lam_dg = lambda_schedule(epoch, w)
    total = lam_cg * l_cg + lam_dg * l_dg + l_fused
    if l_sg is not None:
        total = total + lam_sg * l_sg
    return total


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def metrics(pred, gt) -> dict[str, float]:
    """KITTI depth-completion metrics on pixels with ``gt > 0``.

    Inputs are in meters; RMSE/MAE come back in millimeters, the inverse-depth
    errors in 1/km.
    """
    pred = _to_numpy(pred)
    gt = _to_numpy(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    mask = gt > 0
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("ground truth has no valid pixels")
    p = pred[mask]
    g = gt[mask]
    bad = int((p <= 0).sum())
    if bad:
        raise ValidationError(f"{bad} of {n} valid pixels have non-positive predicted depth")
    err = g - p
    inv_err = 1.0 / g - 1.0 / p
    return {
        "rmse_mm": float(np.sqrt(np.mean(err**2)) * 1000.0),
        "mae_mm": float(np.mean(np.abs(err)) * 1000.0),
        "irmse_per_km": float(np.sqrt(np.mean(inv_err**2)) * 1000.0),
        "imae_per_km": float(np.mean(np.abs(inv_err)) * 1000.0),
    }

"""CSPN++-style propagation over atrous neighbourhoods.

A depth map is refined by repeatedly replacing every pixel with an
affinity-weighted combination of itself and its k x k - 1 neighbours, the
neighbours spaced ``dilation`` pixels apart.  Valid sparse measurements are
written back after every step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import DimensionError, ValidationError

ITERATIONS = 12
DEFAULT_SCHEDULE: tuple[int, ...] = (2,) * 6 + (1,) * 6
NORMALIZATION_TOL = 1e-5


def neighbor_offsets(kernel_size: int) -> list[tuple[int, int]]:
    """Raster-ordered (dy, dx) stencil offsets, centre excluded."""
    r = kernel_size // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]


def kernel_size_for(n_neighbors: int) -> int:
    k = int(round(math.sqrt(n_neighbors + 1)))
    if k * k - 1 != n_neighbors or k % 2 == 0:
        raise DimensionError(f"{n_neighbors} affinity channels is not k*k-1 for an odd k")
    return k


def check_schedule(schedule: Sequence[int]) -> tuple[int, ...]:
    rates = tuple(int(d) for d in schedule)
    if len(rates) != ITERATIONS:
        raise ValidationError(f"dilation schedule must have {ITERATIONS} entries, got {len(rates)}")
    if any(d < 1 for d in rates):
        raise ValidationError(f"dilation rates must be >= 1, got {rates}")
    return rates


@dataclass
class NormalizedAffinity:
    neighbors: torch.Tensor  # B x (k*k-1) x H x W, signed, sum |.| <= 1
    self_weight: torch.Tensor  # B x 1 x H x W
    kernel_size: int

    def total_mass(self) -> torch.Tensor:
        return self.self_weight + self.neighbors.sum(dim=1, keepdim=True)


def _batched(t: torch.Tensor, channels: int | None = None) -> torch.Tensor:
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None]
    if t.dim() != 4:
        raise DimensionError(f"cannot interpret shape {tuple(t.shape)} as an image batch")
    if channels is not None and t.shape[1] != channels:
        raise DimensionError(f"expected {channels} channels, got {t.shape[1]}")
    return t


def _outside_mask(height, width, kernel_size, dilation, dtype, device) -> torch.Tensor:
    """1 where a stencil tap falls outside the image, shape (k*k-1) x H x W."""
    ys = torch.arange(height, device=device)
    xs = torch.arange(width, device=device)
    masks = []
    for dy, dx in neighbor_offsets(kernel_size):
        yy = ys + dy * dilation
        xx = xs + dx * dilation
        in_y = (yy >= 0) & (yy < height)
        in_x = (xx >= 0) & (xx < width)
        masks.append(~(in_y[:, None] & in_x[None, :]))
    return torch.stack(masks).to(dtype)


def normalize_affinity(raw: torch.Tensor) -> NormalizedAffinity:
    """Divide raw affinities by their per-pixel absolute sum (signs kept).

    The self weight absorbs the remainder so weights sum to one; a pixel whose
    raw affinities are all zero becomes the identity.
    """
    raw = _batched(raw)
    if not torch.isfinite(raw).all():
        raise ValidationError("raw affinities contain non-finite values")
    k = kernel_size_for(raw.shape[1])
    abs_sum = raw.abs().sum(dim=1, keepdim=True)
    denom = torch.where(abs_sum > 0, abs_sum, torch.ones_like(abs_sum))
    neighbors = raw / denom
    self_weight = 1.0 - neighbors.sum(dim=1, keepdim=True)
    return NormalizedAffinity(neighbors, self_weight, k)


def propagate_step(h: torch.Tensor, affinity: NormalizedAffinity, dilation: int) -> torch.Tensor:
    """One propagation step; out-of-image neighbour weight folds into the self weight."""
    if dilation < 1:
        raise ValidationError(f"dilation must be >= 1, got {dilation}")
    mass = affinity.total_mass()
    if not torch.allclose(mass, torch.ones_like(mass), atol=NORMALIZATION_TOL, rtol=0):
        raise ValidationError("affinities are not normalized (weights must sum to 1 per pixel)")
    if affinity.neighbors.abs().sum(dim=1).max() > 1 + NORMALIZATION_TOL:
        raise ValidationError("neighbour affinities exceed unit absolute mass")

    squeeze = h.dim()
    h4 = _batched(h, channels=1)
    b, _, height, width = h4.shape
    if affinity.neighbors.shape[0] != b or affinity.neighbors.shape[2:] != (height, width):
        raise DimensionError(
            f"affinity field {tuple(affinity.neighbors.shape)} does not match map {tuple(h4.shape)}"
        )

    k = affinity.kernel_size
    pad = dilation * (k // 2)
    centre = (k * k) // 2
    outside = _outside_mask(height, width, k, dilation, h4.dtype, h4.device)
    self_weight = affinity.self_weight + (affinity.neighbors * outside).sum(dim=1, keepdim=True)
    kernel = torch.cat(
        [affinity.neighbors[:, :centre], self_weight, affinity.neighbors[:, centre:]], dim=1
    )
    # zero padding: out-of-image taps read 0, their weight already moved to the centre
    patches = F.unfold(h4, k, dilation=dilation, padding=pad)
    out = (kernel.flatten(2) * patches).sum(dim=1).view(b, 1, height, width)

    if squeeze == 2:
        return out[0, 0]
    if squeeze == 3:
        return out[0]
    return out


def refine(
    d_f: torch.Tensor,
    sparse: torch.Tensor,
    raw_affinity: torch.Tensor,
    schedule: Sequence[int] = DEFAULT_SCHEDULE,
) -> torch.Tensor:
    """Normalize once, then propagate following ``schedule`` with sparse re-injection."""
    rates = check_schedule(schedule)
    if d_f.shape != sparse.shape:
        raise DimensionError(f"depth {tuple(d_f.shape)} and sparse {tuple(sparse.shape)} differ")
    affinity = normalize_affinity(raw_affinity)
    valid = sparse > 0
    h = d_f
    for dilation in rates:
        h = propagate_step(h, affinity, dilation)
        h = torch.where(valid, sparse, h)
    return h

"""Color-mapped depth, confidence and error images."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from .fusion import fusion_weights
from .model import Prediction

DEPTH_CMAP = "plasma"
ERROR_CMAP = "jet"  # blue = small error, warmer = larger
ERROR_VMAX_M = 2.0


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64).squeeze()


def colorize(values: np.ndarray, vmin: float, vmax: float, cmap: str) -> np.ndarray:
    span = max(vmax - vmin, 1e-12)
    scaled = np.clip((values - vmin) / span, 0.0, 1.0)
    return (colormaps[cmap](scaled)[..., :3] * 255).round().astype(np.uint8)


def depth_image(depth, vmax: float | None = None) -> np.ndarray:
    d = _np(depth)
    vmax = float(d.max()) if vmax is None else vmax
    return colorize(d, 0.0, vmax, DEPTH_CMAP)


def error_image(pred, gt, vmax: float = ERROR_VMAX_M) -> np.ndarray:
    """Absolute error on a fixed scale; pixels without ground truth are black."""
    p, g = _np(pred), _np(gt)
    valid = g > 0
    img = colorize(np.abs(p - g), 0.0, vmax, ERROR_CMAP)
    img[~valid] = 0
    return img


def confidence_weight_maps(confidences) -> np.ndarray:
    """Per-branch softmax weights (branches x H x W); they sum to one at every pixel."""
    w = fusion_weights([c if isinstance(c, torch.Tensor) else torch.as_tensor(c) for c in confidences])
    return _np(w).reshape(len(confidences), *w.shape[-2:])


def write_visualizations(pred: Prediction, gt, out_dir) -> list[Path]:
    """Write one batch-of-one prediction's images; returns the depth/error image paths.

    Top level: ``depth_<branch>.png`` per branch, ``depth_fused.png``,
    ``depth_refined.png`` (when refinement ran) and ``error.png``.  Confidence
    images and the raw weights go to ``confidence/``.
    """
    out_dir = Path(out_dir)
    (out_dir / "confidence").mkdir(parents=True, exist_ok=True)
    bb = pred.backbone
    g = _np(gt)
    vmax = float(g.max()) if (g > 0).any() else float(_np(bb.fused).max())

    images = {f"depth_{name}": depth_image(d[0], vmax) for name, d in bb.depths.items()}
    images["depth_fused"] = depth_image(bb.fused[0], vmax)
    if pred.refined is not None:
        images["depth_refined"] = depth_image(pred.refined[0], vmax)
    images["error"] = error_image(pred.output[0], gt)

    paths = []
    for name, img in images.items():
        path = out_dir / f"{name}.png"
        Image.fromarray(img).save(path)
        paths.append(path)

    names = list(bb.confidences)
    weights = confidence_weight_maps([bb.confidences[n][0] for n in names])
    np.save(out_dir / "confidence" / "weights.npy", weights)
    for name, w in zip(names, weights):
        Image.fromarray(colorize(w, 0.0, 1.0, "gray")).save(out_dir / "confidence" / f"conf_{name}.png")
    return paths

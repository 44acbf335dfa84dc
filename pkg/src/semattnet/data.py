"""KITTI-style data ingestion, cropping/augmentation and synthetic scenes.

On-disk layout (real or synthetic)::

    root/<split>.txt            one sample id per line
    root/rgb/<id>.png           8-bit RGB
    root/semantic/<id>.png      8-bit color-coded classes
    root/sparse/<id>.png        16-bit depth, meters * 256, 0 = missing
    root/gt/<id>.png            16-bit depth, same encoding
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from .errors import DataError, FormatError, ShapeError

KITTI_NATIVE = (375, 1275)
KITTI_BOTTOM_CROP = (352, 1252)
KITTI_TRAIN_CROP = (320, 1216)
SPARSE_RATIO = 0.059
JITTER = 0.4
PLANES = ("rgb", "semantic", "sparse", "gt")

# Cityscapes-style palette, RGB 0-255
PALETTE = {
    "road": (128, 64, 128),
    "building": (70, 70, 70),
    "car": (0, 0, 142),
    "truck": (0, 0, 70),
    "vegetation": (107, 142, 35),
    "pole": (153, 153, 153),
    "person": (220, 20, 60),
}
OBJECT_CLASSES = ("car", "truck", "vegetation", "pole", "person", "building")


@dataclass
class SceneSample:
    rgb: np.ndarray  # 3 x H x W in [0, 1]
    semantic: np.ndarray  # 3 x H x W in [0, 1]
    sparse_depth: np.ndarray  # H x W meters, 0 = missing
    gt_depth: np.ndarray  # H x W meters, 0 = missing
    id: str = ""
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.valid_mask is None:
            self.valid_mask = self.gt_depth > 0
        h, w = self.gt_depth.shape
        for name in ("rgb", "semantic"):
            arr = getattr(self, name)
            if arr.shape != (3, h, w):
                raise ShapeError(f"{name} has shape {arr.shape}, expected (3, {h}, {w})")
        for name in ("sparse_depth", "valid_mask"):
            if getattr(self, name).shape != (h, w):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected ({h}, {w})")

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_depth.shape

    def map_geometry(self, fn: Callable[[np.ndarray], np.ndarray]) -> "SceneSample":
        """Apply the same spatial index transform (acting on the last two axes) to every plane."""
        return replace(
            self,
            rgb=np.ascontiguousarray(fn(self.rgb)),
            semantic=np.ascontiguousarray(fn(self.semantic)),
            sparse_depth=np.ascontiguousarray(fn(self.sparse_depth)),
            gt_depth=np.ascontiguousarray(fn(self.gt_depth)),
            valid_mask=np.ascontiguousarray(fn(self.valid_mask)),
        )

    def to_tensors(self) -> dict[str, torch.Tensor]:
        return {
            "rgb": torch.from_numpy(self.rgb.astype(np.float32)),
            "semantic": torch.from_numpy(self.semantic.astype(np.float32)),
            "sparse": torch.from_numpy(self.sparse_depth.astype(np.float32))[None],
            "gt": torch.from_numpy(self.gt_depth.astype(np.float32))[None],
        }


# ---------------------------------------------------------------- PNG codecs


def load_depth_png(path) -> np.ndarray:
    """Decode a KITTI 16-bit depth PNG to meters (value / 256, 0 stays invalid)."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L"):
            raise FormatError(f"{path}: expected a 16-bit single-channel PNG, got mode {im.mode!r}")
        raw = np.array(im, dtype=np.uint16)
    return raw.astype(np.float32) / 256.0


def encode_depth(depth: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(depth, dtype=np.float64) * 256.0), 0, 65535).astype(np.uint16)


def save_depth_png(depth: np.ndarray, path) -> None:
    Image.fromarray(encode_depth(depth)).save(path)


def load_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected an 8-bit RGB PNG, got mode {im.mode!r}")
        arr = np.array(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_rgb_png(img: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(img).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------- geometry


def _crop_fn(top: int, left: int, h: int, w: int):
    return lambda a: a[..., top : top + h, left : left + w]


def bottom_crop(sample: SceneSample, size: tuple[int, int] = KITTI_BOTTOM_CROP) -> SceneSample:
    """Keep the bottom ``size[0]`` rows and a horizontally centred ``size[1]`` columns."""
    H, W = sample.shape
    h, w = size
    if H < h or W < w:
        raise ShapeError(f"sample {H}x{W} is smaller than the {h}x{w} bottom crop")
    return sample.map_geometry(_crop_fn(H - h, (W - w) // 2, h, w))


def hflip(sample: SceneSample) -> SceneSample:
    return sample.map_geometry(lambda a: a[..., ::-1])


def color_jitter(rgb: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    out = rgb * brightness
    gray = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
    out = gray.mean() + contrast * (out - gray.mean())
    gray = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
    out = gray + saturation * (out - gray)
    return np.clip(out, 0.0, 1.0).astype(rgb.dtype)


def augment(
    sample: SceneSample,
    seed,
    crop: tuple[int, int] = KITTI_TRAIN_CROP,
    flip: bool | None = None,
    jitter: float = JITTER,
) -> SceneSample:
    """Random crop + horizontal flip on every plane, color jitter on rgb only.

    ``flip`` forces the flip decision; the random draw still happens so the
    remaining randomness does not depend on it.
    """
    H, W = sample.shape
    h, w = crop
    if H < h or W < w:
        raise ShapeError(f"sample {H}x{W} is smaller than the {h}x{w} training crop")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    drawn_flip = bool(rng.random() < 0.5)
    factors = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3) if jitter > 0 else np.ones(3)

    out = sample.map_geometry(_crop_fn(top, left, h, w))
    if drawn_flip if flip is None else flip:
        out = hflip(out)
    if jitter > 0:
        out = replace(out, rgb=color_jitter(out.rgb, *factors))
    return out


def sample_seed(global_seed: int, sample_id: str, epoch: int = 0) -> np.random.SeedSequence:
    """Per-sample randomness that does not depend on loading order or worker."""
    return np.random.SeedSequence([global_seed, epoch, zlib.crc32(sample_id.encode())])


# ---------------------------------------------------------------- synthetic scenes


def synth_scene(seed: int, h: int, w: int, shadows: bool = True, sparse_ratio: float = SPARSE_RATIO) -> SceneSample:
    """Procedural street-like scene with an analytic dense ground truth.

    A ground plane below the horizon, a far facade above it, and upright
    rectangles standing on the ground at random depths.  The rgb image shades
    by depth and may carry shadow bands that exist in neither the semantic
    image nor the depth.
    """
    if h % 32 or w % 32:
        raise ShapeError(f"synthetic scene size {h}x{w} must be divisible by 32")
    rng = np.random.default_rng(seed)
    focal = 0.8 * w
    cam_height = 1.65
    horizon = int(h * rng.uniform(0.35, 0.5))
    far = rng.uniform(35.0, 50.0)

    rows = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
    below = rows > horizon
    ground = np.where(below, cam_height * focal / np.maximum(rows - horizon, 1e-6), far)
    depth = np.minimum(ground, far)
    labels = np.where(depth < far, 0, 1)  # road / building
    classes = ["road", "building"]

    n_obj = int(rng.integers(3, 8))
    objects = []
    for _ in range(n_obj):
        z = rng.uniform(5.0, 30.0)
        cls = OBJECT_CLASSES[int(rng.integers(len(OBJECT_CLASSES)))]
        height_m = rng.uniform(1.0, 4.0)
        width_m = rng.uniform(0.8, 5.0)
        xc = rng.uniform(0, w)
        objects.append((z, cls, height_m, width_m, xc))
    for z, cls, height_m, width_m, xc in sorted(objects, key=lambda o: -o[0]):
        bottom = min(h, int(round(horizon + cam_height * focal / z)))
        top = max(0, int(round(bottom - height_m * focal / z)))
        half = max(1, int(round(0.5 * width_m * focal / z)))
        left, right = max(0, int(xc) - half), min(w, int(xc) + half)
        if bottom <= top or right <= left:
            continue
        region = (slice(top, bottom), slice(left, right))
        closer = depth[region] > z
        depth[region] = np.where(closer, z, depth[region])
        if cls not in classes:
            classes.append(cls)
        labels[region] = np.where(closer, classes.index(cls), labels[region])

    palette = np.array([PALETTE[c] for c in classes], dtype=np.float64) / 255.0
    semantic = palette[labels].transpose(2, 0, 1)

    tint = rng.uniform(0.7, 1.1, size=len(classes))
    albedo = (palette[labels] * tint[labels][..., None]).transpose(2, 0, 1)
    shade = 0.35 + 0.65 * np.exp(-depth / 60.0)
    texture = 1.0 + 0.08 * rng.standard_normal((1, h, w))
    rgb = albedo * shade[None] * texture
    if shadows:
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(int(rng.integers(1, 4))):
            angle = rng.uniform(-1.0, 1.0)
            offset = rng.uniform(0, w)
            width_px = rng.uniform(0.05, 0.15) * w
            band = np.abs(xx + angle * yy - offset) < width_px
            rgb = np.where(band[None], rgb * rng.uniform(0.3, 0.5), rgb)
    rgb = np.clip(rgb, 0.0, 1.0)

    n_sparse = int(round(sparse_ratio * h * w))
    idx = rng.choice(h * w, size=n_sparse, replace=False)
    sparse = np.zeros(h * w)
    sparse[idx] = depth.reshape(-1)[idx]

    # quantize depths to the 16-bit PNG grid so in-memory and on-disk samples agree
    gt = encode_depth(depth).astype(np.float32) / 256.0
    sparse = encode_depth(sparse.reshape(h, w)).astype(np.float32) / 256.0
    rgb = (np.round(rgb * 255.0) / 255.0).astype(np.float32)
    semantic = (np.round(semantic * 255.0) / 255.0).astype(np.float32)
    return SceneSample(rgb, semantic, sparse, gt, id=f"synth_{seed:06d}")


# ---------------------------------------------------------------- layout + dataset


@dataclass
class DatasetLayout:
    root: Path
    split: str = "train"
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)

    def path(self, plane: str, sample_id: str) -> Path:
        return self.root / plane / f"{sample_id}.png"

    @classmethod
    def open(cls, root, split: str) -> "DatasetLayout":
        root = Path(root)
        split_file = root / f"{split}.txt"
        if not split_file.is_file():
            raise DataError(f"split file {split_file} not found")
        ids = [line.strip() for line in split_file.read_text().splitlines() if line.strip()]
        layout = cls(root, split, ids)
        missing = [str(layout.path(p, i)) for i in ids for p in PLANES if not layout.path(p, i).is_file()]
        if missing:
            raise DataError(f"{len(missing)} files missing from {root}, e.g. {missing[0]}")
        if not ids:
            raise DataError(f"split {split_file} lists no samples")
        return layout

    def load(self, sample_id: str) -> SceneSample:
        return SceneSample(
            rgb=load_rgb_png(self.path("rgb", sample_id)),
            semantic=load_rgb_png(self.path("semantic", sample_id)),
            sparse_depth=load_depth_png(self.path("sparse", sample_id)),
            gt_depth=load_depth_png(self.path("gt", sample_id)),
            id=sample_id,
        )


def write_sample(root, sample: SceneSample) -> None:
    root = Path(root)
    for plane in PLANES:
        (root / plane).mkdir(parents=True, exist_ok=True)
    save_rgb_png(sample.rgb, root / "rgb" / f"{sample.id}.png")
    save_rgb_png(sample.semantic, root / "semantic" / f"{sample.id}.png")
    save_depth_png(sample.sparse_depth, root / "sparse" / f"{sample.id}.png")
    save_depth_png(sample.gt_depth, root / "gt" / f"{sample.id}.png")


def write_synthetic_dataset(root, splits: dict[str, int], h: int, w: int, seed: int = 0) -> dict[str, list[str]]:
    """Materialize synthetic scenes in the on-disk layout; returns ids per split."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = {}
    next_seed = seed * 100_000
    for split, n in splits.items():
        ids = []
        for _ in range(n):
            sample = synth_scene(next_seed, h, w)
            write_sample(root, sample)
            ids.append(sample.id)
            next_seed += 1
        (root / f"{split}.txt").write_text("".join(f"{i}\n" for i in ids))
        out[split] = ids
    return out


class InMemorySource:
    """Same interface as ``DatasetLayout`` (``ids`` + ``load``) over samples already in memory."""

    def __init__(self, samples: Sequence[SceneSample]):
        self._samples = {s.id: s for s in samples}
        if len(self._samples) != len(samples):
            raise DataError("sample ids must be unique")
        self.ids = [s.id for s in samples]

    def load(self, sample_id: str) -> SceneSample:
        return self._samples[sample_id]


class DepthDataset(Dataset):
    """Samples from a ``DatasetLayout`` (or ``InMemorySource``) with the training-time transforms.

    Randomness derives from (seed, epoch, sample id) only, so any worker count
    yields the same tensors.  Without augmentation the crop is bottom-centred.
    """

    def __init__(
        self,
        source: DatasetLayout | InMemorySource,
        crop: tuple[int, int],
        augment: bool = False,
        seed: int = 0,
        kitti_bottom_crop: bool = False,
    ):
        self.source = source
        self.crop = tuple(crop)
        self.augment = augment
        self.seed = seed
        self.kitti_bottom_crop = kitti_bottom_crop
        self.epoch = 0

    def __len__(self):
        return len(self.source.ids)

    def get_sample(self, index: int) -> SceneSample:
        sample = self.source.load(self.source.ids[index])
        if self.kitti_bottom_crop:
            sample = bottom_crop(sample)
        if self.augment:
            return augment(sample, sample_seed(self.seed, sample.id, self.epoch), self.crop)
        return bottom_crop(sample, self.crop)

    def __getitem__(self, index: int) -> dict:
        sample = self.get_sample(index)
        item = sample.to_tensors()
        item["id"] = sample.id
        return item


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    """Deterministic shuffle for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n).tolist()


def collate(items: Sequence[dict]) -> dict:
    batch = {k: torch.stack([it[k] for it in items]) for k in ("rgb", "semantic", "sparse", "gt")}
    batch["id"] = [it["id"] for it in items]
    return batch

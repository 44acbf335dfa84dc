"""Run configuration, presets, the ablation matrix and the flat config-file format.

Config files are plain ``key = value`` lines; ``#`` starts a comment.  Keys are
the ``RunConfig`` field names, values parse as the field's type (tuples are
comma separated, booleans accept on/off, true/false, yes/no, 1/0).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .backbone import FULL_WIDTHS, FUSION_MODES, TINY_WIDTHS
from .errors import ConfigError

DATA_ROOT_ENV = "SEMATTNET_DATA_ROOT"

PRESETS = {
    "tiny": {"widths": TINY_WIDTHS, "crop": (64, 96)},
    "full": {"widths": FULL_WIDTHS, "crop": (320, 1216)},
}
BRANCHES = ("cg_dg", "cg_sg_dg")

# Ablation rows (a)-(g) with their full-scale KITTI validation RMSE (mm) for reference.
ABLATIONS = {
    "a": {"branches": "cg_dg", "fusion": "add", "refinement": False, "reference_rmse_mm": 782.89},
    "b": {"branches": "cg_dg", "fusion": "concat", "refinement": False, "reference_rmse_mm": 781.66},
    "c": {"branches": "cg_dg", "fusion": "concat", "refinement": True, "reference_rmse_mm": 762.84},
    "d": {"branches": "cg_sg_dg", "fusion": "concat", "refinement": False, "reference_rmse_mm": 755.16},
    "e": {"branches": "cg_sg_dg", "fusion": "concat", "refinement": True, "reference_rmse_mm": 750.06},
    "f": {"branches": "cg_sg_dg", "fusion": "sammafb", "refinement": False, "reference_rmse_mm": 753.02},
    "g": {"branches": "cg_sg_dg", "fusion": "sammafb", "refinement": True, "reference_rmse_mm": 738.13},
}

# Fields that change the parameter layout; a checkpoint only loads into a matching config.
ARCH_FIELDS = ("preset", "fusion", "branches", "refinement", "kernel_size", "attention_kernel")


@dataclass
class RunConfig:
    preset: str = "tiny"
    fusion: str = "sammafb"
    branches: str = "cg_sg_dg"
    refinement: bool = True
    kernel_size: int = 3
    dilation_schedule: tuple[int, ...] = (2, 2, 2, 2, 2, 2, 1, 1, 1, 1, 1, 1)
    attention_kernel: int = 7

    optimizer: str = "adam"
    lr: float = 0.00128
    betas: tuple[float, ...] = (0.9, 0.99)
    weight_decay: float = 1e-6
    batch_size: int = 8
    epochs: int = 60
    refine_epochs: int = 95
    refine_warmup_epochs: int = 1
    lambda_init: float = 0.2
    decay_end_epoch: int = 10
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    seed: int = 0
    augment: bool = True
    crop_height: int = 0  # 0 -> preset default
    crop_width: int = 0
    bottom_crop: bool = False
    num_workers: int = 0

    data_root: str = ""
    train_split: str = "train"
    val_split: str = "val"
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.branches not in BRANCHES:
            raise ConfigError(f"branches must be one of {BRANCHES}, got {self.branches!r}")
        if self.optimizer != "adam":
            raise ConfigError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if len(self.betas) != 2:
            raise ConfigError("betas needs exactly two values")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and >= 3, got {self.kernel_size}")
        if self.batch_size < 1 or self.epochs < 0 or self.refine_epochs < 0:
            raise ConfigError("batch_size must be positive and epoch counts nonnegative")
        h, w = self.crop
        if h % 32 or w % 32:
            raise ConfigError(f"crop {h}x{w} must be divisible by 32")

    @property
    def widths(self) -> tuple[int, ...]:
        return PRESETS[self.preset]["widths"]

    @property
    def crop(self) -> tuple[int, int]:
        ph, pw = PRESETS[self.preset]["crop"]
        return (self.crop_height or ph, self.crop_width or pw)

    @property
    def three_branch(self) -> bool:
        return self.branches == "cg_sg_dg"

    def resolved_data_root(self) -> str:
        return os.environ.get(DATA_ROOT_ENV) or self.data_root

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def arch_hash(self) -> str:
        arch = {k: getattr(self, k) for k in ARCH_FIELDS}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "on" if v else "off"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def ablation_config(row: str, **overrides) -> RunConfig:
    if row not in ABLATIONS:
        raise ConfigError(f"unknown ablation row {row!r}; expected one of {sorted(ABLATIONS)}")
    fields = {k: v for k, v in ABLATIONS[row].items() if k != "reference_rmse_mm"}
    return RunConfig(**{**fields, **overrides})


_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


def _parse_value(name: str, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            cast = type(current[0]) if current else float
            return tuple(cast(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from None
    return raw


def parse_overrides(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name for f in dataclasses.fields(base)}
    changes = {}
    for key, raw in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse_value(key, raw, getattr(base, key))
    return base.replace(**changes)


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return parse_overrides(pairs, base)


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return loads(p.read_text())

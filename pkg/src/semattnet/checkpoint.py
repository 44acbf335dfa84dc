"""Checkpoint container.

A checkpoint is a zip archive holding

* ``manifest.json`` - format name/version, architecture hash, resolved config,
  epoch, metric snapshot, optimizer/scheduler hyper-state, and a tensor index
  ``name -> {shape, dtype, offset, nbytes}``;
* ``tensors.bin`` - every tensor's payload as raw little-endian float32,
  concatenated in index order.

Integer buffers (batch-norm counters, optimizer steps) are stored as float32
too and cast back to the dtype recorded in the index.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import FormatError, VersionError

FORMAT = "semattnet-checkpoint"
VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64, "int32": torch.int32}


@dataclass
class Checkpoint:
    manifest: dict
    model_state: dict[str, torch.Tensor]
    optimizer_state: dict | None

    @property
    def epoch(self) -> int:
        return self.manifest["epoch"]

    @property
    def config(self) -> RunConfig:
        cfg = self.manifest["config"]
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
        return RunConfig(**cfg)


def _pack(tensors: dict[str, torch.Tensor]) -> tuple[dict, bytes]:
    index = {}
    buf = io.BytesIO()
    for name, t in tensors.items():
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise FormatError(f"cannot store tensor {name} of dtype {dtype}")
        payload = t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        index[name] = {"shape": list(t.shape), "dtype": dtype, "offset": buf.tell(), "nbytes": len(payload)}
        buf.write(payload)
    return index, buf.getvalue()


def _unpack(index: dict, payload: bytes) -> dict[str, torch.Tensor]:
    out = {}
    for name, entry in index.items():
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        out[name] = torch.from_numpy(arr).to(_DTYPES[entry["dtype"]])
    return out


def save_checkpoint(
    path,
    model: torch.nn.Module,
    cfg: RunConfig,
    epoch: int,
    metrics: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> Path:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    optim_meta = None
    if optimizer is not None:
        state = optimizer.state_dict()
        for pid, pstate in state["state"].items():
            for key, value in pstate.items():
                tensors[f"optim/{pid}/{key}"] = value if isinstance(value, torch.Tensor) else torch.tensor(value)
        optim_meta = {"param_groups": state["param_groups"]}
    index, payload = _pack(tensors)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "arch_hash": cfg.arch_hash(),
        "config": cfg.to_dict(),
        "epoch": epoch,
        "metrics": metrics or {},
        "optimizer": optim_meta,
        "extra": extra or {},
        "tensors": index,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        zf.writestr("tensors.bin", payload)
    tmp.replace(path)
    return path


def load_checkpoint(path, cfg: RunConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``cfg`` given, refuse one built for another architecture."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint {path} not found")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            payload = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError) as exc:
        raise FormatError(f"{path} is not a checkpoint archive: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{path} has format {manifest.get('format')!r}, expected {FORMAT!r}")
    if manifest.get("version") != VERSION:
        raise VersionError(f"{path} has checkpoint version {manifest.get('version')}, expected {VERSION}")
    if cfg is not None and manifest["arch_hash"] != cfg.arch_hash():
        raise VersionError(
            f"{path} was written for architecture {manifest['arch_hash']}, config describes {cfg.arch_hash()}"
        )
    tensors = _unpack(manifest["tensors"], payload)
    model_state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    optimizer_state = None
    if manifest.get("optimizer") is not None:
        state: dict[int, dict] = {}
        for k, v in tensors.items():
            if not k.startswith("optim/"):
                continue
            _, pid, key = k.split("/", 2)
            state.setdefault(int(pid), {})[key] = v
        optimizer_state = {"state": state, "param_groups": manifest["optimizer"]["param_groups"]}
    return Checkpoint(manifest, model_state, optimizer_state)

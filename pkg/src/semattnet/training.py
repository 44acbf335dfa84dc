"""Training and evaluation loops.

Training runs in up to three phases over one global epoch counter:

* ``backbone`` - ``cfg.epochs`` epochs on the weighted branch + fused loss;
* ``warmup``  - ``cfg.refine_warmup_epochs`` epochs training only the affinity
  head on top of the frozen stage-1 backbone;
* ``joint``   - the remaining refinement epochs, everything trainable.

The last two only exist when refinement is enabled.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import DepthDataset, collate, epoch_order
from .errors import EmptyMaskError, NonFiniteLossError, ValidationError
from .losses import LossWeights, masked_l2, metrics, total_loss
from .model import Prediction, SemAttNet

log = logging.getLogger(__name__)

# predictions are clamped to this depth (m) before metrics so inverse errors stay defined
MIN_EVAL_DEPTH = 1e-3


def model_inputs(model: SemAttNet, batch: dict):
    semantic = batch["semantic"] if model.three_branch else None
    return batch["rgb"], batch["sparse"], semantic


def backbone_loss(pred: Prediction, gt: torch.Tensor, weights: LossWeights, epoch: int):
    out = pred.backbone
    parts = {f"l_{name}": masked_l2(d, gt) for name, d in out.depths.items()}
    parts["l_fused"] = masked_l2(out.fused, gt)
    loss = total_loss(parts["l_cg"], parts.get("l_sg"), parts["l_dg"], parts["l_fused"], weights, epoch)
    return loss, parts


@torch.no_grad()
def evaluate(model: SemAttNet, dataset: DepthDataset, batch_size: int = 8, refine_output: bool = True) -> dict:
    """Per-sample KITTI metrics and their mean over the split."""
    model.eval()
    records = []
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, collate_fn=collate)
    for batch in loader:
        pred = model(*model_inputs(model, batch), refine_output=refine_output)
        output = pred.output.clamp(min=MIN_EVAL_DEPTH)
        for i, sample_id in enumerate(batch["id"]):
            records.append({"id": sample_id, **metrics(output[i, 0], batch["gt"][i, 0])})
    keys = ("rmse_mm", "mae_mm", "irmse_per_km", "imae_per_km")
    aggregate = {k: float(np.mean([r[k] for r in records])) for k in keys}
    return {"aggregate": aggregate, "samples": records}


@dataclass
class StepRecord:
    epoch: int
    step: int
    phase: str
    loss: float
    rmse_mm: float


@dataclass
class Trainer:
    cfg: RunConfig
    train_data: DepthDataset
    val_data: DepthDataset | None = None
    out_dir: Path | None = None
    model: SemAttNet | None = None
    history: list[StepRecord] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.model is None:
            torch.manual_seed(self.cfg.seed)
            self.model = SemAttNet.from_config(self.cfg)
        self.weights = LossWeights(
            self.cfg.lambda_init, self.cfg.lambda_init, self.cfg.lambda_init, self.cfg.decay_end_epoch
        )
        self.phases = [("backbone", self.cfg.epochs)]
        if self.cfg.refinement and self.cfg.refine_epochs:
            warm = min(self.cfg.refine_warmup_epochs, self.cfg.refine_epochs)
            self.phases += [("warmup", warm), ("joint", self.cfg.refine_epochs - warm)]
        self.phases = [p for p in self.phases if p[1] > 0]
        self.total_epochs = sum(n for _, n in self.phases)
        self.next_epoch = 0
        self.global_step = 0
        self.phase = None
        self.optimizer = None
        self.scheduler = None
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.cfg.save(self.out_dir / "config.txt")

    # ------------------------------------------------------------ phases

    def phase_at(self, epoch: int) -> tuple[str, int]:
        start = 0
        for name, n in self.phases:
            if epoch < start + n:
                return name, epoch - start
            start += n
        raise IndexError(f"epoch {epoch} is past the end of training ({self.total_epochs} epochs)")

    def _trainable(self, phase: str):
        backbone_trainable = phase != "warmup"
        for p in self.model.backbone.parameters():
            p.requires_grad_(backbone_trainable)
        if phase == "backbone":
            return list(self.model.backbone.parameters())
        if phase == "warmup":
            return list(self.model.affinity_head.parameters())
        return list(self.model.parameters())

    def _enter_phase(self, phase: str) -> None:
        params = self._trainable(phase)
        self.optimizer = torch.optim.Adam(
            params, lr=self.cfg.lr, betas=tuple(self.cfg.betas), weight_decay=self.cfg.weight_decay
        )
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.optimizer, mode="min", factor=self.cfg.plateau_factor, patience=self.cfg.plateau_patience
        )
        self.phase = phase
        log.info("entering phase %s with %d parameter tensors", phase, len(params))

    def _set_mode(self) -> None:
        self.model.train()
        if self.phase == "warmup":
            self.model.backbone.eval()  # frozen: keep normalization statistics fixed too

    # ------------------------------------------------------------ steps

    def _loss(self, pred: Prediction, gt: torch.Tensor, phase_epoch: int):
        if self.phase == "backbone":
            loss, parts = backbone_loss(pred, gt, self.weights, phase_epoch)
            output = pred.backbone.fused
        else:
            loss = masked_l2(pred.refined, gt)
            parts = {"l_refined": loss}
            output = pred.refined
        return loss, parts, output

    def train_step(self, batch: dict, epoch: int, phase_epoch: int) -> StepRecord:
        self._set_mode()
        where = f"at epoch {epoch} step {self.global_step} (phase {self.phase}), samples {batch['id']}"
        try:
            pred = self.model(*model_inputs(self.model, batch), refine_output=self.phase != "backbone")
            loss, parts, output = self._loss(pred, batch["gt"], phase_epoch)
        except EmptyMaskError:
            raise
        except ValidationError as exc:
            # NaN/inf caught by a component's own input check
            raise NonFiniteLossError(f"non-finite values {where}: {exc}") from exc
        if not torch.isfinite(loss):
            detail = {k: float(v) for k, v in parts.items()}
            raise NonFiniteLossError(f"non-finite loss {where}, components {detail}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        with torch.no_grad():
            rmse = math.sqrt(float(masked_l2(output, batch["gt"]))) * 1000.0
        rec = StepRecord(epoch, self.global_step, self.phase, float(loss.detach()), rmse)
        self.history.append(rec)
        self.global_step += 1
        return rec

    def train_epoch(self, epoch: int) -> dict:
        phase, phase_epoch = self.phase_at(epoch)
        if phase != self.phase:
            self._enter_phase(phase)
        self.train_data.epoch = epoch
        loader = DataLoader(
            self.train_data,
            batch_size=self.cfg.batch_size,
            sampler=epoch_order(len(self.train_data), self.cfg.seed, epoch),
            collate_fn=collate,
            num_workers=self.cfg.num_workers,
        )
        records = [self.train_step(batch, epoch, phase_epoch) for batch in loader]
        entry = {
            "epoch": epoch,
            "phase": phase,
            "lr": self.optimizer.param_groups[0]["lr"],
            "train_loss": float(np.mean([r.loss for r in records])),
            "train_rmse_mm": float(np.sqrt(np.mean([r.rmse_mm**2 for r in records]))),
        }
        monitor = entry["train_rmse_mm"]
        if self.val_data is not None:
            report = evaluate(self.model, self.val_data, self.cfg.batch_size)
            entry["val"] = report["aggregate"]
            monitor = entry["val"]["rmse_mm"]
        self.scheduler.step(monitor)
        self.epoch_log.append(entry)
        log.info("epoch %d [%s] loss %.4f rmse %.1f mm", epoch, phase, entry["train_loss"], entry["train_rmse_mm"])
        if self.out_dir is not None:
            with open(self.out_dir / "log.jsonl", "a") as fh:
                fh.write(json.dumps(entry) + "\n")
            self.save(self.out_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt", epoch, entry)
            self.save(self.out_dir / "checkpoints" / "last.ckpt", epoch, entry)
        return entry

    def fit(self, until_epoch: int | None = None) -> list[dict]:
        end = self.total_epochs if until_epoch is None else min(until_epoch, self.total_epochs)
        for epoch in range(self.next_epoch, end):
            self.train_epoch(epoch)
            self.next_epoch = epoch + 1
        return self.epoch_log

    # ------------------------------------------------------------ persistence

    def save(self, path, epoch: int, metrics_snapshot: dict | None = None):
        extra = {
            "phase": self.phase,
            "global_step": self.global_step,
            "scheduler": self.scheduler.state_dict() if self.scheduler is not None else None,
        }
        return save_checkpoint(path, self.model, self.cfg, epoch, metrics_snapshot, self.optimizer, extra)

    def resume(self, path) -> None:
        """Continue after the epoch stored in ``path``; optimizer state carries over within a phase."""
        ckpt = load_checkpoint(path, self.cfg)
        self.model.load_state_dict(ckpt.model_state)
        self.next_epoch = ckpt.epoch + 1
        self.global_step = ckpt.manifest["extra"].get("global_step", 0)
        if self.next_epoch >= self.total_epochs:
            return
        phase, _ = self.phase_at(self.next_epoch)
        saved_phase = ckpt.manifest["extra"].get("phase")
        self._enter_phase(phase)
        if saved_phase == phase and ckpt.optimizer_state is not None:
            self.optimizer.load_state_dict(ckpt.optimizer_state)
            sched = ckpt.manifest["extra"].get("scheduler")
            if sched:
                self.scheduler.load_state_dict(sched)

"""Command-line entry points: ``train``, ``eval``, ``infer``, ``visualize`` and ``synth-data``.

Configuration is layered: defaults, then ``--ablation`` row, then
``--config FILE`` (flat ``key = value`` lines), then ``--set key=value`` and
the per-field flags (``--fusion concat``, ``--refinement off``...).  The
dataset root may be overridden with the ``SEMATTNET_DATA_ROOT`` environment
variable.  Every command writes its resolved config next to its outputs.

Exit status is 0 on success; failures print ``error [<category>]: <message>``
and exit with the category's code (2 validation, 3 data/format, 4 config,
5 version, 6 non-finite loss).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .checkpoint import load_checkpoint
from .config import RunConfig, ablation_config, parse_overrides
from .data import DatasetLayout, DepthDataset, load_depth_png, save_depth_png, write_synthetic_dataset
from .errors import ConfigError, DataError, SemAttNetError
from .losses import metrics
from .model import SemAttNet
from .training import MIN_EVAL_DEPTH, Trainer, evaluate, model_inputs
from .visualize import write_visualizations

log = logging.getLogger("semattnet")

METRIC_KEYS = ("rmse_mm", "mae_mm", "irmse_per_km", "imae_per_km")


# ---------------------------------------------------------------- helpers


def _dataset(cfg: RunConfig, split: str, train: bool = False) -> DepthDataset:
    root = cfg.resolved_data_root()
    if not root:
        raise DataError(f"no dataset root: set data_root or {config_mod.DATA_ROOT_ENV}")
    layout = DatasetLayout.open(root, split)
    return DepthDataset(layout, cfg.crop, augment=train and cfg.augment, seed=cfg.seed, kitti_bottom_crop=cfg.bottom_crop)


def _write_config(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.txt"
    cfg.save(path)
    return path


def load_model(checkpoint, cfg: RunConfig | None = None) -> tuple[SemAttNet, RunConfig]:
    """Model and effective config for a checkpoint.

    Without ``cfg`` the stored config is used.  With one, architecture fields
    must agree with the checkpoint (``VersionError`` otherwise); the rest
    (data paths, batch size...) come from ``cfg``.
    """
    ckpt = load_checkpoint(checkpoint, cfg)
    cfg = cfg or ckpt.config
    model = SemAttNet.from_config(cfg)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, cfg


def _flat_report(aggregate: dict, **fields) -> dict:
    return {**fields, **{k: aggregate[k] for k in METRIC_KEYS}}


def _write_report(report: dict, records: list[dict], out_dir, name: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(report, indent=1) + "\n")
    with open(out_dir / f"{name}_samples.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, resume=None) -> dict:
    out_dir = Path(cfg.out_dir)
    train_data = _dataset(cfg, cfg.train_split, train=True)
    val_data = _dataset(cfg, cfg.val_split) if (Path(cfg.resolved_data_root()) / f"{cfg.val_split}.txt").is_file() else None
    trainer = Trainer(cfg, train_data, val_data, out_dir)
    if resume:
        trainer.resume(resume)
    trainer.fit()
    history = trainer.history
    summary = {
        "epochs": trainer.total_epochs,
        "steps": trainer.global_step,
        "first_step_rmse_mm": history[0].rmse_mm if history else None,
        "last_step_rmse_mm": history[-1].rmse_mm if history else None,
        "checkpoint": str(out_dir / "checkpoints" / "last.ckpt"),
    }
    if trainer.epoch_log:
        summary["final_epoch"] = trainer.epoch_log[-1]
    return summary


def score_predictions(pred_dir, layout: DatasetLayout) -> tuple[dict, list[dict]]:
    """Metrics for depth PNGs named ``<id>.png`` in ``pred_dir`` against a split's ground truth."""
    records = []
    for sample_id in layout.ids:
        path = Path(pred_dir) / f"{sample_id}.png"
        if not path.is_file():
            raise DataError(f"prediction {path} missing")
        pred = load_depth_png(path)
        gt = load_depth_png(layout.path("gt", sample_id))
        if pred.shape != gt.shape:
            raise DataError(f"prediction {path} is {pred.shape}, ground truth is {gt.shape}")
        pred = np.maximum(pred, MIN_EVAL_DEPTH)
        records.append({"id": sample_id, **metrics(pred, gt)})
    aggregate = {k: float(np.mean([r[k] for r in records])) for k in METRIC_KEYS}
    return aggregate, records


def cmd_eval(cfg: RunConfig | None, checkpoint=None, split: str | None = None, predictions=None, out_dir=None) -> dict:
    """Evaluate a checkpoint (or a directory of predicted depth PNGs) on a split."""
    if (checkpoint is None) == (predictions is None):
        raise ConfigError("eval needs exactly one of a checkpoint or a predictions directory")
    if checkpoint is not None:
        model, cfg = load_model(checkpoint, cfg)
        split = split or cfg.val_split
        result = evaluate(model, _dataset(cfg, split), cfg.batch_size)
        aggregate, records = result["aggregate"], result["samples"]
        source = {"checkpoint": str(checkpoint)}
    else:
        cfg = cfg or RunConfig()
        split = split or cfg.val_split
        layout = DatasetLayout.open(cfg.resolved_data_root(), split)
        aggregate, records = score_predictions(predictions, layout)
        source = {"predictions": str(predictions)}
    report = _flat_report(aggregate, split=split, samples=len(records), **source)
    out_dir = out_dir or cfg.out_dir
    _write_config(cfg, out_dir)
    _write_report(report, records, out_dir, f"eval_{split}")
    return report


@torch.no_grad()
def cmd_infer(cfg: RunConfig | None, checkpoint, split: str | None = None, out_dir=None) -> list[Path]:
    """Write the model's depth for every sample of a split as 16-bit PNGs."""
    model, cfg = load_model(checkpoint, cfg)
    split = split or cfg.val_split
    out_dir = Path(out_dir or cfg.out_dir)
    _write_config(cfg, out_dir)
    dataset = _dataset(cfg, split)
    paths = []
    for i in range(len(dataset)):
        item = dataset[i]
        batch = {k: v[None] for k, v in item.items() if k != "id"}
        depth = model(*model_inputs(model, batch)).output[0, 0].clamp(min=0).numpy()
        path = out_dir / "pred" / f"{item['id']}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_depth_png(depth, path)
        paths.append(path)
    return paths


@torch.no_grad()
def cmd_visualize(cfg: RunConfig | None, checkpoint, sample_id: str | None = None, split: str | None = None, out_dir=None) -> list[Path]:
    model, cfg = load_model(checkpoint, cfg)
    split = split or cfg.val_split
    dataset = _dataset(cfg, split)
    ids = dataset.source.ids
    sample_id = sample_id or ids[0]
    if sample_id not in ids:
        raise DataError(f"sample {sample_id!r} is not in split {split!r}")
    item = dataset[ids.index(sample_id)]
    batch = {k: v[None] for k, v in item.items() if k != "id"}
    pred = model(*model_inputs(model, batch))
    out_dir = Path(out_dir or cfg.out_dir) / "vis" / sample_id
    _write_config(cfg, out_dir)
    return write_visualizations(pred, item["gt"], out_dir)


def cmd_synth_data(root, n_train: int, n_val: int, height: int, width: int, seed: int = 0) -> dict:
    splits = {"train": n_train}
    if n_val:
        splits["val"] = n_val
    return write_synthetic_dataset(root, splits, height, width, seed)


# ---------------------------------------------------------------- argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", metavar="FILE", help="flat key = value config file")
    g.add_argument("--ablation", choices=sorted(config_mod.ABLATIONS), help="start from an ablation row")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config field")
    for f in dataclasses.fields(RunConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE", default=None)


def _config_from_args(args, base: RunConfig) -> RunConfig:
    """Apply ablation row, config file, ``--set`` pairs and field flags, in that order."""
    cfg = ablation_config(args.ablation) if args.ablation else base
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file {args.config} does not exist")
        cfg = config_mod.loads(Path(args.config).read_text(), cfg)
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            pairs[f.name] = v
    return parse_overrides(pairs, cfg)


def _for_checkpoint(args) -> RunConfig:
    """The checkpoint's stored config plus user overrides; the arch hash check rejects layout changes."""
    return _config_from_args(args, load_checkpoint(args.checkpoint).config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semattnet", description="Semantic-guided depth completion")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train backbone, then refinement")
    _add_config_flags(p)
    p.add_argument("--resume", metavar="CKPT")

    p = sub.add_parser("eval", help="metrics over a split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--predictions", metavar="DIR", help="score depth PNGs instead of a checkpoint")
    p.add_argument("--split")
    p.add_argument("--output", metavar="DIR", help="report directory (default: out_dir)")

    p = sub.add_parser("infer", help="write predicted depth PNGs")
    _add_config_flags(p)
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--split")
    p.add_argument("--output", metavar="DIR")

    p = sub.add_parser("visualize", help="depth, confidence and error images for one sample")
    _add_config_flags(p)
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--sample")
    p.add_argument("--split")
    p.add_argument("--output", metavar="DIR")

    p = sub.add_parser("synth-data", help="materialize a synthetic dataset")
    p.add_argument("--root", required=True)
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--val", type=int, default=4)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    return parser


def run(argv=None) -> dict | list:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "synth-data":
        ids = cmd_synth_data(args.root, args.train, args.val, args.height, args.width, args.seed)
        return {split: len(v) for split, v in ids.items()}
    if args.command == "train":
        cfg = _config_from_args(args, RunConfig())
        return cmd_train(cfg, args.resume)
    if args.command == "eval":
        if args.checkpoint:
            return cmd_eval(_for_checkpoint(args), checkpoint=args.checkpoint, split=args.split, out_dir=args.output)
        cfg = _config_from_args(args, RunConfig())
        return cmd_eval(cfg, predictions=args.predictions, split=args.split, out_dir=args.output)
    if args.command == "infer":
        paths = cmd_infer(_for_checkpoint(args), args.checkpoint, args.split, args.output)
        return {"written": len(paths), "dir": str(paths[0].parent) if paths else None}
    if args.command == "visualize":
        paths = cmd_visualize(_for_checkpoint(args), args.checkpoint, args.sample, args.split, args.output)
        return {"written": [str(p) for p in paths]}
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    try:
        result = run(argv)
    except SemAttNetError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())

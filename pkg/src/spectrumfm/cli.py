"""Command-line workflow: generate, pretrain, finetune, eval, report.

Run layout under ``out_dir``::

    data/pretrain.*  data/<task>_{train,val,test}.*
    pretrain/checkpoint.safetensors  pretrain/loss_curve.csv
    finetune/<task>/                 adapters, head, meta.json
    eval/<task>/                     roc.csv, acc_by_snr.csv, prf.csv, confusion.csv, summary.json
    report/                          merged summary.json and summary.csv

Each command writes into a staging directory and swaps it into place only on
success, so an interrupted run never damages earlier outputs.  Every command
leaves a ``run_record.json`` next to its outputs.

Exit codes: 0 success, 1 runtime failure, 2 config error, 3 data error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, load_config
from .dataset import build_split, model_inputs, read_dataset, write_dataset
from .errors import ConfigError, DataError, SpectrumFMError
from .metrics import write_report
from .pretrain import (
    PretrainModel,
    run_pretraining,
    save_pretrained,
    load_pretrained,
    split_train_val,
    write_loss_curve,
)
from .tasks import FineTuneConfig, TaskHeadConfig, evaluate_model, finetune, load_finetuned, save_finetuned

log = logging.getLogger("spectrumfm")


@dataclasses.dataclass
class RunRecord:
    command: str
    config_fingerprint: str
    tool_version: str
    seed: int
    started: str
    finished: str = ""
    artifacts: list[str] = dataclasses.field(default_factory=list)
    metrics: dict = dataclasses.field(default_factory=dict)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


@contextlib.contextmanager
def _staged(target: Path):
    """Yield a scratch directory that replaces ``target`` only if the block succeeds."""
    target.parent.mkdir(parents=True, exist_ok=True)
    stage = target.with_name(f".{target.name}.partial-{os.getpid()}")
    shutil.rmtree(stage, ignore_errors=True)
    stage.mkdir()
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    old = target.with_name(f".{target.name}.old-{os.getpid()}")
    if target.exists():
        os.replace(target, old)
    os.replace(stage, target)
    shutil.rmtree(old, ignore_errors=True)


class Run:
    """Resolved paths of one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        t = cfg.task.value.lower()
        p = cfg.paths
        self.data_dir = self.root / "data"
        self.pretrain_data = Path(p.pretrain_data) if p.pretrain_data else self.data_dir / "pretrain"
        self.train_data = Path(p.train_data) if p.train_data else self.data_dir / f"{t}_train"
        self.val_data = Path(p.val_data) if p.val_data else self.data_dir / f"{t}_val"
        self.test_data = Path(p.test_data) if p.test_data else self.data_dir / f"{t}_test"
        self.pretrain_dir = self.root / "pretrain"
        self.checkpoint = Path(p.checkpoint) if p.checkpoint else self.pretrain_dir / "checkpoint.safetensors"
        self.artifact = Path(p.artifact) if p.artifact else self.root / "finetune" / t
        self.eval_dir = self.root / "eval" / t
        self.report_dir = self.root / "report"

    def record(self, command: str) -> RunRecord:
        return RunRecord(command, self.cfg.fingerprint(), __version__, self.cfg.seed, _now())


def _finish(record: RunRecord, out_dir: Path, artifacts, metrics=None) -> None:
    record.artifacts = [str(a) for a in artifacts]
    record.metrics = metrics or {}
    record.finished = _now()
    _write_json(out_dir / "run_record.json", dataclasses.asdict(record))


def _require(path: Path, what: str) -> None:
    probe = path if path.suffix else path.with_name(path.name + ".manifest.json")
    if not (path.exists() or probe.exists()):
        raise DataError(f"missing {what}: {path} (run the earlier command first)")


def cmd_generate(run: Run) -> None:
    cfg = run.cfg
    rec = run.record("generate")
    run.data_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for split, stem in (("pretrain", run.pretrain_data), ("train", run.train_data),
                        ("val", run.val_data), ("test", run.test_data)):
        manifest, frames = build_split(cfg.task, split, cfg.data, cfg.seed)
        write_dataset(stem, manifest, frames)
        written.append(stem)
        log.info("wrote %s (%d frames)", stem, manifest.num_frames)
    _finish(rec, run.data_dir, written)


def cmd_pretrain(run: Run) -> None:
    cfg = run.cfg
    _require(run.pretrain_data, "pre-training dataset")
    rec = run.record("pretrain")
    _, frames = read_dataset(run.pretrain_data)
    x, _, _ = model_inputs(frames)
    pcfg = dataclasses.replace(cfg.pretrain, seed=cfg.seed)
    train_x, val_x = split_train_val(x, pcfg.val_fraction, cfg.seed)
    torch.manual_seed(cfg.seed)
    model = PretrainModel(cfg.encoder, d_dec=pcfg.d_dec)
    result = run_pretraining(model, train_x, val_x, pcfg)
    best = [r for r in result.curve if r.split == "val"][result.best_round]
    with _staged(run.pretrain_dir) as stage:
        save_pretrained(stage / run.checkpoint.name, model, pcfg)
        write_loss_curve(stage / "loss_curve.csv", result.curve)
        metrics = {
            "best_round": result.best_round, "stopped_early": result.stopped_early,
            "val_recon": best.recon, "val_pred": best.pred, "val_total": best.total,
            "initial_val_total": result.curve[0].total,
        }
        _finish(rec, stage, [run.pretrain_dir / run.checkpoint.name, run.pretrain_dir / "loss_curve.csv"], metrics)


def cmd_finetune(run: Run) -> None:
    cfg = run.cfg
    for path, what in ((run.checkpoint, "pre-trained checkpoint"), (run.train_data, "training dataset"),
                       (run.val_data, "validation dataset")):
        _require(path, what)
    rec = run.record("finetune")
    encoder = load_pretrained(run.checkpoint).encoder
    tr_manifest, tr_frames = read_dataset(run.train_data)
    va_manifest, va_frames = read_dataset(run.val_data)
    for m, stem in ((tr_manifest, run.train_data), (va_manifest, run.val_data)):
        if m.task is not cfg.task:
            raise DataError(f"{stem} holds {m.task.value} data, config task is {cfg.task.value}")
    class_names = tr_manifest.class_names
    k = len(class_names) if cfg.task.value == "WTC" else None
    head_cfg = TaskHeadConfig.for_task(cfg.task, k, gru_hidden=cfg.head.gru_hidden)
    ft_cfg = FineTuneConfig(**dataclasses.asdict(cfg.finetune), lora=cfg.lora, seed=cfg.seed)
    xtr, ytr, _ = model_inputs(tr_frames)
    xva, yva, _ = model_inputs(va_frames)
    result = finetune(encoder, head_cfg, (xtr, ytr), (xva, yva), ft_cfg)
    with _staged(run.artifact) as stage:
        save_finetuned(stage, result.model, run.checkpoint, class_names, ft_cfg)
        last = result.history[-1] if result.history else {}
        metrics = {"steps": result.steps, "trainable_fraction": result.trainable_fraction,
                   "threshold": result.model.threshold, **{f"last_{k}": v for k, v in last.items()}}
        _finish(rec, stage, [run.artifact], metrics)


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    _require(run.artifact / "meta.json", "fine-tuned artifact")
    _require(run.test_data, "test dataset")
    rec = run.record("eval")
    model, meta = load_finetuned(run.artifact)
    if meta["task"] != cfg.task.value:
        raise DataError(f"artifact {run.artifact} is for {meta['task']}, config task is {cfg.task.value}")
    manifest, frames = read_dataset(run.test_data)
    x, y, snr = model_inputs(frames)
    report = evaluate_model(model, x, y, snr, meta["class_names"],
                            metadata={"config_fingerprint": cfg.fingerprint(), "seed": cfg.seed})
    with _staged(run.eval_dir) as stage:
        written = write_report(report, stage)
        _finish(rec, stage, [run.eval_dir / p.name for p in written], report.summary())


def cmd_report(run: Run, run_dirs: list[Path]) -> None:
    rec = run.record("report")
    rows, merged = [], {}
    for d in run_dirs or [run.root]:
        summaries = sorted(Path(d).glob("eval/*/summary.json"))
        if not summaries:
            raise DataError(f"no evaluation summaries under {d}")
        for s in summaries:
            summary = json.loads(s.read_text())
            key = f"{d}:{summary['task']}"
            merged[key] = summary
            rows.append([str(d), summary["task"]] + [
                "" if summary.get(m) is None else repr(summary[m])
                for m in ("accuracy", "precision", "recall", "f1", "auc", "pd", "pfa")
            ])
    with _staged(run.report_dir) as stage:
        with open(stage / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "task", "accuracy", "precision", "recall", "f1", "auc", "pd", "pfa"])
            w.writerows(rows)
        _write_json(stage / "summary.json", merged)
        _finish(rec, stage, [run.report_dir / "summary.csv", run.report_dir / "summary.json"])


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    if args.task is not None:
        changes["task"] = args.task.upper()
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON run config")
    common.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    common.add_argument("--out", type=Path, help="run directory (overrides out_dir)")
    common.add_argument("--task", choices=("ss", "ad", "wtc"), help="downstream task")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="spectrumfm", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("generate", "synthesize datasets"), ("pretrain", "self-supervised pre-training"),
                        ("finetune", "LoRA fine-tuning for the task"), ("eval", "evaluate on the test split")):
        sub.add_parser(name, parents=[common], help=help_)
    rep = sub.add_parser("report", parents=[common], help="merge evaluation summaries")
    rep.add_argument("run_dirs", nargs="*", type=Path, help="run directories (default: --out)")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        run = Run(cfg)
        if args.command == "report":
            cmd_report(run, args.run_dirs)
        else:
            {"generate": cmd_generate, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
             "eval": cmd_eval}[args.command](run)
    except SpectrumFMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except Exception as exc:                              # noqa: BLE001  last-resort mapping to exit 1
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

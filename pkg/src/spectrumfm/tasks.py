"""Task heads, LoRA fine-tuning and inference for SS, AD and WTC."""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import metrics
from .checkpoint import file_digest, load_archive, load_into, save_archive
from .encoder import Dense, SpectrumEncoder
from .errors import ConfigError, DataError, ShapeError, TrainingDivergedError
from .lora import LoRAConfig, attach_adapters, load_adapters, save_adapters, trainable_fraction
from .pretrain import load_pretrained
from .signals import IQFrame, LabeledFrame, Task, preprocess

log = logging.getLogger(__name__)

HEAD_FORMAT = "spectrumfm-head"


@dataclass
class TaskHeadConfig:
    task: Task
    num_classes: int = 2
    gru_hidden: int = 128

    def __post_init__(self):
        self.task = Task(self.task)
        if self.task is Task.SS and self.num_classes != 2:
            raise ConfigError("SS heads have exactly 2 classes")
        if self.task is Task.AD and self.num_classes != 1:
            raise ConfigError("AD heads emit a single anomaly score (num_classes = 1)")
        if self.task is Task.WTC and self.num_classes < 2:
            raise ConfigError("WTC heads need at least 2 classes")
        if self.gru_hidden < 1:
            raise ConfigError("gru_hidden must be >= 1")

    @classmethod
    def for_task(cls, task, num_classes: int | None = None, gru_hidden: int = 128) -> "TaskHeadConfig":
        task = Task(task)
        if num_classes is None:
            num_classes = {Task.SS: 2, Task.AD: 1}.get(task)
            if num_classes is None:
                raise ConfigError("WTC needs an explicit class count")
        return cls(task, num_classes, gru_hidden)


@dataclass
class FineTuneConfig:
    lr: float = 1e-3
    #: Head learning rate; ``None`` uses ``lr``.
    head_lr: float | None = None
    batch_size: int = 256
    epochs: int = 10
    weight_decay: float = 0.01
    early_stop_patience: int = 3
    max_steps: int | None = None
    target_pfa: float = 0.05
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    seed: int = 0
    #: Standardize head inputs with training-split statistics (see ``fit_input_scaling``).
    scale_head_input: bool = True

    def __post_init__(self):
        if isinstance(self.lora, dict):
            self.lora = LoRAConfig.from_dict(self.lora)
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("fine-tune lr must be >= 0; batch_size, epochs, patience >= 1")
        if self.head_lr is not None and self.head_lr < 0:
            raise ConfigError("head_lr must be >= 0 when given")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1 when given")
        if not 0.0 <= self.target_pfa <= 1.0:
            raise ConfigError("target_pfa must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "FineTuneConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown finetune config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Prediction:
    label: int
    class_probs: np.ndarray | None = None
    anomaly_score: float | None = None
    threshold: float | None = None


class _ScaledInput(nn.Module):
    """Fixed per-feature affine map ``(v - center) / scale`` on the head input.

    It is identity by default.  :func:`fit_input_scaling` sets it from training
    data before fine-tuning.  Because it folds into the first linear map, the
    head's function class does not change.  What it changes is conditioning:
    encoder features carry a large common offset, and without rescaling Adam
    barely moves the head.
    """

    def __init__(self, d: int):
        super().__init__()
        self.register_buffer("center", torch.zeros(d))
        self.register_buffer("scale", torch.ones(d))

    def scaled(self, v: Tensor) -> Tensor:
        return (v - self.center) / self.scale

    def scaling_samples(self, h: Tensor) -> Tensor:
        """Rows whose per-feature statistics define the scaling."""
        raise NotImplementedError


class GRUHead(_ScaledInput):
    """Single-layer GRU over positions; its final state feeds a dense layer."""

    def __init__(self, d: int, hidden: int, num_classes: int):
        super().__init__(d)
        self.gru = nn.GRU(d, hidden, batch_first=True)
        self.out = Dense(hidden, num_classes)

    def scaling_samples(self, h: Tensor) -> Tensor:
        return h.reshape(-1, h.shape[-1])

    def aggregate(self, h: Tensor) -> Tensor:
        _, last = self.gru(self.scaled(h))
        return last[0]

    def forward(self, h: Tensor) -> Tensor:
        return self.out(self.aggregate(h))


class PoolHead(_ScaledInput):
    """Mean over positions, then a dense layer to one logit."""

    def __init__(self, d: int):
        super().__init__(d)
        self.out = Dense(d, 1)

    def scaling_samples(self, h: Tensor) -> Tensor:
        return h.mean(dim=1)

    def forward(self, h: Tensor) -> Tensor:
        return self.out(self.scaled(h.mean(dim=1)))[:, 0]


def build_head(d: int, cfg: TaskHeadConfig) -> nn.Module:
    if cfg.task is Task.AD:
        return PoolHead(d)
    return GRUHead(d, cfg.gru_hidden, cfg.num_classes)


class TaskModel(nn.Module):
    def __init__(self, encoder: SpectrumEncoder, head_cfg: TaskHeadConfig):
        super().__init__()
        self.encoder = encoder
        self.head_cfg = head_cfg
        self.head = build_head(encoder.cfg.d, head_cfg)
        self.threshold: float | None = None

    @property
    def task(self) -> Task:
        return self.head_cfg.task

    def forward(self, x: Tensor) -> Tensor:
        """Logits: ``(B, K)`` for SS/WTC, ``(B,)`` for AD."""
        return self.head(self.encoder(x))

    def probabilities(self, logits: Tensor) -> Tensor:
        return torch.sigmoid(logits) if self.task is Task.AD else torch.softmax(logits, dim=-1)


@torch.no_grad()
def fit_input_scaling(model: TaskModel, x: np.ndarray, batch_size: int = 256, eps: float = 1e-6) -> None:
    """Set the head's input scaling to the mean and std of encoder features on ``x``."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    rows = [model.head.scaling_samples(model.encoder(torch.as_tensor(x[s:s + batch_size], dtype=dtype)))
            for s in range(0, len(x), batch_size)]
    model.train(was_training)
    rows = torch.cat(rows)
    model.head.center.copy_(rows.mean(dim=0))
    model.head.scale.copy_(rows.std(dim=0, unbiased=False) + eps)


def scores_of(task: Task, probs: np.ndarray) -> np.ndarray:
    """Binary detection score: P(occupied) for SS, the anomaly score for AD."""
    return probs[:, 1] if Task(task) is Task.SS else probs


def decide(task: Task, probs: np.ndarray, threshold: float | None) -> np.ndarray:
    task = Task(task)
    if task is Task.WTC:
        return probs.argmax(axis=1)
    t = 0.5 if threshold is None else threshold
    return (scores_of(task, probs) >= t).astype(np.int64)


def _to_predictions(task: Task, probs: np.ndarray, threshold: float | None) -> list[Prediction]:
    labels = decide(task, probs, threshold)
    if Task(task) is Task.AD:
        return [Prediction(int(y), anomaly_score=float(s), threshold=threshold) for y, s in zip(labels, probs)]
    return [Prediction(int(y), class_probs=p, threshold=threshold) for y, p in zip(labels, probs)]


def head_forward(hidden: Tensor, cfg: TaskHeadConfig, head: nn.Module,
                 threshold: float | None = None) -> list[Prediction]:
    """Apply a task head to encoder output ``(B, N, d)`` (or one ``(N, d)`` sequence)."""
    if hidden.dim() == 2:
        hidden = hidden.unsqueeze(0)
    if hidden.dim() != 3:
        raise ShapeError(f"expected hidden states (B, N, d), got {tuple(hidden.shape)}")
    with torch.no_grad():
        logits = head(hidden)
    if cfg.task is Task.AD:
        probs = torch.sigmoid(logits)
    else:
        if logits.shape[-1] != cfg.num_classes:
            raise ShapeError(f"head emits {logits.shape[-1]} classes, config says {cfg.num_classes}")
        probs = torch.softmax(logits, dim=-1)
    return _to_predictions(cfg.task, probs.double().numpy(), threshold)


def predict_probs(model: TaskModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities (or AD scores) for normalized frames ``(B, 2, N)``."""
    N = model.encoder.cfg.N
    if x.ndim != 3 or x.shape[1] != 2 or x.shape[2] != N:
        raise ShapeError(f"expected frames of shape (B, 2, {N}), got {x.shape}")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        with torch.no_grad():
            for s in range(0, len(x), batch_size):
                xb = torch.as_tensor(x[s:s + batch_size], dtype=dtype)
                out.append(model.probabilities(model(xb)).double().numpy())
    finally:
        model.train(was_training)
    if not out:
        shape = (0,) if model.task is Task.AD else (0, model.head_cfg.num_classes)
        return np.zeros(shape)
    return np.concatenate(out)


def _as_iq(frames) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        return frames
    arrs = []
    for f in frames:
        f = f.frame if isinstance(f, LabeledFrame) else f
        if not isinstance(f, IQFrame):
            raise ShapeError("predict expects IQ frames")
        arrs.append(f.as_array())
    lengths = {a.shape[1] for a in arrs}
    if len(lengths) > 1:
        raise ShapeError(f"frames have mixed lengths {sorted(lengths)}")
    return np.stack(arrs) if arrs else np.zeros((0, 2, 0), np.float32)


def predict(model: TaskModel, frames, batch_size: int = 256) -> list[Prediction]:
    """Predictions for raw IQ frames, in input order."""
    iq = _as_iq(frames)
    N = model.encoder.cfg.N
    if len(iq) and iq.shape[-1] != N:
        raise ShapeError(f"frame length {iq.shape[-1]} differs from model N={N}")
    if len(iq) == 0:
        return []
    probs = predict_probs(model, preprocess(iq), batch_size)
    return _to_predictions(model.task, probs, model.threshold)


def check_labels(task: Task, labels: np.ndarray, num_classes: int) -> None:
    k = 2 if Task(task) in (Task.SS, Task.AD) else num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels outside 0..{k - 1} for task {Task(task).value}")


@dataclass
class FineTuneResult:
    model: TaskModel
    history: list[dict] = field(default_factory=list)
    steps: int = 0
    trainable_fraction: float = 0.0


def _loss(model: TaskModel, logits: Tensor, y: Tensor) -> Tensor:
    if model.task is Task.AD:
        return F.binary_cross_entropy_with_logits(logits, y.to(logits.dtype))
    return F.cross_entropy(logits, y)


def _validate(model: TaskModel, x: np.ndarray, y: np.ndarray, batch_size: int) -> tuple[float, float]:
    probs = predict_probs(model, x, batch_size)
    if model.task is Task.AD:
        p = np.clip(probs, 1e-12, 1 - 1e-12)
        loss = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    else:
        loss = float(-np.mean(np.log(np.clip(probs[np.arange(len(y)), y], 1e-12, None))))
    acc = float((decide(model.task, probs, None) == y).mean())
    return loss, acc


def finetune(
    encoder: SpectrumEncoder,
    head_cfg: TaskHeadConfig,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    cfg: FineTuneConfig,
) -> FineTuneResult:
    """Attach adapters to a copy of ``encoder`` and train them with a fresh head.

    ``train``/``val`` are ``(normalized frames, labels)``.  The best
    validation-loss state is kept; SS/AD models get a decision threshold
    calibrated on the validation split at ``cfg.target_pfa``.
    """
    xtr, ytr = train
    xva, yva = val
    if len(xtr) == 0 or len(xva) == 0:
        raise DataError("fine-tuning needs nonempty train and validation splits")
    check_labels(head_cfg.task, ytr, head_cfg.num_classes)
    check_labels(head_cfg.task, yva, head_cfg.num_classes)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = TaskModel(copy.deepcopy(encoder), head_cfg)
    dtype = next(encoder.parameters()).dtype
    model.to(dtype)
    if cfg.scale_head_input:
        fit_input_scaling(model, xtr, cfg.batch_size)
    attach_adapters(model, cfg.lora, trainable=("head",), inplace=True)
    head_params = [p for p in model.head.parameters() if p.requires_grad]
    head_ids = {id(p) for p in head_params}
    adapter_params = [p for p in model.parameters() if p.requires_grad and id(p) not in head_ids]
    head_lr = cfg.lr if cfg.head_lr is None else cfg.head_lr
    opt = torch.optim.AdamW(
        [{"params": adapter_params}, {"params": head_params, "lr": head_lr}],
        lr=cfg.lr, weight_decay=cfg.weight_decay,
    )
    result = FineTuneResult(model=model, trainable_fraction=trainable_fraction(model))

    best_loss, _ = _validate(model, xva, yva, cfg.batch_size)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    done = False
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(xtr))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb = torch.as_tensor(xtr[idx], dtype=dtype)
            yb = torch.as_tensor(ytr[idx])
            loss = _loss(model, model(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite fine-tune loss at epoch {epoch}, step {result.steps}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            result.steps += 1
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                done = True
                break
        val_loss, val_acc = _validate(model, xva, yva, cfg.batch_size)
        result.history.append({"epoch": epoch, "step": result.steps, "val_loss": val_loss, "val_acc": val_acc})
        log.info("finetune epoch %d val loss %.4f acc %.4f", epoch, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, stale = val_loss, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
        if done or stale >= cfg.early_stop_patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    if head_cfg.task in (Task.SS, Task.AD):
        probs = predict_probs(model, xva, cfg.batch_size)
        model.threshold = metrics.calibrate_threshold(scores_of(head_cfg.task, probs), yva, cfg.target_pfa)
    return result


def evaluate_model(model: TaskModel, x: np.ndarray, labels: np.ndarray, snr_db: np.ndarray,
                   class_names: Sequence[str], metadata: dict | None = None) -> metrics.EvalReport:
    probs = predict_probs(model, x)
    pred = decide(model.task, probs, model.threshold)
    scores = None if model.task is Task.WTC else scores_of(model.task, probs)
    return metrics.build_report(
        model.task.value, class_names, labels, pred, snr_db, scores=scores,
        threshold=model.threshold, metadata=metadata,
    )


# -- artifacts ---------------------------------------------------------------

def save_finetuned(out_dir, model: TaskModel, base_checkpoint, class_names: Sequence[str],
                   cfg: FineTuneConfig) -> Path:
    """Write ``adapters.safetensors``, ``head.safetensors`` and ``meta.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_adapters(out / "adapters.safetensors", model, cfg.lora)
    save_archive(out / "head.safetensors", model.head.state_dict(), HEAD_FORMAT,
                 config=asdict(model.head_cfg) | {"task": model.task.value})
    base = Path(base_checkpoint).resolve()
    meta = {
        "task": model.task.value,
        "class_names": list(class_names),
        "threshold": model.threshold,
        "head": asdict(model.head_cfg) | {"task": model.task.value},
        "finetune": asdict(cfg),
        "base_checkpoint": str(base),
        "base_sha256": file_digest(base),
    }
    tmp = out / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, out / "meta.json")
    return out


def load_finetuned(art_dir) -> tuple[TaskModel, dict]:
    art = Path(art_dir)
    meta = json.loads((art / "meta.json").read_text())
    base = Path(meta["base_checkpoint"])
    if not base.exists():
        raise DataError(f"base checkpoint {base} is missing")
    if file_digest(base) != meta["base_sha256"]:
        raise DataError(f"base checkpoint {base} changed since fine-tuning")
    encoder = load_pretrained(base).encoder
    model = TaskModel(encoder, TaskHeadConfig(**meta["head"]))
    load_adapters(art / "adapters.safetensors", model)
    tensors, _ = load_archive(art / "head.safetensors", HEAD_FORMAT)
    load_into(model.head, tensors)
    model.threshold = meta["threshold"]
    model.eval()
    return model, meta

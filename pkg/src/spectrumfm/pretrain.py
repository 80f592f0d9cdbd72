"""Self-supervised pre-training: masked reconstruction plus next-slot prediction."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import load_archive, load_into, save_archive
from .encoder import Dense, EncoderConfig, SpectrumEncoder
from .errors import ConfigError, ShapeError, TrainingDivergedError, UndefinedLossError
from .signals import NormalizedFrame

log = logging.getLogger(__name__)

PRETRAIN_FORMAT = "spectrumfm-pretrain"


@dataclass
class PretrainConfig:
    r: float = 0.15
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    early_stop_patience: int = 3
    loss_weights: tuple[float, float] = (1.0, 1.0)
    d_dec: int = 128
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.loss_weights = tuple(self.loss_weights)
        if not 0.0 < self.r < 1.0:
            raise ConfigError(f"mask ratio r must lie in (0, 1), got {self.r}")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr must be >= 0, batch_size and epochs >= 1")
        if self.early_stop_patience < 1 or self.d_dec < 1:
            raise ConfigError("early_stop_patience and d_dec must be >= 1")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0:
            raise ConfigError("loss_weights must be two nonnegative numbers")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class MaskVector:
    """``m[p] == 1`` keeps position ``p``; ``m[p] == 0`` masks it."""

    m: np.ndarray
    r: float

    @property
    def num_masked(self) -> int:
        return int(self.m.size - self.m.sum())


@dataclass
class PretrainLossRecord:
    step: int
    recon: float
    pred: float
    total: float
    split: str = "train"


def _check_ratio(r: float) -> None:
    if not 0.0 < r < 1.0:
        raise ConfigError(f"mask ratio r must lie in (0, 1), got {r}")


def sample_masks(batch: int, N: int, r: float, rng: np.random.Generator) -> np.ndarray:
    """``(batch, N)`` int8 masks; each position is masked independently with probability ``r``.

    A row that masks nothing is redrawn once.  If the redraw also masks
    nothing the row is returned as-is and the frame drops out of the
    reconstruction loss.
    """
    _check_ratio(r)
    m = (rng.random((batch, N)) >= r).astype(np.int8)
    empty = np.flatnonzero(m.sum(axis=1) == N)
    if empty.size:
        m[empty] = (rng.random((empty.size, N)) >= r).astype(np.int8)
    return m


def sample_mask(N: int, r: float, seed: int) -> MaskVector:
    return MaskVector(m=sample_masks(1, N, r, np.random.default_rng(seed))[0], r=r)


def apply_mask(x: NormalizedFrame, m: MaskVector) -> NormalizedFrame:
    if m.m.shape != (x.N,):
        raise ShapeError(f"mask length {m.m.shape} does not match frame length {x.N}")
    return NormalizedFrame(channels=x.channels * m.m[None, :], degenerate=x.degenerate)


def masked_recon_loss(pred: Tensor, target: Tensor, m: Tensor) -> tuple[Tensor, int]:
    """Batch mean of the per-frame masked reconstruction error.

    For each frame the squared Euclidean error between predicted and true
    (amplitude, phase) pairs is averaged over masked positions.  Frames
    without masked positions are skipped; the count of frames used is
    returned alongside the loss.
    """
    weight = (1 - m).to(pred.dtype)                       # (B, N), 1 where masked
    per_pos = ((pred - target) ** 2).sum(dim=1)           # (B, N)
    counts = weight.sum(dim=1)
    valid = counts > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise UndefinedLossError("no masked positions in batch")
    per_frame = (per_pos * weight).sum(dim=1)[valid] / counts[valid]
    return per_frame.mean(), n_valid


def recon_loss(pred, target: NormalizedFrame, m: MaskVector) -> float:
    """Masked-position reconstruction loss of a single ``2 x N`` prediction."""
    if m.num_masked == 0:
        raise UndefinedLossError("reconstruction loss is undefined without masked positions")
    p = torch.as_tensor(np.asarray(pred, dtype=np.float64))[None]
    t = torch.as_tensor(np.asarray(target.channels, dtype=np.float64))[None]
    loss, _ = masked_recon_loss(p, t, torch.as_tensor(m.m)[None])
    return float(loss)


class ReconDecoder(nn.Module):
    """Two dense layers with GELU between them: ``(B, n, d) -> (B, 2, n)``."""

    def __init__(self, d: int, d_dec: int = 128):
        super().__init__()
        self.fc1 = Dense(d, d_dec)
        self.fc2 = Dense(d_dec, 2)

    def forward(self, h: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(h))).transpose(1, 2)


def next_slot_loss(hidden: Tensor, target: Tensor, head: nn.Module) -> Tensor:
    """Squared error of predicting the last point from the final hidden state.

    ``hidden`` covers the first ``N - 1`` positions ``(B, N-1, d)``; ``target``
    is the true ``(B, 2)`` value at position ``N``.  Returns the batch mean.
    """
    if hidden.shape[1] < 1:
        raise ConfigError("next-slot prediction needs N >= 2")
    pred = head(hidden[:, -1])
    return ((pred - target) ** 2).sum(dim=-1).mean()


class PretrainModel(nn.Module):
    def __init__(self, cfg: EncoderConfig, d_dec: int = 128):
        super().__init__()
        self.encoder = SpectrumEncoder(cfg)
        self.decoder = ReconDecoder(cfg.d, d_dec)
        self.next_slot = Dense(cfg.d, 2)

    def losses(self, x: Tensor, m: Tensor) -> tuple[Tensor | None, Tensor]:
        """``(recon, pred)`` for normalized frames ``x`` (B, 2, N) and masks ``m`` (B, N).

        ``recon`` is None when no frame in the batch has a masked position.
        """
        if x.shape[-1] < 2:
            raise ConfigError("next-slot prediction needs N >= 2")
        masked = x * m[:, None, :].to(x.dtype)
        recon_pred = self.decoder(self.encoder(masked))
        try:
            recon, _ = masked_recon_loss(recon_pred, x, m)
        except UndefinedLossError:
            recon = None
        pred = next_slot_loss(self.encoder(x[..., :-1]), x[..., -1], self.next_slot)
        return recon, pred

    def reconstruct(self, x: Tensor, m: Tensor) -> Tensor:
        return self.decoder(self.encoder(x * m[:, None, :].to(x.dtype)))

    def predict_next(self, x: Tensor) -> Tensor:
        """Predict the last position of each ``(B, 2, N)`` frame from the others."""
        return self.next_slot(self.encoder(x[..., :-1])[:, -1])


def channel_mean_baseline(x: np.ndarray, m: np.ndarray) -> float:
    """Recon loss of predicting each masked value by its channel's visible mean."""
    x = np.asarray(x, dtype=np.float64)
    keep = m[:, None, :].astype(np.float64)
    visible = np.maximum(keep.sum(axis=-1, keepdims=True), 1)
    mean = (x * keep).sum(axis=-1, keepdims=True) / visible
    pred = np.broadcast_to(mean, x.shape).copy()
    loss, _ = masked_recon_loss(torch.as_tensor(pred), torch.as_tensor(x), torch.as_tensor(m))
    return float(loss)


def last_value_baseline(x: np.ndarray) -> float:
    """Next-slot loss of repeating position ``N - 1`` as the prediction for ``N``."""
    x = np.asarray(x, dtype=np.float64)
    return float(((x[..., -1] - x[..., -2]) ** 2).sum(axis=-1).mean())


@dataclass
class PretrainResult:
    model: PretrainModel
    curve: list[PretrainLossRecord] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    best_round: int = 0
    stopped_early: bool = False


def _total(cfg: PretrainConfig, recon: Tensor | None, pred: Tensor) -> Tensor:
    w_recon, w_pred = cfg.loss_weights
    return w_pred * pred if recon is None else w_recon * recon + w_pred * pred


def evaluate_losses(model: PretrainModel, x: np.ndarray, masks: np.ndarray, cfg: PretrainConfig) -> PretrainLossRecord:
    """Frame-weighted mean losses over a split, in eval mode without gradients."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    recon_sum = pred_sum = 0.0
    recon_n = 0
    try:
        with torch.no_grad():
            for s in range(0, len(x), cfg.batch_size):
                xb = torch.as_tensor(x[s:s + cfg.batch_size], dtype=dtype)
                mb = torch.as_tensor(masks[s:s + cfg.batch_size])
                recon, pred = model.losses(xb, mb)
                pred_sum += float(pred) * len(xb)
                if recon is not None:
                    n = int(((1 - mb).sum(dim=1) > 0).sum())
                    recon_sum += float(recon) * n
                    recon_n += n
    finally:
        model.train(was_training)
    recon = recon_sum / recon_n if recon_n else 0.0
    pred = pred_sum / len(x)
    w_recon, w_pred = cfg.loss_weights
    return PretrainLossRecord(step=0, recon=recon, pred=pred, total=w_recon * recon + w_pred * pred, split="val")


def run_pretraining(
    model: PretrainModel,
    train_x: np.ndarray,
    val_x: np.ndarray,
    cfg: PretrainConfig,
    validate: Callable[[PretrainModel, int], float] | None = None,
) -> PretrainResult:
    """Joint AdamW training with early stopping on validation total loss.

    ``train_x``/``val_x`` are normalized frames ``(B, 2, N)``.  Validation
    runs once before training (round 0) and after every epoch; training
    stops once ``early_stop_patience`` consecutive rounds fail to improve on
    the best round, whose parameters are restored into ``model``.
    ``validate`` overrides the validation metric (used to test the stopping
    rule); it receives the model and the round index.
    """
    if len(train_x) == 0 or len(val_x) == 0:
        raise ConfigError("pre-training needs nonempty train and validation splits")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    N = train_x.shape[-1]
    val_masks = sample_masks(len(val_x), N, cfg.r, np.random.default_rng(cfg.seed + 1))
    dtype = next(model.parameters()).dtype
    opt = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
    )
    result = PretrainResult(model=model)

    def validation_round(round_idx: int, step: int) -> float:
        rec = evaluate_losses(model, val_x, val_masks, cfg)
        rec.step = step
        result.curve.append(rec)
        value = rec.total if validate is None else float(validate(model, round_idx))
        result.val_history.append(value)
        log.info("round %d step %d val total %.6f", round_idx, step, value)
        return value

    best = validation_round(0, 0)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    step = 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_x))
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            xb = torch.as_tensor(train_x[idx], dtype=dtype)
            mb = torch.as_tensor(sample_masks(len(idx), N, cfg.r, rng))
            recon, pred = model.losses(xb, mb)
            for name, term in (("recon", recon), ("pred", pred)):
                if term is not None and not torch.isfinite(term):
                    raise TrainingDivergedError(
                        f"non-finite {name} loss at epoch {epoch}, batch {b} (step {step})"
                    )
            total = _total(cfg, recon, pred)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            step += 1
            result.curve.append(PretrainLossRecord(
                step=step, recon=recon.item() if recon is not None else float("nan"),
                pred=pred.item(), total=total.item(),
            ))
        value = validation_round(epoch, step)
        model.train()
        if value < best:
            best, stale = value, 0
            best_state = copy.deepcopy(model.state_dict())
            result.best_round = epoch
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                result.stopped_early = True
                break
    model.load_state_dict(best_state)
    model.eval()
    return result


def write_loss_curve(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "recon", "pred", "total", "split"])
        for r in records:
            w.writerow([r.step, repr(r.recon), repr(r.pred), repr(r.total), r.split])


def save_pretrained(path, model: PretrainModel, cfg: PretrainConfig | None = None) -> None:
    config = {"encoder": model.encoder.cfg.to_dict(), "d_dec": model.decoder.fc1.weight.shape[1]}
    if cfg is not None:
        config["pretrain"] = asdict(cfg)
    save_archive(path, model.state_dict(), PRETRAIN_FORMAT, config=config)


def load_pretrained(path) -> PretrainModel:
    tensors, meta = load_archive(path, PRETRAIN_FORMAT)
    cfg = meta["config"]
    model = PretrainModel(EncoderConfig.from_dict(cfg["encoder"]), d_dec=cfg["d_dec"])
    load_into(model, tensors)
    model.eval()
    return model


def split_train_val(x: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_val = max(1, int(math.ceil(val_fraction * len(x))))
    return x[np.sort(order[n_val:])], x[np.sort(order[:n_val])]


def pretrain_config_from_dict(d: dict) -> PretrainConfig:
    known = {f.name for f in fields(PretrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown pretrain config keys: {sorted(unknown)}")
    return PretrainConfig(**d)

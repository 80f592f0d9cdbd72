"""Spectrum encoder: convolutional projection, sinusoidal positions and a stack
of feed-forward / self-attention / convolution / feed-forward blocks.

Tensors are laid out ``(batch, positions, hidden)`` inside the blocks and
``(batch, channels, positions)`` at the input.  Linear maps follow the
row-vector convention ``y = x @ W + b`` with ``W`` stored as ``(in, out)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ShapeError


@dataclass
class EncoderConfig:
    d: int = 256
    d_ff: int = 512
    H: int = 8
    L: int = 16
    N: int = 128
    dropout: float = 0.1
    proj_kernel: int = 3
    dw_kernel: int = 3
    pw_kernel: int = 1
    norm_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.L < 1:
            raise ConfigError("encoder needs at least one block (L >= 1)")
        if self.H < 1 or self.d % self.H:
            raise ConfigError(f"d={self.d} is not divisible by H={self.H}")
        if self.d % 2:
            raise ConfigError("positional encoding needs an even hidden dimension d")
        if self.d_ff < 1 or self.N < 2:
            raise ConfigError("d_ff must be >= 1 and N >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.proj_kernel < 1 or self.proj_kernel % 2 == 0:
            raise ConfigError("proj_kernel must be a positive odd integer")
        if self.dw_kernel != 3 or self.pw_kernel != 1:
            raise ConfigError("depthwise kernel is fixed at 3 and pointwise kernels at 1")

    @property
    def d_h(self) -> int:
        return self.d // self.H

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class Dense(nn.Module):
    """Affine map ``x @ weight + bias`` with ``weight`` shaped ``(in, out)``.

    A low-rank adapter attached as ``self.lora`` adds its update on top of
    the (frozen) weight; see :mod:`spectrumfm.lora`.
    """

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_features, out_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        self.lora = None
        b = glorot_bound(in_features, out_features)
        nn.init.uniform_(self.weight, -b, b)

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.lora is not None:
            y = y + self.lora(x)
        if self.bias is not None:
            y = y + self.bias
        return y


def _conv1d(in_ch: int, out_ch: int, kernel: int, groups: int = 1) -> nn.Conv1d:
    conv = nn.Conv1d(in_ch, out_ch, kernel, padding=kernel // 2, groups=groups)
    b = glorot_bound(in_ch // groups * kernel, out_ch // groups * kernel)
    nn.init.uniform_(conv.weight, -b, b)
    nn.init.zeros_(conv.bias)
    return conv


def positional_encoding(N: int, d: int) -> np.ndarray:
    """Sinusoidal table: even columns ``sin(p / 10000**(2i/d))``, odd columns cos."""
    if d % 2:
        raise ConfigError("positional encoding needs an even hidden dimension")
    p = np.arange(N, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = p / np.power(10000.0, 2 * i / d)
    pe = np.empty((N, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class FeedForward(nn.Module):
    """Post-norm feed-forward: ``LN(x + W2 gelu(x W1 + b1) + b2)``."""

    def __init__(self, d: int, d_ff: int, dropout: float = 0.0, eps: float = 1e-6):
        super().__init__()
        self.w1 = Dense(d, d_ff)
        self.w2 = Dense(d_ff, d)
        self.norm = nn.LayerNorm(d, eps=eps)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        h = self.w2(F.gelu(self.w1(x)))
        return self.norm(x + self.dropout(h))


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention over ``H`` heads, post-norm residual.

    Head ``h`` uses columns ``h*d_h:(h+1)*d_h`` of ``w_q``, ``w_k`` and ``w_v``.
    """

    def __init__(self, d: int, H: int, dropout: float = 0.0, eps: float = 1e-6):
        super().__init__()
        if d % H:
            raise ConfigError(f"d={d} is not divisible by H={H}")
        self.H = H
        self.d_h = d // H
        self.w_q = Dense(d, d, bias=False)
        self.w_k = Dense(d, d, bias=False)
        self.w_v = Dense(d, d, bias=False)
        self.w_o = Dense(d, d, bias=False)
        self.norm = nn.LayerNorm(d, eps=eps)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.H, self.d_h).transpose(1, 2)

    def attend(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Concatenated head outputs (before ``w_o``) and attention weights ``(B, H, n, n)``."""
        q, k, v = self._split(self.w_q(x)), self._split(self.w_k(x)), self._split(self.w_v(x))
        # scaling q rather than the (n, n) logits is cheaper and equivalent
        weights = torch.softmax((q * (1.0 / math.sqrt(self.d_h))) @ k.transpose(-2, -1), dim=-1)
        heads = weights @ v
        b, _, n, _ = heads.shape
        return heads.transpose(1, 2).reshape(b, n, self.H * self.d_h), weights

    def forward(self, x: Tensor) -> Tensor:
        heads, _ = self.attend(x)
        return self.norm(x + self.dropout(self.w_o(heads)))


class ConvModule(nn.Module):
    """Pointwise -> depthwise (kernel 3) -> pointwise convolution.

    No residual connection and no normalization around this module.
    """

    def __init__(self, d: int, dropout: float = 0.0):
        super().__init__()
        self.pointwise1 = _conv1d(d, d, 1)
        self.depthwise = _conv1d(d, d, 3, groups=d)
        self.pointwise2 = _conv1d(d, d, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        y = x.transpose(1, 2)
        y = self.pointwise2(self.depthwise(self.pointwise1(y)))
        return self.dropout(y.transpose(1, 2))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ffn1 = FeedForward(cfg.d, cfg.d_ff, cfg.dropout, cfg.norm_eps)
        self.attention = MultiHeadSelfAttention(cfg.d, cfg.H, cfg.dropout, cfg.norm_eps)
        self.conv = ConvModule(cfg.d, cfg.dropout)
        self.ffn2 = FeedForward(cfg.d, cfg.d_ff, cfg.dropout, cfg.norm_eps)

    def forward(self, x: Tensor) -> Tensor:
        return self.ffn2(self.conv(self.attention(self.ffn1(x))))


class SpectrumEncoder(nn.Module):
    """Maps normalized amplitude/phase frames ``(B, 2, n)`` to hidden states ``(B, n, d)``.

    ``n`` may be shorter than the configured ``N`` (the next-slot task feeds
    ``N - 1`` positions); longer inputs are rejected.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.projection = _conv1d(2, cfg.d, cfg.proj_kernel)
        self.register_buffer(
            "pe", torch.tensor(positional_encoding(cfg.N, cfg.d), dtype=torch.float32),
            persistent=False,
        )
        self.dropout = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.L))

    def embed(self, x: Tensor) -> Tensor:
        if x.dim() != 3 or x.shape[1] != 2:
            raise ShapeError(f"expected (batch, 2, positions), got {tuple(x.shape)}")
        n = x.shape[2]
        if n > self.cfg.N:
            raise ShapeError(f"frame length {n} exceeds configured N={self.cfg.N}")
        h = self.projection(x).transpose(1, 2)
        return self.dropout(h + self.pe[:n].to(h.dtype))

    def forward(self, x: Tensor) -> Tensor:
        h = self.embed(x)
        for block in self.blocks:
            h = block(h)
        return h


def encode(model: SpectrumEncoder, frames, mode: str = "eval") -> Tensor:
    """Run ``model`` on normalized frames in the requested mode.

    ``frames`` is a ``(B, 2, n)`` array/tensor or a single ``(2, n)`` frame.
    The model's previous train/eval state is restored afterwards.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(frames) if not isinstance(frames, Tensor) else frames, dtype=dtype)
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    was_training = model.training
    model.train(mode == "train")
    try:
        with torch.set_grad_enabled(mode == "train"):
            out = model(x)
    finally:
        model.train(was_training)
    return out[0] if single else out


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)

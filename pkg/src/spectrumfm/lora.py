"""Low-rank adaptation of frozen dense weights: ``W + alpha * A @ B``.

Adapters hang off :class:`~spectrumfm.encoder.Dense` modules as ``.lora``,
so base tensors keep their checkpoint paths and adapter tensors appear as
``<site>.lora.A`` / ``<site>.lora.B``.  Sites are named by their dotted path
relative to the encoder (``blocks.3.attention.w_q``).
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields

import torch
from torch import Tensor, nn

from .checkpoint import load_archive, save_archive
from .encoder import Dense, SpectrumEncoder
from .errors import AdapterStateError, ConfigError, NothingToTrainError, ShapeError, ShapeMapError

ADAPTER_FORMAT = "spectrumfm-lora"
ATTENTION_SITES = ("w_q", "w_k", "w_v", "w_o")
FFN_SITES = ("w1", "w2")


@dataclass
class LoRAConfig:
    a: int = 8
    alpha: float = 16.0
    target_sites: tuple[str, ...] = ATTENTION_SITES
    init_std: float = 0.01

    def __post_init__(self):
        self.target_sites = tuple(self.target_sites)
        unknown = set(self.target_sites) - set(ATTENTION_SITES + FFN_SITES)
        if unknown:
            raise ConfigError(f"unknown LoRA target sites: {sorted(unknown)}")
        if not self.target_sites:
            raise ConfigError("LoRA needs at least one target site")
        if self.a < 1:
            raise ConfigError("LoRA rank a must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("LoRA alpha must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LoRAConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown lora config keys: {sorted(unknown)}")
        return cls(**d)


class LoRAAdapter(nn.Module):
    """Trainable ``A (d_in x a)`` and ``B (a x d_out)``; contributes ``alpha * x @ A @ B``."""

    def __init__(self, d_in: int, d_out: int, a: int, alpha: float, base_ref: str,
                 init_std: float = 0.01):
        super().__init__()
        self.alpha = float(alpha)
        self.base_ref = base_ref
        self.A = nn.Parameter(torch.randn(d_in, a) * init_std)
        self.B = nn.Parameter(torch.zeros(a, d_out))

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def delta(self) -> Tensor:
        return self.alpha * (self.A @ self.B)

    def forward(self, x: Tensor) -> Tensor:
        return self.alpha * ((x @ self.A) @ self.B)


def effective_weight(W: Tensor, adapter: LoRAAdapter) -> Tensor:
    """``W + alpha * A @ B`` as a new tensor; ``W`` is left untouched."""
    if W.shape != (adapter.A.shape[0], adapter.B.shape[1]):
        raise ShapeError(
            f"adapter {tuple(adapter.A.shape)}x{tuple(adapter.B.shape)} does not fit W {tuple(W.shape)}"
        )
    return W + adapter.delta().to(W.dtype)


def _encoder_of(model: nn.Module) -> SpectrumEncoder:
    if isinstance(model, SpectrumEncoder):
        return model
    enc = getattr(model, "encoder", None)
    if not isinstance(enc, SpectrumEncoder):
        raise ConfigError("model has no spectrum encoder to adapt")
    return enc


def target_modules(model: nn.Module, sites) -> dict[str, Dense]:
    """Dense layers of the encoder whose attribute name is one of ``sites``."""
    enc = _encoder_of(model)
    return {
        name: mod for name, mod in enc.named_modules()
        if isinstance(mod, Dense) and name.rsplit(".", 1)[-1] in sites
    }


def adapters(model: nn.Module) -> dict[str, LoRAAdapter]:
    enc = _encoder_of(model)
    return {
        name: mod.lora for name, mod in enc.named_modules()
        if isinstance(mod, Dense) and mod.lora is not None
    }


def attach_adapters(model: nn.Module, cfg: LoRAConfig, trainable: tuple[str, ...] = ("head",),
                    inplace: bool = False) -> nn.Module:
    """Attach an adapter at every target site and freeze everything else.

    Top-level submodules named in ``trainable`` (task heads) stay trainable.
    Returns a copy unless ``inplace``.
    """
    if not inplace:
        model = copy.deepcopy(model)
    sites = target_modules(model, cfg.target_sites)
    for name, dense in sites.items():
        if dense.lora is not None:
            raise AdapterStateError(f"{name} already carries an adapter")
        d_in, d_out = dense.weight.shape
        if cfg.a >= min(d_in, d_out):
            raise ConfigError(f"LoRA rank a={cfg.a} must be below the site width {min(d_in, d_out)}")
    for p in model.parameters():
        p.requires_grad_(False)
    for name, dense in sites.items():
        d_in, d_out = dense.weight.shape
        adapter = LoRAAdapter(d_in, d_out, cfg.a, cfg.alpha, name, cfg.init_std)
        dense.lora = adapter.to(dense.weight.dtype)
    for child_name, child in model.named_children():
        if child_name in trainable:
            for p in child.parameters():
                p.requires_grad_(True)
    return model


def count_adapter_parameters(model: nn.Module) -> int:
    return sum(p.numel() for a in adapters(model).values() for p in a.parameters())


def trainable_fraction(model: nn.Module) -> float:
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    if trainable == 0:
        raise NothingToTrainError("model has no trainable parameters")
    return trainable / total


def merge_adapters(model: nn.Module) -> nn.Module:
    """Copy of ``model`` with every adapter folded into its base weight and removed."""
    if not adapters(model):
        raise AdapterStateError("no adapters to merge (already merged?)")
    merged = copy.deepcopy(model)
    for dense in target_modules(merged, ATTENTION_SITES + FFN_SITES).values():
        if dense.lora is None:
            continue
        with torch.no_grad():
            dense.weight.copy_(effective_weight(dense.weight, dense.lora))
        dense.lora = None
    return merged


def unmerge_adapters(model: nn.Module, state: dict[str, Tensor], cfg: LoRAConfig) -> nn.Module:
    """Inverse of :func:`merge_adapters` given the adapter tensors it folded in.

    ``state`` maps ``<site>.A`` / ``<site>.B`` to tensors, as produced by
    :func:`adapter_state`.
    """
    out = copy.deepcopy(model)
    _install(out, state, cfg)
    for dense in target_modules(out, cfg.target_sites).values():
        with torch.no_grad():
            dense.weight.sub_(dense.lora.delta().to(dense.weight.dtype))
    return out


def adapter_state(model: nn.Module) -> dict[str, Tensor]:
    out = {}
    for ref, a in adapters(model).items():
        out[f"{ref}.A"] = a.A.detach().clone()
        out[f"{ref}.B"] = a.B.detach().clone()
    return out


def _install(model: nn.Module, state: dict[str, Tensor], cfg: LoRAConfig) -> None:
    sites = target_modules(model, cfg.target_sites)
    refs = {k.rsplit(".", 1)[0] for k in state}
    bad = sorted(refs ^ set(sites))
    for ref in sorted(refs & set(sites)):
        d_in, d_out = sites[ref].weight.shape
        A, B = state.get(f"{ref}.A"), state.get(f"{ref}.B")
        if A is None or B is None or A.shape != (d_in, cfg.a) or B.shape != (cfg.a, d_out):
            bad.append(ref)
    if bad:
        raise ShapeMapError(sorted(set(bad)), "adapter archive does not match model")
    for ref, dense in sites.items():
        if dense.lora is not None:
            raise AdapterStateError(f"{ref} already carries an adapter")
        d_in, d_out = dense.weight.shape
        adapter = LoRAAdapter(d_in, d_out, cfg.a, cfg.alpha, ref).to(dense.weight.dtype)
        with torch.no_grad():
            adapter.A.copy_(state[f"{ref}.A"])
            adapter.B.copy_(state[f"{ref}.B"])
        dense.lora = adapter


def save_adapters(path, model: nn.Module, cfg: LoRAConfig) -> None:
    save_archive(path, adapter_state(model), ADAPTER_FORMAT, config=asdict(cfg))


def load_adapters(path, model: nn.Module, trainable: tuple[str, ...] = ("head",)) -> nn.Module:
    """Attach adapters stored at ``path`` onto ``model`` in place and freeze the base."""
    tensors, meta = load_archive(path, ADAPTER_FORMAT)
    cfg = LoRAConfig.from_dict(meta["config"])
    _install(model, tensors, cfg)
    for name, p in model.named_parameters():
        p.requires_grad_(".lora." in f".{name}" or name.split(".", 1)[0] in trainable)
    return model

"""Named-tensor archives (safetensors) with JSON metadata.

Every archive records a ``format`` tag and ``version`` in its metadata;
structured config lives under the ``config`` key as JSON text.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, safe_open, save_file
from torch import nn

from .errors import CorruptionError, ShapeMapError, UnsupportedFormatError

ARCHIVE_VERSION = "1"


def save_archive(path, tensors: dict[str, torch.Tensor], fmt: str, config: dict | None = None,
                 **meta: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {"format": fmt, "version": ARCHIVE_VERSION, **{k: str(v) for k, v in meta.items()}}
    if config is not None:
        metadata["config"] = json.dumps(config, sort_keys=True)
    flat = {k: v.detach().contiguous().clone() for k, v in tensors.items()}
    tmp = path.with_name(path.name + ".tmp")
    save_file(flat, str(tmp), metadata=metadata)
    os.replace(tmp, path)


def load_archive(path, fmt: str | None = None) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(tensors, metadata)``; ``metadata['config']`` is decoded from JSON."""
    try:
        with safe_open(str(path), framework="pt") as fh:
            metadata = dict(fh.metadata() or {})
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise CorruptionError(f"{path}: unreadable archive ({exc})") from None
    if metadata.get("version") != ARCHIVE_VERSION:
        raise UnsupportedFormatError(f"{path}: archive version {metadata.get('version')!r}")
    if fmt is not None and metadata.get("format") != fmt:
        raise UnsupportedFormatError(f"{path}: expected {fmt!r} archive, found {metadata.get('format')!r}")
    if "config" in metadata:
        metadata["config"] = json.loads(metadata["config"])
    return tensors, metadata


def load_into(module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Copy ``tensors`` (keys under ``prefix``) into ``module``'s state, strictly."""
    state = module.state_dict()
    picked = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    bad = sorted(
        set(state) ^ set(picked)
        | {k for k in set(state) & set(picked) if state[k].shape != picked[k].shape}
    )
    if bad:
        raise ShapeMapError([prefix + k for k in bad])
    module.load_state_dict({k: v.to(state[k].dtype) for k, v in picked.items()})


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

"""Labeled synthetic datasets and their on-disk format.

A dataset is a pair of files sharing a stem::

    <name>.manifest.json   UTF-8 JSON manifest
    <name>.f32             raw float32 little-endian payload

The payload is frame-major, then channel-major (I, Q), then position-major.
Per-frame labels and SNR tags live in the manifest.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, CorruptionError, UnsupportedFormatError
from .signals import (
    AD_CLASSES,
    SS_CLASSES,
    IQFrame,
    LabeledFrame,
    Modulation,
    ScenarioSpec,
    Task,
    preprocess,
    synth_frame,
)

FORMAT_VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class DatasetManifest:
    version: int
    num_frames: int
    frame_len: int
    channels: int
    task: Task
    class_names: list[str]
    snr_levels: list[float]
    labels: list[int] = field(default_factory=list)
    snr_db: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["task"] = Task(self.task).value
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("version") != FORMAT_VERSION:
            raise UnsupportedFormatError(f"unsupported dataset version {d.get('version')!r}")
        try:
            d["task"] = Task(d["task"])
            return cls(**d)
        except (TypeError, ValueError, KeyError) as exc:
            raise CorruptionError(f"malformed manifest: {exc}") from None


def class_names_for(task: Task, specs: Sequence[ScenarioSpec] = ()) -> list[str]:
    task = Task(task)
    if task is Task.SS:
        return list(SS_CLASSES)
    if task is Task.AD:
        return list(AD_CLASSES)
    names: dict[int, str] = {}
    for s in specs:
        names.setdefault(s.class_id, s.technology)
    if sorted(names) != list(range(len(names))):
        raise ConfigError(f"WTC class ids must be 0..K-1, got {sorted(names)}")
    return [names[k] for k in range(len(names))]


def generate_dataset(
    specs: Sequence[ScenarioSpec], per_spec_count: int
) -> tuple[DatasetManifest, list[LabeledFrame]]:
    """Synthesize ``per_spec_count`` frames per spec.

    Frame ``j`` of a spec is drawn with seed ``spec.seed + j``.
    """
    if not specs:
        raise ConfigError("empty scenario list")
    if per_spec_count < 1:
        raise ConfigError("per_spec_count must be >= 1")
    tasks = {s.task for s in specs}
    lengths = {s.N for s in specs}
    if len(tasks) != 1 or len(lengths) != 1:
        raise ConfigError("all scenarios in a dataset must share task and frame length")
    task, n = tasks.pop(), lengths.pop()
    frames = []
    for s in specs:
        for j in range(per_spec_count):
            frames.append(synth_frame(_reseed(s, s.seed + j)))
    manifest = _manifest_for(task, n, class_names_for(task, specs), frames)
    return manifest, frames


def _reseed(spec: ScenarioSpec, seed: int) -> ScenarioSpec:
    d = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    d["seed"] = seed % 2**64
    return ScenarioSpec(**d)


def _manifest_for(task, n, class_names, frames) -> DatasetManifest:
    return DatasetManifest(
        version=FORMAT_VERSION,
        num_frames=len(frames),
        frame_len=n,
        channels=2,
        task=Task(task),
        class_names=list(class_names),
        snr_levels=sorted({float(f.snr_db) for f in frames}),
        labels=[int(f.label) for f in frames],
        snr_db=[float(f.snr_db) for f in frames],
    )


def subset(manifest: DatasetManifest, frames: Sequence[LabeledFrame], idx) -> tuple[DatasetManifest, list[LabeledFrame]]:
    picked = [frames[int(k)] for k in idx]
    return _manifest_for(manifest.task, manifest.frame_len, manifest.class_names, picked), picked


def shuffled_subset(manifest, frames, count: int, seed: int):
    """Seeded random subset of ``count`` frames, kept in original order."""
    if count > len(frames):
        raise ConfigError(f"cannot take {count} of {len(frames)} frames")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.permutation(len(frames))[:count])
    return subset(manifest, frames, idx)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def dataset_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.name
    for suffix in (".manifest.json", ".f32"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    return p.with_name(stem + ".manifest.json"), p.with_name(stem + ".f32")


def write_dataset(path, manifest: DatasetManifest, frames: Sequence[LabeledFrame]) -> None:
    if manifest.num_frames != len(frames):
        raise CorruptionError(
            f"manifest lists {manifest.num_frames} frames, got {len(frames)}"
        )
    mpath, ppath = dataset_paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    payload = np.empty((len(frames), 2, manifest.frame_len), dtype=_PAYLOAD_DTYPE)
    for k, f in enumerate(frames):
        payload[k, 0] = f.frame.i
        payload[k, 1] = f.frame.q
    _atomic_write(ppath, payload.tobytes())
    _atomic_write(mpath, manifest.to_json().encode("utf-8"))


def read_dataset(path) -> tuple[DatasetManifest, list[LabeledFrame]]:
    mpath, ppath = dataset_paths(path)
    manifest = DatasetManifest.from_json(mpath.read_text(encoding="utf-8"))
    raw = ppath.read_bytes()
    expected = manifest.num_frames * manifest.channels * manifest.frame_len * _PAYLOAD_DTYPE.itemsize
    if len(raw) != expected:
        raise CorruptionError(
            f"{ppath.name}: payload holds {len(raw)} bytes, manifest implies {expected}"
        )
    if manifest.channels != 2:
        raise CorruptionError(f"expected 2 channels, manifest says {manifest.channels}")
    if len(manifest.labels) != manifest.num_frames or len(manifest.snr_db) != manifest.num_frames:
        raise CorruptionError("per-frame label/SNR lists disagree with num_frames")
    data = np.frombuffer(raw, dtype=_PAYLOAD_DTYPE).reshape(
        manifest.num_frames, 2, manifest.frame_len
    )
    frames = [
        LabeledFrame(
            frame=IQFrame(i=data[k, 0].astype(np.float32), q=data[k, 1].astype(np.float32)),
            label=manifest.labels[k],
            snr_db=manifest.snr_db[k],
            task=manifest.task,
        )
        for k in range(manifest.num_frames)
    ]
    return manifest, frames


def to_arrays(frames: Sequence[LabeledFrame]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack frames into ``(iq (B,2,N) float32, labels int64, snr float64)``."""
    if not frames:
        return np.zeros((0, 2, 0), np.float32), np.zeros(0, np.int64), np.zeros(0)
    iq = np.stack([f.frame.as_array() for f in frames]).astype(np.float32)
    labels = np.array([f.label for f in frames], dtype=np.int64)
    snr = np.array([f.snr_db for f in frames], dtype=np.float64)
    return iq, labels, snr


def model_inputs(frames: Sequence[LabeledFrame]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Like :func:`to_arrays` but with IQ replaced by normalized AP channels."""
    iq, labels, snr = to_arrays(frames)
    return preprocess(iq), labels, snr


# -- scenario builders -------------------------------------------------------

SS_MODULATIONS = (Modulation.BPSK, Modulation.QPSK, Modulation.PSK8, Modulation.QAM16)

#: Three synthetic "technologies": distinct modulation and bandwidth signatures.
WTC_TECHNOLOGIES = (
    (Modulation.BPSK, 0.5),
    (Modulation.QPSK, 1.0),
    (Modulation.QAM16, 2.0),
)


def _seed(base: int, *parts: int) -> int:
    # Disjoint per-spec seed blocks; frames add their index within a block.
    s = base
    for p in parts:
        s = s * 1_000_003 + p
    return (s * 1_000_000) % 2**64


def ss_scenarios(snr_levels, seed: int, n: int = 128, modulations=SS_MODULATIONS) -> list[ScenarioSpec]:
    """One spec per (SNR, modulation) plus as many noise-only specs, so classes balance."""
    specs = []
    for a, snr in enumerate(snr_levels):
        for b, mod in enumerate(modulations):
            specs.append(ScenarioSpec(Task.SS, mod, float(snr), seed=_seed(seed, a, b, 0), N=n))
            specs.append(ScenarioSpec(Task.SS, Modulation.NOISE_ONLY, float(snr), seed=_seed(seed, a, b, 1), N=n))
    return specs


def ad_scenarios(snr_levels, seed: int, n: int = 128, interference_ratios=(0.5, 1.5)) -> list[ScenarioSpec]:
    """Normal QPSK versus QPSK with an aliased interferer, balanced per SNR and ratio."""
    specs = []
    for a, snr in enumerate(snr_levels):
        for b, ratio in enumerate(interference_ratios):
            specs.append(ScenarioSpec(Task.AD, Modulation.QPSK, float(snr), seed=_seed(seed, a, b, 0), N=n))
            specs.append(ScenarioSpec(
                Task.AD, Modulation.INTERFERED, float(snr), interference_bandwidth_ratio=ratio,
                seed=_seed(seed, a, b, 1), N=n,
            ))
    return specs


def wtc_scenarios(snr_levels, seed: int, n: int = 128, technologies=WTC_TECHNOLOGIES) -> list[ScenarioSpec]:
    specs = []
    for a, snr in enumerate(snr_levels):
        for cid, (mod, bw) in enumerate(technologies):
            specs.append(ScenarioSpec(
                Task.WTC, mod, float(snr), seed=_seed(seed, a, cid), bandwidth_ratio=bw,
                class_id=cid, N=n,
            ))
    return specs


def pretrain_scenarios(snr_levels, seed: int, n: int = 128) -> list[ScenarioSpec]:
    """Unlabeled-style corpus: every modulation and bandwidth at every SNR.

    Frames are tagged as SS (the label is unused by pre-training).
    """
    specs = []
    for a, snr in enumerate(snr_levels):
        for b, mod in enumerate(SS_MODULATIONS):
            for c, bw in enumerate((0.5, 1.0, 2.0)):
                specs.append(ScenarioSpec(
                    Task.SS, mod, float(snr), seed=_seed(seed, a, b, c), bandwidth_ratio=bw, N=n,
                ))
    return specs


# -- task splits ---------------------------------------------------------------

SPLITS = ("pretrain", "train", "val", "test")

DEFAULT_SNR_DB = {
    Task.SS: tuple(float(s) for s in range(-10, 11, 2)),
    Task.AD: (-20.0, -10.0, 0.0),
    Task.WTC: (-5.0, 0.0, 5.0, 10.0, 15.0),
}
PRETRAIN_SNR_DB = (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0)


@dataclass
class DataConfig:
    """Sizes and SNR grids of the synthetic splits.

    ``snr_db`` of None selects the task's default grid.  ``train_frames``
    and ``val_frames`` are exact counts drawn evenly over the scenarios;
    the test split holds ``test_per_scenario`` frames of every scenario.
    """

    N: int = 128
    snr_db: list[float] | None = None
    pretrain_snr_db: list[float] = field(default_factory=lambda: list(PRETRAIN_SNR_DB))
    pretrain_frames: int = 2000
    train_frames: int = 6000
    val_frames: int = 600
    test_per_scenario: int = 25

    def __post_init__(self):
        if self.N < 2:
            raise ConfigError("frame length N must be >= 2")
        for name in ("pretrain_frames", "train_frames", "val_frames", "test_per_scenario"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.snr_db is not None and not self.snr_db:
            raise ConfigError("snr_db must list at least one level")

    def snr_grid(self, task: Task) -> list[float]:
        return [float(s) for s in (self.snr_db if self.snr_db is not None else DEFAULT_SNR_DB[Task(task)])]


def task_scenarios(task: Task, snr_levels, seed: int, n: int = 128) -> list[ScenarioSpec]:
    builders = {Task.SS: ss_scenarios, Task.AD: ad_scenarios, Task.WTC: wtc_scenarios}
    return builders[Task(task)](snr_levels, seed, n)


def _exact_count(specs, count: int, seed: int):
    per_spec = -(-count // len(specs))
    manifest, frames = generate_dataset(specs, per_spec)
    return shuffled_subset(manifest, frames, count, seed)


def build_split(task: Task, split: str, cfg: DataConfig, seed: int) -> tuple[DatasetManifest, list[LabeledFrame]]:
    """Synthesize one split; splits draw from disjoint seed blocks."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    base = _seed(seed, SPLITS.index(split) + 1) // 1_000_000
    if split == "pretrain":
        return _exact_count(pretrain_scenarios(cfg.pretrain_snr_db, base, cfg.N), cfg.pretrain_frames, seed)
    specs = task_scenarios(task, cfg.snr_grid(task), base, cfg.N)
    if split == "test":
        return generate_dataset(specs, cfg.test_per_scenario)
    count = cfg.train_frames if split == "train" else cfg.val_frames
    return _exact_count(specs, count, seed)

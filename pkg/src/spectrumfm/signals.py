"""IQ frames, the amplitude/phase transform chain and synthetic frame generation."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataIntegrityError, ShapeError

#: Oversampling factor of a unit-bandwidth signal, in samples per symbol.
SAMPLES_PER_SYMBOL = 8
ROLLOFF = 0.35
#: RRC pulse truncation, in symbols on each side of the peak.
PULSE_SPAN = 6
#: Interferer power relative to the primary signal.
INTERFERENCE_TO_SIGNAL_DB = 0.0
#: Interferer centre frequency, as a fraction of the primary's occupied bandwidth.
INTERFERENCE_OFFSET = 0.5


class Task(str, enum.Enum):
    SS = "SS"
    AD = "AD"
    WTC = "WTC"


class Modulation(str, enum.Enum):
    BPSK = "BPSK"
    QPSK = "QPSK"
    PSK8 = "8PSK"
    QAM16 = "16QAM"
    NOISE_ONLY = "NOISE_ONLY"
    INTERFERED = "INTERFERED"


_CONSTELLATIONS = {
    Modulation.BPSK: np.array([1.0, -1.0], dtype=complex),
    Modulation.QPSK: np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4))),
    Modulation.PSK8: np.exp(1j * 2 * np.pi * np.arange(8) / 8),
    Modulation.QAM16: np.array(
        [complex(a, b) for a in (-3, -1, 1, 3) for b in (-3, -1, 1, 3)]
    ) / math.sqrt(10.0),
}

SS_CLASSES = ("idle", "occupied")
AD_CLASSES = ("normal", "anomalous")


@dataclass(frozen=True)
class IQFrame:
    i: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        if self.i.shape != self.q.shape or self.i.ndim != 1:
            raise ShapeError(f"I/Q shape mismatch: {self.i.shape} vs {self.q.shape}")

    @property
    def N(self) -> int:
        return self.i.shape[0]

    def as_array(self) -> np.ndarray:
        return np.stack([self.i, self.q])


@dataclass(frozen=True)
class APFrame:
    amplitude: np.ndarray
    phase: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.amplitude, self.phase])


@dataclass(frozen=True)
class NormalizedFrame:
    """2xN amplitude/phase channels scaled to [0, 1].

    ``degenerate[c]`` is True when channel ``c`` was constant and has been
    emitted as zeros.
    """

    channels: np.ndarray
    degenerate: tuple[bool, bool] = (False, False)

    @property
    def N(self) -> int:
        return self.channels.shape[1]


@dataclass(frozen=True)
class ScenarioSpec:
    """Recipe for one family of synthetic frames.

    ``bandwidth_ratio`` scales the primary signal's symbol rate relative to the
    default of one symbol per ``SAMPLES_PER_SYMBOL`` samples.  ``class_id`` is
    only used by WTC scenarios, whose labels are not implied by the modulation.
    """

    task: Task
    modulation: Modulation
    snr_db: float = 0.0
    interference_bandwidth_ratio: float = 1.0
    seed: int = 0
    bandwidth_ratio: float = 1.0
    class_id: int | None = None
    N: int = 128

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        try:
            object.__setattr__(self, "modulation", Modulation(self.modulation))
        except ValueError:
            raise ConfigError(f"unknown modulation {self.modulation!r}") from None
        if not 0.0 < self.interference_bandwidth_ratio <= 2.0:
            raise ConfigError("interference_bandwidth_ratio must lie in (0, 2]")
        if self.bandwidth_ratio <= 0:
            raise ConfigError("bandwidth_ratio must be positive")
        if self.N < 2:
            raise ConfigError("frame length N must be at least 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.task is Task.WTC and self.class_id is None:
            raise ConfigError("WTC scenarios need an explicit class_id")

    @property
    def label(self) -> int:
        if self.task is Task.SS:
            return int(self.modulation is not Modulation.NOISE_ONLY)
        if self.task is Task.AD:
            return int(self.modulation is Modulation.INTERFERED)
        return int(self.class_id)

    @property
    def technology(self) -> str:
        return f"{self.modulation.value}@{self.bandwidth_ratio:g}"


@dataclass(frozen=True)
class LabeledFrame:
    frame: IQFrame
    label: int
    snr_db: float
    task: Task = field(default=Task.SS)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise DataIntegrityError("frame contains non-finite values")


# -- transform chain -------------------------------------------------------

def iq_to_ap_array(iq: np.ndarray) -> np.ndarray:
    """Vectorised IQ -> amplitude/phase on ``(..., 2, N)`` arrays.

    The phase of a point on the negative real axis is +pi, including when the
    quadrature component is negative zero.
    """
    iq = np.asarray(iq)
    _check_finite(iq)
    i, q = iq[..., 0, :], iq[..., 1, :]
    amp = np.hypot(i, q)
    phase = np.arctan2(q, i)
    phase = np.where(phase == -np.pi, np.pi, phase)
    return np.stack([amp, phase], axis=-2)


def iq_to_ap(frame: IQFrame) -> APFrame:
    ap = iq_to_ap_array(frame.as_array())
    return APFrame(amplitude=ap[0], phase=ap[1])


def ap_to_iq(frame: APFrame) -> IQFrame:
    return IQFrame(
        i=frame.amplitude * np.cos(frame.phase),
        q=frame.amplitude * np.sin(frame.phase),
    )


def normalize_array(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel min-max scaling along the last axis.

    Returns the scaled array and a boolean array (shape ``x.shape[:-1]``)
    marking constant channels, which are emitted as zeros.
    """
    x = np.asarray(x)
    _check_finite(x)
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    span = hi - lo
    degenerate = span[..., 0] == 0
    safe = np.where(span == 0, 1, span)
    out = np.where(span == 0, 0, (x - lo) / safe)
    return np.clip(out, 0, 1).astype(x.dtype, copy=False), degenerate


def normalize(frame: APFrame) -> NormalizedFrame:
    out, degenerate = normalize_array(frame.as_array())
    return NormalizedFrame(channels=out, degenerate=(bool(degenerate[0]), bool(degenerate[1])))


def preprocess(iq: np.ndarray) -> np.ndarray:
    """IQ batch ``(B, 2, N)`` -> normalized amplitude/phase, float32."""
    ap = iq_to_ap_array(np.asarray(iq, dtype=np.float64))
    out, _ = normalize_array(ap)
    return out.astype(np.float32)


# -- synthesis --------------------------------------------------------------

def rrc_pulse(t: np.ndarray, beta: float = ROLLOFF) -> np.ndarray:
    """Root-raised-cosine impulse response at ``t`` (in symbol periods)."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    at_zero = np.isclose(t, 0.0, atol=1e-12)
    at_sing = np.isclose(np.abs(t), 1 / (4 * beta), atol=1e-12)
    rest = ~(at_zero | at_sing)
    out[at_zero] = 1 - beta + 4 * beta / np.pi
    out[at_sing] = beta / np.sqrt(2) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
        + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
    )
    tr = t[rest]
    num = np.sin(np.pi * tr * (1 - beta)) + 4 * beta * tr * np.cos(np.pi * tr * (1 + beta))
    den = np.pi * tr * (1 - (4 * beta * tr) ** 2)
    out[rest] = num / den
    return out


def shaped_stream(
    rng: np.random.Generator,
    modulation: Modulation,
    n: int,
    symbol_period: float,
    freq: float = 0.0,
) -> np.ndarray:
    """Unit-power pulse-shaped complex baseband stream of ``n`` samples.

    ``symbol_period`` may be fractional; the pulse is evaluated directly at
    every sample instant rather than by integer upsampling.
    """
    const = _CONSTELLATIONS[modulation]
    tau = rng.uniform(0.0, symbol_period)
    k = np.arange(-PULSE_SPAN, int(math.ceil(n / symbol_period)) + PULSE_SPAN + 1)
    symbols = const[rng.integers(0, len(const), size=k.size)]
    t = (np.arange(n)[:, None] - k[None, :] * symbol_period - tau) / symbol_period
    g = np.where(np.abs(t) <= PULSE_SPAN, rrc_pulse(t), 0.0)
    s = g @ symbols
    theta = rng.uniform(-np.pi, np.pi)
    s = s * np.exp(1j * (2 * np.pi * freq * np.arange(n) + theta))
    return s / np.sqrt(np.mean(np.abs(s) ** 2))


def _awgn(rng: np.random.Generator, n: int, power: float) -> np.ndarray:
    scale = math.sqrt(power / 2)
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def synth_components(spec: ScenarioSpec) -> tuple[np.ndarray, np.ndarray]:
    """Signal and noise parts of a frame, before summation (complex128)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.N
    period = SAMPLES_PER_SYMBOL / spec.bandwidth_ratio
    noise_power = 10.0 ** (-spec.snr_db / 10.0)
    if spec.modulation is Modulation.NOISE_ONLY:
        return np.zeros(n, dtype=complex), _awgn(rng, n, 1.0)
    if spec.modulation is Modulation.INTERFERED:
        primary = shaped_stream(rng, Modulation.QPSK, n, period)
        occupied = (1 + ROLLOFF) / period
        gain = 10.0 ** (INTERFERENCE_TO_SIGNAL_DB / 20.0)
        interferer = shaped_stream(
            rng, Modulation.QPSK, n, period / spec.interference_bandwidth_ratio,
            freq=INTERFERENCE_OFFSET * occupied,
        )
        signal = primary + gain * interferer
    else:
        signal = shaped_stream(rng, spec.modulation, n, period)
    return signal, _awgn(rng, n, noise_power)


def synth_frame(spec: ScenarioSpec) -> LabeledFrame:
    """Draw one labeled frame; the spec's seed fully determines the output.

    Noise-only frames use unit noise power (the SNR tag is kept for bucketing).
    """
    signal, noise = synth_components(spec)
    x = signal + noise
    frame = IQFrame(i=x.real.astype(np.float32), q=x.imag.astype(np.float32))
    return LabeledFrame(frame=frame, label=spec.label, snr_db=float(spec.snr_db), task=spec.task)

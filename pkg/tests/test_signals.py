import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spectrumfm.errors import ConfigError, DataIntegrityError
from spectrumfm.signals import (
    APFrame,
    IQFrame,
    Modulation,
    ScenarioSpec,
    Task,
    ap_to_iq,
    iq_to_ap,
    normalize,
    rrc_pulse,
    synth_components,
    synth_frame,
)


def _iq(i, q):
    return IQFrame(np.atleast_1d(np.asarray(i, float)), np.atleast_1d(np.asarray(q, float)))


@pytest.mark.parametrize("i,q,amp,phase", [(1, 0, 1, 0), (0, 1, 1, math.pi / 2)])
def test_iq_to_ap_axes(i, q, amp, phase):
    ap = iq_to_ap(_iq(i, q))
    assert ap.amplitude[0] == pytest.approx(amp)
    assert ap.phase[0] == pytest.approx(phase)


def test_iq_to_ap_matches_high_precision():
    mpmath.mp.dps = 40
    ap = iq_to_ap(_iq(3, 4))
    assert ap.amplitude[0] == pytest.approx(float(mpmath.sqrt(25)), abs=1e-15)
    assert ap.phase[0] == pytest.approx(float(mpmath.atan2(4, 3)), abs=1e-15)


@pytest.mark.parametrize("q", [0.0, -0.0])
def test_negative_real_axis_maps_to_plus_pi(q):
    assert iq_to_ap(_iq(-1.0, q)).phase[0] == math.pi


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected(bad):
    with pytest.raises(DataIntegrityError):
        iq_to_ap(_iq([1.0, bad], [0.0, 0.0]))


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, (2, 32), elements=finite))
def test_polar_round_trip(x):
    frame = IQFrame(x[0], x[1])
    ap = iq_to_ap(frame)
    assert np.all(ap.amplitude >= 0)
    assert np.all(np.abs(ap.phase) <= math.pi)
    back = ap_to_iq(ap)
    tol = 1e-6 * np.maximum(ap.amplitude, 1e-300)
    assert np.all(np.abs(back.i - x[0]) <= tol)
    assert np.all(np.abs(back.q - x[1]) <= tol)


def _norm_channel(values):
    v = np.asarray(values, float)
    return normalize(APFrame(v, np.linspace(-1, 1, v.size)))


def test_normalize_examples():
    out = _norm_channel([0, 1, 2, 4])
    np.testing.assert_allclose(out.channels[0], [0, 0.25, 0.5, 1.0])
    np.testing.assert_allclose(_norm_channel([-2, 0, 2]).channels[0], [0, 0.5, 1.0])
    assert out.degenerate == (False, False)


def test_constant_channel_is_zero_and_flagged():
    out = _norm_channel([3.5] * 6)
    assert np.all(out.channels[0] == 0)
    assert out.degenerate == (True, False)
    assert np.all(np.isfinite(out.channels))


channels = arrays(np.float64, (2, 16), elements=st.floats(-1e3, 1e3, allow_nan=False))


@given(channels)
def test_normalize_range_and_idempotence(x):
    once = normalize(APFrame(x[0], x[1]))
    assert np.all((once.channels >= 0) & (once.channels <= 1))
    for c in range(2):
        if np.ptp(x[c]) > 1e-9 * max(1.0, np.abs(x[c]).max()):
            assert once.channels[c].min() == 0 and once.channels[c].max() == pytest.approx(1.0)
    twice = normalize(APFrame(once.channels[0], once.channels[1]))
    for c in range(2):
        if not once.degenerate[c]:
            np.testing.assert_allclose(twice.channels[c], once.channels[c], atol=1e-12)


@given(channels, st.floats(1e-2, 1e2), st.floats(-1e2, 1e2))
def test_normalize_affine_invariance(x, a, b):
    x = x[:, :]
    if min(np.ptp(x[0]), np.ptp(x[1])) < 1e-3:
        return
    base = normalize(APFrame(x[0], x[1])).channels
    moved = normalize(APFrame(a * x[0] + b, a * x[1] + b)).channels
    np.testing.assert_allclose(moved, base, atol=1e-6)


def test_rrc_is_nyquist_after_matched_filtering():
    # RRC convolved with itself is a raised cosine: zero at nonzero symbol offsets.
    os_ = 64
    t = np.arange(-12 * os_, 12 * os_ + 1) / os_
    g = rrc_pulse(t)
    rc = np.convolve(g, g) / os_
    centre = len(rc) // 2
    peak = rc[centre]
    for k in range(1, 6):
        assert abs(rc[centre + k * os_]) < 5e-3 * peak
    assert peak == pytest.approx(1.0, rel=1e-2)


def test_rrc_singular_points_are_continuous():
    beta = 0.35
    ts = 1 / (4 * beta)
    assert rrc_pulse(np.array([ts]))[0] == pytest.approx(rrc_pulse(np.array([ts + 1e-7]))[0], rel=1e-5)
    assert rrc_pulse(np.array([0.0]))[0] == pytest.approx(rrc_pulse(np.array([1e-7]))[0], rel=1e-6)


def _spec(mod, snr=0.0, seed=0, **kw):
    return ScenarioSpec(Task.SS, mod, snr, seed=seed, **kw)


def test_zero_db_equal_powers():
    ratios = []
    for s in range(200):
        sig, noise = synth_components(_spec(Modulation.QPSK, 0.0, seed=s))
        ratios.append(np.mean(np.abs(sig) ** 2) / np.mean(np.abs(noise) ** 2))
    assert np.mean(ratios) == pytest.approx(1.0, rel=0.12)


def test_empirical_snr_over_1000_frames():
    ps = pn = 0.0
    for s in range(1000):
        sig, noise = synth_components(_spec(Modulation.QPSK, 10.0, seed=10_000 + s))
        ps += np.mean(np.abs(sig) ** 2)
        pn += np.mean(np.abs(noise) ** 2)
    assert 10 * math.log10(ps / pn) == pytest.approx(10.0, abs=0.5)


@pytest.mark.parametrize("mod", [m for m in Modulation])
def test_same_seed_same_frame(mod):
    kw = {"task": Task.AD} if mod is Modulation.INTERFERED else {}
    spec = ScenarioSpec(kw.get("task", Task.SS), mod, 3.0, seed=42)
    a, b = synth_frame(spec), synth_frame(spec)
    assert a.frame.i.tobytes() == b.frame.i.tobytes()
    assert a.frame.q.tobytes() == b.frame.q.tobytes()
    c = synth_frame(ScenarioSpec(spec.task, mod, 3.0, seed=43))
    assert c.frame.i.tobytes() != a.frame.i.tobytes()


def test_noise_only_has_no_signal():
    sig, noise = synth_components(_spec(Modulation.NOISE_ONLY, 20.0, seed=1))
    assert np.all(sig == 0)
    assert synth_frame(_spec(Modulation.NOISE_ONLY)).label == 0
    assert synth_frame(_spec(Modulation.BPSK)).label == 1


def test_interferer_adds_out_of_band_power():
    # The interferer sits above the primary band; compare upper-band energy.
    def upper_band_fraction(mod, seed):
        spec = ScenarioSpec(Task.AD, mod, 30.0, interference_bandwidth_ratio=1.5, seed=seed, N=1024)
        sig, _ = synth_components(spec)
        spec_mag = np.abs(np.fft.fft(sig)) ** 2
        f = np.fft.fftfreq(sig.size)
        return spec_mag[(f > 0.1) & (f < 0.3)].sum() / spec_mag.sum()

    clean = np.mean([upper_band_fraction(Modulation.QPSK, s) for s in range(20)])
    dirty = np.mean([upper_band_fraction(Modulation.INTERFERED, s) for s in range(20)])
    assert dirty > 5 * clean
    assert synth_frame(ScenarioSpec(Task.AD, Modulation.INTERFERED, seed=0)).label == 1


def test_bandwidth_ratio_narrows_spectrum():
    def occupied(bw):
        tot = np.zeros(1024)
        for s in range(20):
            sig, _ = synth_components(_spec(Modulation.QPSK, 30.0, seed=s, bandwidth_ratio=bw, N=1024))
            tot += np.abs(np.fft.fft(sig)) ** 2
        p = np.sort(tot)[::-1]
        return np.searchsorted(np.cumsum(p) / p.sum(), 0.99) / 1024

    assert occupied(0.5) < occupied(1.0) < occupied(2.0)
    assert occupied(1.0) == pytest.approx(1.35 / 8, abs=0.03)


def test_unknown_modulation_is_config_error():
    with pytest.raises(ConfigError):
        ScenarioSpec(Task.SS, "OFDM")
    with pytest.raises(ConfigError):
        ScenarioSpec(Task.AD, Modulation.INTERFERED, interference_bandwidth_ratio=2.5)
    with pytest.raises(ConfigError):
        ScenarioSpec(Task.WTC, Modulation.BPSK)

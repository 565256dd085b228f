import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from ms2d import phase as ph
from ms2d.phase import (PhaseError, PhaseModel, apply_phase, eval_phase_h, eval_phase_v,
                        optimize_phase_h, optimize_phase_v, phase_factor)

from helpers import TWO_PI, row_spectrum, transient

FREQS = [120e3, 260e3, 410e3, 555e3, 700e3, 880e3]
AMPS = [1.0, 0.7, 0.9, 0.5, 0.8, 0.6]
RATE = 2e6


def _wrap(x):
    return (np.asarray(x) + np.pi) % TWO_PI - np.pi


def _spectrum(coeffs=(0, 0, 0), sigma=0.0, seed=0):
    phases = [float(eval_phase_h(f, coeffs)) for f in FREQS]
    return row_spectrum(transient(FREQS, AMPS, phases, sigma=sigma, seed=seed))


# ------------------------------------------------------------- evaluation
def test_eval_examples():
    assert eval_phase_h(1e5, (0, 0, 0)) == 0
    assert eval_phase_h(1e5, (np.pi, 0, 0)) == np.pi
    assert eval_phase_h(1e5, (0, 1e-3, 1e-9)) == pytest.approx(110.0, rel=1e-14)
    assert eval_phase_v(2e4, (1.0, 1e-4)) == pytest.approx(3.0)


def test_model_rotations():
    m = PhaseModel((0, 0, 0), (0.3, -392 * TWO_PI / 250e3), 250e3)
    assert m.v_rotations == pytest.approx(392.0, rel=1e-12)
    with pytest.raises(PhaseError):
        PhaseModel((0, 0), (0, 0))
    with pytest.raises(PhaseError):
        PhaseModel((np.nan, 0, 0), (0, 0))


def test_apply_identity_and_quarter_turn():
    f = np.linspace(0, 1e6, 101)
    lor = 1.0 / (1.0 + ((f - 5e5) / 1e4) ** 2)
    assert np.array_equal(apply_phase(lor + 0j, f, lambda x: np.zeros_like(x)), lor + 0j)
    out = apply_phase(lor + 0j, f, np.full(f.size, np.pi / 2))
    assert np.max(np.abs(out.real)) < 1e-15 and np.allclose(out.imag, -lor)


def test_apply_length_mismatch():
    with pytest.raises(PhaseError):
        apply_phase(np.ones(4, complex), np.arange(5.0), lambda f: f)


def test_injected_phase_removed_exactly():
    # complex damped exponential on an exact bin: its DFT is real up to phi0
    n, rate, f0, phi0 = 4096, 1e6, 1000 * 1e6 / 4096, 2.3
    t = np.arange(n) / rate
    x = np.exp(1j * (TWO_PI * f0 * t + phi0)) * np.exp(-t / 1e-3)
    s = np.fft.fft(x)
    f = np.fft.fftfreq(n, 1 / rate)
    out = apply_phase(s, f, np.full(n, phi0))
    k = int(np.argmax(np.abs(out)))
    assert k == 1000
    assert abs(out[k].imag) <= 1e-6 * out[k].real


arrays = hnp.arrays(np.complex128, st.integers(1, 64),
                    elements=st.complex_numbers(max_magnitude=1e6, allow_nan=False))


@given(arrays, st.floats(-1e3, 1e3), st.floats(-1e-2, 1e-2))
def test_phase_preserves_magnitude_and_inverts(s, c0, c1):
    f = np.linspace(0, 5e4, s.size)
    out = apply_phase(s, f, lambda x: c0 + c1 * x)
    assert np.allclose(np.abs(out), np.abs(s), rtol=1e-12, atol=1e-300)
    back = apply_phase(out, f, lambda x: -(c0 + c1 * x))
    assert np.allclose(back, s, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(s).max()))


@given(st.integers(0, 2**32 - 1))
def test_h_and_v_commute(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 20)) + 1j * rng.normal(size=(12, 20))
    fh, fv = np.linspace(0, 1e6, 20), np.linspace(0, 2.5e5, 12)
    ch, cv = (0.4, 3e-5, 2e-11), (1.0, 7e-3)
    Ph, Pv = phase_factor(eval_phase_h(fh, ch))[None, :], phase_factor(eval_phase_v(fv, cv))[:, None]
    a = (X * Ph) * Pv
    b = (X * Pv) * Ph
    assert np.allclose(a, b, rtol=1e-12, atol=0)


# ----------------------------------------------------------- optimization
def test_already_phased_clean():
    s, f = _spectrum()
    res = optimize_phase_h(s, f)
    B = np.max(f)
    c0, c1, c2 = res.coeffs
    assert abs(_wrap(c0)) < 0.05
    assert abs(c1) * B < 0.05
    assert abs(c2) * B**2 < 0.1
    assert res.n_peaks >= 6
    for f0 in FREQS:
        assert np.min(np.abs(res.peak_freqs - f0)) < 100.0


def test_inject_and_recover_default_seeds():
    B = RATE / 2
    truth = (1.2, 2.5 * TWO_PI / B, -3.2 * TWO_PI / B**2)
    s, f = _spectrum(truth, sigma=0.02, seed=4)
    res = optimize_phase_h(s, f)
    resid = _wrap(eval_phase_h(FREQS, res.coeffs) - eval_phase_h(FREQS, truth))
    assert np.max(np.abs(resid)) < 0.1


def test_inject_and_recover_large_with_bracketing_seeds():
    B = RATE / 2
    truth = (0.3, -40.0 * TWO_PI / B, 180.0 * TWO_PI / B**2)
    s, f = _spectrum(truth, sigma=0.02, seed=5)
    res = optimize_phase_h(s, f, c1_range=(truth[1] - 3 * TWO_PI / B, truth[1] + 2 * TWO_PI / B),
                           c2_range=(truth[2] - 2 * TWO_PI / B**2, truth[2] + 3 * TWO_PI / B**2))
    resid = _wrap(eval_phase_h(FREQS, res.coeffs) - eval_phase_h(FREQS, truth))
    assert np.max(np.abs(resid)) < 0.1


def test_reported_objective_beats_every_grid_point():
    B = RATE / 2
    s, f = _spectrum((0.5, 1.5 * TWO_PI / B, -1.0 * TWO_PI / B**2), sigma=0.02)
    r1, r2 = (-2 * TWO_PI / B, 2 * TWO_PI / B), (-2 * TWO_PI / B**2, 2 * TWO_PI / B**2)
    res = optimize_phase_h(s, f, r1, r2)
    prep = ph.prepare_peaks(s, f)
    step1, step2 = (np.pi / 4) / prep.f_ref, (np.pi / 4) / prep.f_ref**2
    for c2 in ph._grid(r2, step2):
        for c1 in ph._grid(r1, step1):
            val = ph.phase_objective((ph._best_c0(prep, c1, c2), c1, c2), prep)
            assert res.objective <= val + 1e-15
    assert res.objective <= res.grid_objective


def test_objective_scale_invariant():
    s, f = _spectrum((0.5, 1e-6, 2e-12), sigma=0.01)
    p1, p2 = ph.prepare_peaks(s, f), ph.prepare_peaks(37.5 * s, f)
    for c in [(0, 0, 0), (0.5, 1e-6, 2e-12), (1.0, -3e-6, 0.0)]:
        assert ph.phase_objective(c, p1) == pytest.approx(ph.phase_objective(c, p2), rel=1e-12)
    a = optimize_phase_h(s, f).coeffs
    b = optimize_phase_h(37.5 * s, f).coeffs
    assert np.allclose(a, b, rtol=1e-6, atol=1e-12)


def test_noise_only_errors():
    x = np.random.default_rng(0).normal(size=8192)
    s, f = row_spectrum(x)
    with pytest.raises(PhaseError, match="too few peaks"):
        optimize_phase_h(s, f)


def test_narrow_span_errors():
    s, f = row_spectrum(transient([300e3, 310e3, 320e3], [1, 1, 1], [0, 0, 0]))
    with pytest.raises(PhaseError, match="too few peaks"):
        optimize_phase_h(s, f)


# ---------------------------------------------------------------- vertical
def _vscan(d, nus=(40e3, 110e3, 190e3), amps=(1.0, 0.8, 0.6), n=2048, dt1=2e-6, sigma=0.01,
           seed=0):
    t = np.arange(n) * dt1
    x = sum(a * 0.5 * (1 + np.cos(TWO_PI * nu * t + d[0] + d[1] * nu)) for nu, a in zip(nus, amps))
    if sigma:
        x = x + np.random.default_rng(seed).normal(0, sigma, n)
    w = np.sin(np.pi * (0.5 + 0.5 * np.arange(n) / (n - 1)))
    m = 4 * n
    s = np.fft.rfft(x * w, m)[:m // 2]
    return s, np.arange(m // 2) * (1 / dt1) / m


def test_v_already_phased():
    s, f = _vscan((0.0, 0.0))
    res = optimize_phase_v([s], f, band=(20e3, 250e3))
    assert abs(_wrap(res.coeffs[0])) < 0.05
    assert abs(res.coeffs[1]) * 250e3 < 0.1


def test_v_two_scans_joint():
    d = (0.8, 3.1 * TWO_PI / 250e3)
    s1, f = _vscan(d, sigma=0.05, seed=1)
    s2, _ = _vscan(d, amps=(0.3, 1.0, 0.9), sigma=0.05, seed=2)
    res = optimize_phase_v([s1, s2], f, band=(20e3, 250e3))
    nus = np.array([40e3, 110e3, 190e3])
    resid = _wrap(eval_phase_v(nus, res.coeffs) - eval_phase_v(nus, d))
    assert np.max(np.abs(resid)) < 0.1


def test_v_392_rotations():
    d1 = 392 * TWO_PI / 250e3
    s, f = _vscan((1.1, d1), n=4096)
    res = optimize_phase_v([s], f, d1_range=(d1 - 2.6 * TWO_PI / 250e3, d1 + 1.9 * TWO_PI / 250e3),
                           band=(20e3, 250e3))
    m = PhaseModel((0, 0, 0), res.coeffs, 250e3)
    assert abs(m.v_rotations - 392) <= 1


def test_v_all_zero():
    with pytest.raises(PhaseError, match="all-zero"):
        optimize_phase_v([np.zeros(64, complex)], np.arange(64.0))
    with pytest.raises(PhaseError):
        optimize_phase_v([], np.arange(4.0))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ms2d import denoise
from ms2d.denoise import DenoiseError, DenoiseSpec, cadzow

SEEDS = range(20)


def _clean(n=256, k=3, complex_=False):
    t = np.arange(n)
    ws, gs = [0.21, 0.77, 1.9, 2.6][:k], [0.004, 0.01, 0.002, 0.007][:k]
    if complex_:
        return sum(np.exp((-g + 1j * w) * t) for w, g in zip(ws, gs))
    return sum(np.exp(-g * t) * np.cos(w * t + i) for i, (w, g) in enumerate(zip(ws, gs)))


@pytest.mark.parametrize("complex_", [False, True])
def test_noiseless_preserved(complex_):
    x = _clean(complex_=complex_)
    rank = 3 if complex_ else 6
    y = cadzow(x, DenoiseSpec(True, rank, 1))
    assert y.shape == x.shape
    assert np.linalg.norm(y - x) <= 1e-6 * np.linalg.norm(x)


def test_noise_reduction_monte_carlo():
    x = _clean()
    amp = np.sqrt(np.mean(x**2))
    for seed in SEEDS:
        noise = np.random.default_rng(seed).normal(0, amp / 10, x.size)  # SNR 10
        y = cadzow(x + noise, DenoiseSpec(True, 6, 1))
        assert np.sqrt(np.mean((y - x) ** 2)) <= 0.5 * np.sqrt(np.mean(noise**2))


def test_rank_too_large():
    with pytest.raises(DenoiseError, match="rank too large"):
        cadzow(np.ones(64), DenoiseSpec(True, 32, 1))
    with pytest.raises(DenoiseError):
        DenoiseSpec(True, 0, 1)
    with pytest.raises(DenoiseError):
        DenoiseSpec(True, 2, 0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(16, 200))
def test_energy_never_increases(seed, rank, n):
    x = np.random.default_rng(seed).normal(size=n)
    if rank >= n // 2:
        return
    y = cadzow(x, DenoiseSpec(True, rank, 1))
    assert np.sqrt(np.mean(y**2)) <= np.sqrt(np.mean(x**2)) * (1 + 1e-9)


def test_contraction():
    x = _clean() + np.random.default_rng(3).normal(0, 0.1, 256)
    spec = DenoiseSpec(True, 6, 1)
    y1 = cadzow(x, spec)
    y2 = cadzow(y1, spec)
    assert np.linalg.norm(y2 - y1) < 0.1 * np.linalg.norm(y1 - x)


def test_operator_path_matches_dense(monkeypatch):
    x = _clean(600) + np.random.default_rng(1).normal(0, 0.05, 600)
    spec = DenoiseSpec(True, 6, 2)
    dense = cadzow(x, spec)
    monkeypatch.setattr(denoise, "DENSE_LIMIT", 0)
    sparse = cadzow(x, spec)
    assert np.allclose(sparse, dense, rtol=0, atol=1e-8 * np.max(np.abs(dense)))


def test_deterministic():
    x = np.random.default_rng(9).normal(size=300)
    spec = DenoiseSpec(True, 4, 2)
    assert np.array_equal(cadzow(x, spec), cadzow(x, spec))

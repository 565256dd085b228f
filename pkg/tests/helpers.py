"""Small signal builders shared by the unit tests."""

import numpy as np

from ms2d.calib import bin_frequencies
from ms2d.window import kv_window

TWO_PI = 2 * np.pi


def transient(freqs, amps, phases, n=8192, rate=2e6, tau=2e-3, sigma=0.0, seed=0):
    t = np.arange(n) / rate
    x = np.zeros(n)
    for f, a, p in zip(freqs, amps, phases):
        x += a * np.cos(TWO_PI * f * t + p)
    x *= np.exp(-t / tau)
    if sigma:
        x += np.random.default_rng(seed).normal(0, sigma, n)
    return x


def row_spectrum(x, zerofill=2, rate=2e6, window=True):
    """Windowed, zero-filled half spectrum and its frequency axis."""
    n = x.size
    w = kv_window(n, 0.25) if window else np.ones(n)
    m = n << zerofill
    s = np.fft.rfft(x * w, m)[:m // 2]
    return s, bin_frequencies(m // 2, rate)


def spectrum_from_array(path, arr, chunk=None, mode="absorption", rate_h=2e6, rate_v=5e5,
                        cal_h=None, cal_v=None, band_h=None, mz_max_v=0.0):
    """Wrap an in-memory array as an on-disk Spectrum2D."""
    from ms2d.spectrum import Spectrum2D
    from ms2d.store import create_dataset

    arr = np.asarray(arr, dtype=float)
    chunk = chunk or (min(8, arr.shape[0]), min(64, arr.shape[1]))
    h = create_dataset(arr.shape[0], arr.shape[1], "real-f64", chunk, path, "freq-freq")
    h.write_block(0, 0, arr)
    return Spectrum2D(h, rate_h, rate_v, mode, cal_h, cal_v, band_h, mz_max_v)


def raw_from_array(path, arr, chunk=(8, 64)):
    """Real time-time dataset holding ``arr``."""
    from ms2d.store import create_dataset

    arr = np.asarray(arr, dtype=float)
    chunk = (min(chunk[0], arr.shape[0]), min(chunk[1], arr.shape[1]))
    h = create_dataset(arr.shape[0], arr.shape[1], "real-f64", chunk, path, "time-time")
    h.write_block(0, 0, arr)
    return h


def hypercomplex_rr(x, w_h, w_v, zf_h, zf_v, phi_h, phi_v):
    """Brute-force RR plane of the phased hypercomplex 2D transform.

    All four planes (RR, RI, IR, II) come from explicit cosine/sine sums over
    both time axes; the phase rotation is then applied as the hypercomplex
    product with exp(-i phi_h) exp(-j phi_v) and the RR component returned.
    ``phi_h`` / ``phi_v`` are the phases at each kept bin.
    """
    x = np.asarray(x, dtype=float) * np.outer(w_v, w_h)
    n1, n2 = x.shape
    m1, m2 = n1 << zf_v, n2 << zf_h
    k1, k2 = np.arange(m1 // 2), np.arange(m2 // 2)
    a1 = TWO_PI * np.outer(k1, np.arange(n1)) / m1
    a2 = TWO_PI * np.outer(np.arange(n2), k2) / m2
    c1, s1, c2, s2 = np.cos(a1), np.sin(a1), np.cos(a2), np.sin(a2)
    # exp(-i a) = cos a - i sin a in each dimension
    rr = c1 @ x @ c2
    ir = -(c1 @ x @ s2)
    ri = -(s1 @ x @ c2)
    ii = s1 @ x @ s2
    ch, sh = np.cos(phi_h)[None, :], np.sin(phi_h)[None, :]
    cv, sv = np.cos(phi_v)[:, None], np.sin(phi_v)[:, None]
    return rr * ch * cv + ir * sh * cv + ri * ch * sv + ii * sh * sv

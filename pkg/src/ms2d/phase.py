"""Phase models and phase-coefficient optimization.

Horizontal (fragment) phase is quadratic in frequency, vertical (precursor)
phase is linear.  Coefficients are kept unwrapped; wrapping only happens
implicitly through ``exp(-i phi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .analyze import Scan1D, noise_sigma, pick_peaks_1d

TWO_PI = 2.0 * np.pi


class PhaseError(ValueError):
    pass


@dataclass
class PhaseModel:
    h_coeffs: tuple = (0.0, 0.0, 0.0)  # rad, rad/Hz, rad/Hz^2
    v_coeffs: tuple = (0.0, 0.0)  # rad, rad/Hz
    v_bandwidth: float = 0.0  # Hz, vertical band used for v_rotations

    def __post_init__(self):
        self.h_coeffs = tuple(float(c) for c in self.h_coeffs)
        self.v_coeffs = tuple(float(c) for c in self.v_coeffs)
        if len(self.h_coeffs) != 3 or len(self.v_coeffs) != 2:
            raise PhaseError("PhaseModel needs 3 horizontal and 2 vertical coefficients")
        if not all(np.isfinite(self.h_coeffs + self.v_coeffs)):
            raise PhaseError("phase coefficients must be finite")

    @property
    def v_rotations(self) -> float:
        """Total phase turns across the vertical band."""
        return abs(self.v_coeffs[1]) * self.v_bandwidth / TWO_PI


def eval_phase_h(f, m) -> np.ndarray:
    c0, c1, c2 = m.h_coeffs if isinstance(m, PhaseModel) else m
    f = np.asarray(f, dtype=float)
    return c0 + f * (c1 + c2 * f)


def eval_phase_v(nu, m) -> np.ndarray:
    d0, d1 = m.v_coeffs if isinstance(m, PhaseModel) else m
    nu = np.asarray(nu, dtype=float)
    return d0 + d1 * nu


def phase_factor(phi) -> np.ndarray:
    """exp(-i phi)."""
    phi = np.asarray(phi, dtype=float)
    return np.cos(phi) - 1j * np.sin(phi)


def apply_phase(spectrum, freq_axis, phase_fn) -> np.ndarray:
    """out[k] = in[k] * exp(-i phi(f[k])).

    ``phase_fn`` is a callable of frequency or an array of phase values.
    """
    spectrum = np.asarray(spectrum)
    freq_axis = np.asarray(freq_axis, dtype=float)
    if spectrum.shape[-1] != freq_axis.shape[-1]:
        raise PhaseError(f"spectrum length {spectrum.shape[-1]} != axis length {freq_axis.shape[-1]}")
    phi = phase_fn(freq_axis) if callable(phase_fn) else np.asarray(phase_fn, dtype=float)
    if phi.shape != freq_axis.shape:
        raise PhaseError("phase array does not match the frequency axis")
    return spectrum * phase_factor(phi)


# ------------------------------------------------------------ optimization
@dataclass
class _Prepared:
    f_peak: np.ndarray
    s_peak: np.ndarray
    f_seg: np.ndarray
    s_seg: np.ndarray
    starts: np.ndarray
    norm: float
    f_ref: float


@dataclass
class PhaseOptResult:
    coeffs: tuple
    objective: float
    grid_objective: float
    n_peaks: int
    peak_freqs: np.ndarray = field(repr=False)


def interp_complex(spectrum, x):
    """Three-point (quadratic) interpolation of a complex spectrum at
    fractional bin x.  Used to read each line at its centroid rather than at
    the nearest bin, where the dispersion component would bias the phase."""
    i = int(np.clip(np.rint(x), 1, spectrum.size - 2))
    d = x - i
    a, b, c = spectrum[i - 1], spectrum[i], spectrum[i + 1]
    return b + 0.5 * d * (c - a) + 0.5 * d * d * (c - 2.0 * b + a)


def _drop_sidelobes(peaks, exclusion_fwhm):
    """Tallest first; discard maxima within ``exclusion_fwhm`` widths of a kept
    taller peak (truncation wiggles carry their own, unrelated phase)."""
    kept = []
    for p in peaks:
        if all(abs(p.centroid_bin - k.centroid_bin) > exclusion_fwhm * max(k.fwhm_bins, 1.0)
               for k in kept):
            kept.append(p)
    return kept


def prepare_peaks(spectrum, freq_axis, threshold_sigma=6.0, band=None, lobe_fwhm=3.0,
                  min_peaks=3, min_span=0.5, exclusion_fwhm=8.0) -> _Prepared:
    """Locate magnitude peaks and cut the +-3 FWHM segments the objective uses."""
    spectrum = np.asarray(spectrum, dtype=complex)
    freq_axis = np.asarray(freq_axis, dtype=float)
    if spectrum.shape != freq_axis.shape:
        raise PhaseError("spectrum and frequency axis differ in length")
    mag = np.abs(spectrum)
    if not np.any(mag > 0):
        raise PhaseError("all-zero input")
    if band is None:
        lo_i, hi_i = 1, mag.size
        band_width = freq_axis[-1] - freq_axis[1]
    else:
        lo_i = int(np.searchsorted(freq_axis, band[0]))
        hi_i = int(np.searchsorted(freq_axis, band[1], side="right"))
        band_width = band[1] - band[0]
    scan = Scan1D(mag, freq_axis, None, "phase", 1, "magnitude")
    sigma = noise_sigma(mag[lo_i:hi_i])
    peaks = pick_peaks_1d(scan, threshold_sigma, noise=sigma, band=(lo_i, hi_i))
    peaks = _drop_sidelobes(peaks, exclusion_fwhm)
    if len(peaks) < min_peaks:
        raise PhaseError(f"too few peaks: {len(peaks)} above {threshold_sigma} sigma "
                         f"(need {min_peaks})")
    pf = np.array([p.centroid_hz for p in peaks])
    if min_span > 0 and (pf.max() - pf.min()) < min_span * band_width:
        raise PhaseError(f"too few peaks: detected peaks span {pf.max() - pf.min():.4g} Hz, "
                         f"less than {min_span:.0%} of the band")
    s_peak = np.array([interp_complex(spectrum, p.centroid_bin) for p in peaks])
    segs_f, segs_s, starts = [], [], []
    pos = 0
    for p in peaks:
        w = max(2, int(np.ceil(lobe_fwhm * p.fwhm_bins)))
        lo, hi = max(0, p.index - w), min(mag.size, p.index + w + 1)
        segs_f.append(freq_axis[lo:hi])
        segs_s.append(spectrum[lo:hi])
        starts.append(pos)
        pos += hi - lo
    return _Prepared(pf, s_peak, np.concatenate(segs_f),
                     np.concatenate(segs_s), np.asarray(starts), float(np.abs(s_peak).sum()),
                     float(np.max(np.abs(freq_axis[lo_i:hi_i]))))


def phase_objective(coeffs, prep: _Prepared, lam=1.0) -> float:
    """Negative of [sum of corrected real peak heights minus lam * sum of the
    deepest negative real excursion around each peak], normalized by the total
    magnitude so it does not depend on spectrum scale.  Lower is better."""
    c = tuple(coeffs) + (0.0,) * (3 - len(coeffs))
    heights = np.real(prep.s_peak * phase_factor(eval_phase_h(prep.f_peak, c)))
    seg = np.real(prep.s_seg * phase_factor(eval_phase_h(prep.f_seg, c)))
    deepest = np.minimum.reduceat(seg, prep.starts)
    neg = np.maximum(0.0, -deepest)
    return float(-(heights.sum() - lam * neg.sum()) / prep.norm)


def _best_c0(prep, c1, c2):
    rot = prep.s_peak * phase_factor(prep.f_peak * (c1 + c2 * prep.f_peak))
    return float(np.angle(rot.sum()))


def _grid(rng, step):
    lo, hi = rng
    if hi < lo:
        raise PhaseError(f"empty seed range {rng}")
    n = max(1, int(np.ceil((hi - lo) / step)) + 1)
    return np.linspace(lo, hi, n) if n > 1 else np.array([0.5 * (lo + hi)])


def _optimize(prep: _Prepared, c1_range, c2_range, degree, lam=1.0, xatol=1e-4):
    B = prep.f_ref
    c1s = _grid(c1_range, (np.pi / 4) / B)
    c2s = _grid(c2_range, (np.pi / 4) / B**2) if degree == 2 else np.array([0.0])
    best = (np.inf, None)
    for c2 in c2s:
        for c1 in c1s:
            c = (_best_c0(prep, c1, c2), c1, c2)
            val = phase_objective(c, prep, lam)
            if val < best[0]:
                best = (val, c)
    grid_val, c_grid = best
    if not np.isfinite(grid_val):
        raise PhaseError("optimizer: non-finite objective")
    scale = np.array([1.0, B, B * B])[:degree + 1]

    def fun(x):
        c = np.zeros(3)
        c[:degree + 1] = x / scale
        return phase_objective(c, prep, lam)

    x0 = np.asarray(c_grid[:degree + 1]) * scale
    res = minimize(fun, x0, method="Nelder-Mead",
                   options={"xatol": xatol, "fatol": 1e-12, "maxiter": 4000 * (degree + 1),
                            "initial_simplex": x0 + np.vstack([np.zeros(degree + 1),
                                                               0.3 * np.eye(degree + 1)])})
    if not np.isfinite(res.fun):
        raise PhaseError("optimizer: non-finite objective")
    if res.fun <= grid_val:
        c = np.zeros(3)
        c[:degree + 1] = res.x / scale
        val = float(res.fun)
    else:
        c, val = np.asarray(c_grid, dtype=float), grid_val
    return tuple(float(v) for v in c), val, grid_val


def default_seed_range(f_ref, rotations=4.0, power=1):
    """+-``rotations`` turns at the band edge for a coefficient of ``power``."""
    half = rotations * TWO_PI / f_ref**power
    return (-half, half)


def optimize_phase_h(spectrum, freq_axis, c1_range=None, c2_range=None, band=None,
                     threshold_sigma=6.0, lam=1.0) -> PhaseOptResult:
    """Fit (c0, c1, c2) so that the corrected real part shows tall, positive
    lines with shallow negative lobes.

    Grid search over the (c1, c2) seed ranges with c0 solved in closed form at
    each node, then Nelder-Mead refinement.  The grid step keeps the phase
    change at the band edge <= pi/4 so no optimum falls between nodes.
    """
    prep = prepare_peaks(spectrum, freq_axis, threshold_sigma, band)
    B = prep.f_ref
    c1_range = c1_range if c1_range is not None else default_seed_range(B, power=1)
    c2_range = c2_range if c2_range is not None else default_seed_range(B, power=2)
    c, val, gval = _optimize(prep, c1_range, c2_range, 2, lam)
    return PhaseOptResult(c, val, gval, len(prep.f_peak), prep.f_peak)


def optimize_phase_v(scans, freq_axis, d1_range=None, band=None, threshold_sigma=6.0,
                     lam=1.0, min_peaks=1) -> PhaseOptResult:
    """Linear (d0, d1) fit on the elementwise sum of precursor scans."""
    scans = [np.asarray(s, dtype=complex) for s in scans]
    if not scans:
        raise PhaseError(">= 1 scan required")
    total = scans[0].copy()
    for s in scans[1:]:
        if s.shape != total.shape:
            raise PhaseError("scans differ in length")
        total += s
    if not np.any(total != 0):
        raise PhaseError("all-zero input")
    prep = prepare_peaks(total, freq_axis, threshold_sigma, band, min_peaks=min_peaks, min_span=0.0)
    d1_range = d1_range if d1_range is not None else default_seed_range(prep.f_ref, power=1)
    c, val, gval = _optimize(prep, d1_range, (0.0, 0.0), 1, lam)
    return PhaseOptResult((c[0], c[1]), val, gval, len(prep.f_peak), prep.f_peak)

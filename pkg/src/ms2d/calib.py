"""Frequency <-> m/z conversion, m/z = A/f + B/f^2.

Vertical (precursor) frequencies are modulation frequencies; the cyclotron
frequency used for conversion is ``modulation + offset`` with offset >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Calibration:
    A: float  # Hz*Th
    B: float = 0.0  # Hz^2*Th
    dimension: str = "horizontal"
    modulation_offset: float = 0.0  # Hz, vertical only

    def __post_init__(self):
        if not self.A > 0:
            raise CalibrationError(f"A must be positive, got {self.A}")
        if self.dimension not in ("horizontal", "vertical"):
            raise CalibrationError(f"unknown dimension {self.dimension!r}")
        if self.modulation_offset < 0:
            raise CalibrationError("modulation offset must be >= 0")
        if self.dimension == "horizontal" and self.modulation_offset != 0:
            raise CalibrationError("modulation offset applies to the vertical dimension only")

    @property
    def f_turnover(self) -> float:
        """Cyclotron frequency below which m/z stops decreasing in f (B < 0 only)."""
        return -2.0 * self.B / self.A if self.B < 0 else 0.0

    def cyclotron(self, f):
        f = np.asarray(f, dtype=float)
        return f + self.modulation_offset if self.dimension == "vertical" else f


def freq_to_mz(f, cal: Calibration):
    fc = cal.cyclotron(f)
    if np.any(fc <= 0):
        raise CalibrationError("frequency (after offset) must be positive")
    out = cal.A / fc + cal.B / (fc * fc)
    return out if out.ndim else float(out)


def mz_to_freq(mz, cal: Calibration):
    """Invert m/z = A u + B u^2 for u = 1/f.

    The root continuous with B -> 0 is u = 2 mz / (A + sqrt(A^2 + 4 B mz)),
    written in the cancellation-free form.
    """
    mz = np.asarray(mz, dtype=float)
    if np.any(mz <= 0):
        raise CalibrationError("m/z must be positive")
    disc = cal.A * cal.A + 4.0 * cal.B * mz
    if np.any(disc < 0):
        raise CalibrationError("no real root: m/z beyond the calibration turnover")
    u = 2.0 * mz / (cal.A + np.sqrt(disc))
    f = 1.0 / u
    if cal.dimension == "vertical":
        f = f - cal.modulation_offset
        if np.any(f <= 0):
            raise CalibrationError("m/z maps below the modulation offset (no positive modulation frequency)")
    return f if f.ndim else float(f)


@dataclass
class CalibrationFit:
    cal: Calibration
    residuals_ppm: np.ndarray


def fit_calibration(refs, dimension="horizontal", modulation_offset=0.0) -> CalibrationFit:
    """Least squares for (A, B) from (frequency, m/z) pairs.

    Solves mz*f' = A + B/f' in the cyclotron frequency f'.  Two references give
    the exact interpolant.
    """
    refs = np.asarray(refs, dtype=float)
    if refs.ndim != 2 or refs.shape[1] != 2 or refs.shape[0] < 2:
        raise CalibrationError(">= 2 references required")
    f = refs[:, 0] + (modulation_offset if dimension == "vertical" else 0.0)
    mz = refs[:, 1]
    if np.any(f <= 0) or np.any(mz <= 0):
        raise CalibrationError("reference frequencies and m/z must be positive")
    if np.unique(f).size < 2:
        raise CalibrationError("degenerate references: need >= 2 distinct frequencies")
    # scale columns to keep the system well conditioned
    s = np.median(f)
    M = np.column_stack([np.ones_like(f), s / f])
    coef, *_ = np.linalg.lstsq(M, mz * f, rcond=None)
    A, B = float(coef[0]), float(coef[1] * s)
    cal = Calibration(A, B, dimension, modulation_offset if dimension == "vertical" else 0.0)
    pred = A / f + B / (f * f)
    return CalibrationFit(cal, (pred - mz) / mz * 1e6)


def bin_frequencies(n_bins: int, sample_rate: float) -> np.ndarray:
    """Frequencies of the half-spectrum bins: k * rate / (2 n_bins)."""
    return np.arange(n_bins) * (sample_rate / (2.0 * n_bins))


def mz_axis(freqs, cal: Calibration) -> np.ndarray:
    """m/z per bin; NaN where the conversion is undefined or non-monotone
    (zero frequency, or below the B<0 turnover)."""
    fc = cal.cyclotron(freqs)
    out = np.full(fc.shape, np.nan)
    ok = fc > max(cal.f_turnover, 0.0)
    out[ok] = cal.A / fc[ok] + cal.B / (fc[ok] * fc[ok])
    return out


def make_axes(params, dims, cals):
    """Per-bin m/z axes for a processed spectrum of shape ``dims`` = (n_v, n_h).

    ``cals`` is (horizontal, vertical).  Bins without a valid m/z are NaN.
    Returns (h_mz, v_mz, h_hz, v_hz).
    """
    cal_h, cal_v = cals
    if cal_h is None or cal_v is None:
        raise CalibrationError("calibrations required for both dimensions")
    n_v, n_h = dims
    h_hz = bin_frequencies(n_h, params.sample_rate_t2)
    v_hz = bin_frequencies(n_v, params.sample_rate_t1)
    return mz_axis(h_hz, cal_h), mz_axis(v_hz, cal_v), h_hz, v_hz

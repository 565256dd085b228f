"""Scan extraction, peak picking, SNR and resolving power."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

MAD_SCALE = 1.4826


class AnalysisError(ValueError):
    pass


@dataclass
class Scan1D:
    values: np.ndarray
    hz: np.ndarray
    mz: np.ndarray | None = None
    origin: str = "fragment-scan"
    rows_summed: int = 1
    mode: str = "absorption"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.hz = np.asarray(self.hz, dtype=float)
        if self.values.shape != self.hz.shape:
            raise AnalysisError("scan values and axis differ in length")
        if self.mz is not None and np.shape(self.mz) != self.values.shape:
            raise AnalysisError("scan values and m/z axis differ in length")


@dataclass
class Peak:
    index: int
    centroid_bin: float
    centroid_hz: float
    centroid_mz: float
    height: float
    fwhm_bins: float
    fwhm_hz: float
    fwhm_mz: float
    snr: float

    @property
    def resolving_power(self) -> float:
        """centroid / FWHM, in m/z when calibrated, otherwise in Hz."""
        if np.isfinite(self.centroid_mz) and self.fwhm_mz > 0:
            return self.centroid_mz / self.fwhm_mz
        return self.centroid_hz / self.fwhm_hz if self.fwhm_hz > 0 else np.nan


@dataclass
class Peak2D:
    row: int
    col: int
    height: float
    bin_h: float
    bin_v: float
    hz_h: float
    hz_v: float
    mz_h: float
    mz_v: float
    fwhm_h_bins: float
    fwhm_v_bins: float
    fwhm_h_mz: float
    fwhm_v_mz: float
    snr_h: float
    snr_v: float

    @property
    def r_h(self) -> float:
        return self.mz_h / self.fwhm_h_mz if self.fwhm_h_mz > 0 else np.nan

    @property
    def r_v(self) -> float:
        return self.mz_v / self.fwhm_v_mz if self.fwhm_v_mz > 0 else np.nan


# ------------------------------------------------------------------ noise
def quiet_region(values, parts=8) -> tuple[int, int]:
    """The lowest-variance of ``parts`` equal segments."""
    n = len(values)
    if n < parts:
        return 0, n
    edges = np.linspace(0, n, parts + 1).astype(int)
    var = [np.var(values[edges[k]:edges[k + 1]]) for k in range(parts)]
    k = int(np.argmin(var))
    return int(edges[k]), int(edges[k + 1])


def noise_sigma(values, region=None) -> float:
    """1.4826 * median |x| over ``region`` (auto: quiet eighth).

    Deviations are taken about the zero baseline, not the median, so a
    rectified (magnitude) noise floor counts in full.
    """
    values = np.asarray(values, dtype=float)
    lo, hi = quiet_region(values) if region is None else region
    seg = values[lo:hi]
    if seg.size == 0:
        raise AnalysisError("empty noise region")
    return MAD_SCALE * float(np.median(np.abs(seg)))


# ------------------------------------------------------------- 1D helpers
def _parabola(a, b, c):
    """Vertex offset in (-0.5, 0.5) and vertex height of the parabola through
    (-1, a), (0, b), (1, c)."""
    den = a - 2.0 * b + c
    if den >= 0:
        return 0.0, b
    d = 0.5 * (a - c) / den
    return d, b - 0.25 * (a - c) * d


def _half_crossings(y, i, level):
    """Fractional positions where y falls below ``level`` left and right of i."""
    n = len(y)
    j = i
    while j > 0 and y[j - 1] >= level:
        j -= 1
    if j == 0:
        left = 0.0
    else:
        left = (j - 1) + (level - y[j - 1]) / (y[j] - y[j - 1])
    k = i
    while k < n - 1 and y[k + 1] >= level:
        k += 1
    if k == n - 1:
        right = float(n - 1)
    else:
        right = k + (y[k] - level) / (y[k] - y[k + 1])
    return left, right


def _interp_axis(axis, x):
    """Axis value at fractional bin x (linear)."""
    if axis is None:
        return np.nan
    i = int(np.clip(np.floor(x), 0, len(axis) - 2))
    t = x - i
    return float(axis[i] * (1 - t) + axis[i + 1] * t)


def local_maxima_1d(y, threshold):
    """Indices with y[i] > y[i-1], y[i] >= y[i+1], y[i] > threshold.

    On a flat top the lowest index wins.
    """
    y = np.asarray(y)
    if y.size < 3:
        return np.empty(0, dtype=int)
    mid = y[1:-1]
    mask = (mid > y[:-2]) & (mid >= y[2:]) & (mid > threshold)
    return np.nonzero(mask)[0] + 1


def centroid_and_width(y, i, mode):
    """Parabolic centroid (bins), interpolated height and FWHM (bins) of the
    maximum at i.  Magnitude lines are centroided on y^2.  A maximum on the
    first or last sample has no parabola; it is reported on-bin."""
    if i == 0 or i == len(y) - 1:
        left, right = _half_crossings(y, i, 0.5 * y[i])
        return float(i), y[i], left, right
    a, b, c = y[i - 1], y[i], y[i + 1]
    if mode == "magnitude":
        d, _ = _parabola(a * a, b * b, c * c)
    else:
        d, _ = _parabola(a, b, c)
    _, h = _parabola(a, b, c)
    left, right = _half_crossings(y, i, 0.5 * h)
    return i + d, h, left, right


def pick_peaks_1d(scan: Scan1D, threshold_sigma=6.0, noise=None, noise_region=None,
                  band=None) -> list[Peak]:
    """Peaks above ``threshold_sigma`` noise, ordered by height then centroid."""
    y = scan.values
    if y.size < 5:
        raise AnalysisError("scan length >= 5 required")
    lo, hi = band if band is not None else (0, y.size)
    sigma = noise_sigma(y, noise_region) if noise is None else float(noise)
    peak_max = float(np.max(np.abs(y[lo:hi]))) if hi > lo else 0.0
    if peak_max == 0.0:
        return []
    if sigma <= 0.0:
        # noiseless input: machine-precision floor
        sigma = np.finfo(float).eps * peak_max
    idx = local_maxima_1d(y[max(lo - 1, 0):min(hi + 1, y.size)], threshold_sigma * sigma)
    idx = idx + max(lo - 1, 0)
    idx = idx[(idx >= max(lo, 1)) & (idx < min(hi, y.size - 1))]
    peaks = []
    for i in idx:
        cbin, h, left, right = centroid_and_width(y, int(i), scan.mode)
        c_mz = _interp_axis(scan.mz, cbin)
        fwhm_mz = abs(_interp_axis(scan.mz, left) - _interp_axis(scan.mz, right))
        peaks.append(Peak(
            index=int(i), centroid_bin=cbin,
            centroid_hz=_interp_axis(scan.hz, cbin), centroid_mz=c_mz,
            height=h, fwhm_bins=right - left,
            fwhm_hz=abs(_interp_axis(scan.hz, right) - _interp_axis(scan.hz, left)),
            fwhm_mz=fwhm_mz, snr=h / sigma,
        ))
    peaks.sort(key=lambda p: (-p.height, p.centroid_bin))
    return peaks


def measure_snr(scan: Scan1D, peak: Peak, noise_region, peaks=None) -> float:
    """height / (1.4826 * median |x|) over ``noise_region``.

    The region must stay clear of +-5 FWHM around ``peak`` and any of ``peaks``.
    """
    lo, hi = noise_region
    if not 0 <= lo < hi <= scan.values.size:
        raise AnalysisError(f"noise region {noise_region} outside the scan")
    for p in [peak] + list(peaks or []):
        half = 5.0 * max(p.fwhm_bins, 1.0)
        if lo < p.centroid_bin + half and hi > p.centroid_bin - half:
            raise AnalysisError(f"noise region {noise_region} overlaps the peak at bin "
                                f"{p.centroid_bin:.1f} (+-5 FWHM)")
    sigma = noise_sigma(scan.values, (lo, hi))
    if sigma <= 0:
        raise AnalysisError("SNR undefined: zero noise")
    return peak.height / sigma


# ------------------------------------------------------------ extraction
def _nearest_bin(axis, target, what):
    ok = np.isfinite(axis)
    if not ok.any():
        raise AnalysisError(f"no calibrated {what} axis")
    lo, hi = np.nanmin(axis), np.nanmax(axis)
    if not lo <= target <= hi:
        raise AnalysisError(f"{what} m/z {target} out of band [{lo:.4f}, {hi:.4f}]")
    return int(np.nanargmin(np.where(ok, np.abs(axis - target), np.nan)))


def extract_fragment_scan(spec, precursor_mz: float, n_rows: int = 1) -> Scan1D:
    """Sum of the ``n_rows`` rows centred on the vertical bin nearest ``precursor_mz``."""
    if n_rows < 1 or n_rows % 2 == 0:
        raise AnalysisError("n_rows must be a positive odd count")
    center = _nearest_bin(spec.v_mz, precursor_mz, "precursor")
    half = n_rows // 2
    r0, r1 = center - half, center + half + 1
    if r0 < 0 or r1 > spec.data.n_rows:
        raise AnalysisError("summed rows extend past the vertical axis")
    block = spec.data.read_block(r0, r1, 0, spec.data.n_cols)
    values = block[0].copy()
    for k in range(1, n_rows):
        values += block[k]
    return Scan1D(values, spec.h_hz, spec.h_mz, "fragment-scan", n_rows, spec.mode)


def extract_precursor_scan(spec, fragment_mz: float) -> Scan1D:
    col = _nearest_bin(spec.h_mz, fragment_mz, "fragment")
    return Scan1D(spec.data.read_col(col), spec.v_hz, spec.v_mz, "precursor-scan", 1, spec.mode)


def autocorrelation_rows(spec):
    """For every column, the row whose precursor m/z is nearest the column's
    fragment m/z, or -1 where the locus leaves the grid."""
    h_mz, v_mz = spec.h_mz, spec.v_mz
    if h_mz is None or v_mz is None:
        raise AnalysisError("autocorrelation needs both calibrations")
    rows = np.full(h_mz.size, -1, dtype=np.int64)
    ok_v = np.nonzero(np.isfinite(v_mz))[0]
    if ok_v.size < 2:
        return rows
    vv = v_mz[ok_v]  # decreasing in row
    lo, hi = vv.min(), vv.max()
    half_lo = 0.5 * abs(vv[-1] - vv[-2])
    half_hi = 0.5 * abs(vv[1] - vv[0])
    cols = np.nonzero(np.isfinite(h_mz) & (h_mz >= lo - half_lo) & (h_mz <= hi + half_hi))[0]
    if cols.size:
        asc = vv[::-1]
        pos = np.searchsorted(asc, h_mz[cols])
        pos = np.clip(pos, 1, asc.size - 1)
        left, right = asc[pos - 1], asc[pos]
        pick = np.where(np.abs(h_mz[cols] - left) <= np.abs(right - h_mz[cols]), pos - 1, pos)
        rows[cols] = ok_v[::-1][pick]
    return rows


def extract_autocorrelation(spec) -> Scan1D:
    """Values along fragment m/z == precursor m/z (nearest vertical bin per column).

    Columns where the locus falls outside the vertical axis are zero and a
    warning is issued.
    """
    rows = autocorrelation_rows(spec)
    n_cols = spec.data.n_cols
    values = np.zeros(n_cols)
    h_mz = spec.h_mz
    clipped = int(np.count_nonzero((rows < 0) & np.isfinite(h_mz)))
    if clipped:
        warnings.warn(f"autocorrelation locus leaves the grid for {clipped} columns; set to 0",
                      stacklevel=2)
    cols = np.nonzero(rows >= 0)[0]
    if cols.size:
        # each row maps to a contiguous run of columns
        breaks = np.nonzero(np.diff(rows[cols]) != 0)[0] + 1
        for run in np.split(cols, breaks):
            r = int(rows[run[0]])
            values[run] = spec.data.read_block(r, r + 1, int(run[0]), int(run[-1]) + 1)[0]
    scan_mz = np.where(rows >= 0, h_mz, np.nan)
    return Scan1D(values, spec.h_hz, scan_mz, "autocorrelation", 1, spec.mode)


# --------------------------------------------------------------- 2D picker
def local_maxima_2d(block, threshold):
    """8-neighbour maxima of the interior of ``block`` (one-sample halo on every
    side).  Ties go to the lower row-major index: a sample must exceed
    neighbours before it and be >= neighbours after it."""
    c = block[1:-1, 1:-1]
    mask = c > threshold
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = block[1 + dr:block.shape[0] - 1 + dr, 1 + dc:block.shape[1] - 1 + dc]
            if dr < 0 or (dr == 0 and dc < 0):
                mask &= c > nb
            else:
                mask &= c >= nb
    r, q = np.nonzero(mask)
    return r, q


def _segment_fwhm(read, center, n, mode, span=32):
    """Centroid and half-height crossings (absolute bins) along one axis.

    ``read(lo, hi)`` returns samples [lo, hi); the window grows until both
    crossings are inside it.
    """
    while True:
        lo, hi = max(0, center - span), min(n, center + span + 1)
        y = read(lo, hi)
        i = center - lo
        cbin, h, left, right = centroid_and_width(y, i, mode)
        inside_l = left > 0 or lo == 0
        inside_r = right < len(y) - 1 or hi == n
        if (inside_l and inside_r) or span >= n:
            return cbin + lo, h, left + lo, right + lo
        span *= 4


def global_noise(spec, rows=None, cols=None, max_rows=256) -> float:
    """Median over rows of the per-row in-band noise estimate."""
    r0, r1 = rows if rows is not None else spec.row_band()
    c0, c1 = cols if cols is not None else spec.col_band()
    step = max(1, (r1 - r0) // max_rows)
    sig = [noise_sigma(spec.data.read_block(r, r + 1, c0, c1)[0]) for r in range(r0, r1, step)]
    return float(np.median(sig))


def pick_peaks_2d(spec, threshold_sigma=6.0, noise=None, rows_per_block=64,
                  rows=None, cols=None) -> list[Peak2D]:
    """8-neighbour local maxima above ``threshold_sigma`` noise, streamed in row
    blocks with a one-row halo so the result does not depend on blocking."""
    h = spec.data
    r0, r1 = rows if rows is not None else spec.row_band()
    c0, c1 = cols if cols is not None else spec.col_band()
    sigma = global_noise(spec, (r0, r1), (c0, c1)) if noise is None else float(noise)
    if sigma <= 0:
        # noiseless spectrum: machine-precision floor relative to the largest value
        peak_max = 0.0
        for b0 in range(r0, r1, rows_per_block):
            blk = h.read_block(b0, min(r1, b0 + rows_per_block), c0, c1)
            peak_max = max(peak_max, float(np.max(np.abs(blk))))
        if peak_max == 0:
            return []
        sigma = np.finfo(float).eps * peak_max
    thr = threshold_sigma * sigma
    h_mz, v_mz, h_hz, v_hz = spec.h_mz, spec.v_mz, spec.h_hz, spec.v_hz
    lo_c, hi_c = max(c0 - 1, 0), min(c1 + 1, h.n_cols)
    found = []
    for b0 in range(r0, r1, rows_per_block):
        b1 = min(r1, b0 + rows_per_block)
        lo_r, hi_r = max(b0 - 1, 0), min(b1 + 1, h.n_rows)
        blk = h.read_block(lo_r, hi_r, lo_c, hi_c)
        # pad missing halo with -inf so edge samples can still qualify
        pad = ((b0 - lo_r == 0) * 1, (hi_r - b1 == 0) * 1)
        padc = ((c0 - lo_c == 0) * 1, (hi_c - c1 == 0) * 1)
        blk = np.pad(blk, (pad, padc), constant_values=-np.inf)
        rr, cc = local_maxima_2d(blk, thr)
        rr = rr + b0
        cc = cc + c0
        for r, c in zip(rr, cc):
            found.append((int(r), int(c)))

    peaks = []
    for r, c in found:
        row_read = lambda lo, hi, r=r: h.read_block(r, r + 1, lo, hi)[0]
        col_read = lambda lo, hi, c=c: h.read_block(lo, hi, c, c + 1)[:, 0]
        bh, top_h, lh, rh = _segment_fwhm(row_read, c, h.n_cols, spec.mode)
        bv, top_v, lv, rv = _segment_fwhm(col_read, r, h.n_rows, spec.mode)
        # separable 2D vertex: centre sample plus both parabolic increments
        centre = row_read(c, c + 1)[0]
        height = top_h + top_v - centre
        row_vals = h.read_block(r, r + 1, c0, c1)[0]
        col_vals = h.read_block(r0, r1, c, c + 1)[:, 0]
        s_h, s_v = noise_sigma(row_vals), noise_sigma(col_vals)
        peaks.append(Peak2D(
            row=r, col=c, height=height, bin_h=bh, bin_v=bv,
            hz_h=_interp_axis(h_hz, bh), hz_v=_interp_axis(v_hz, bv),
            mz_h=_interp_axis(h_mz, bh), mz_v=_interp_axis(v_mz, bv),
            fwhm_h_bins=rh - lh, fwhm_v_bins=rv - lv,
            fwhm_h_mz=abs(_interp_axis(h_mz, lh) - _interp_axis(h_mz, rh)),
            fwhm_v_mz=abs(_interp_axis(v_mz, lv) - _interp_axis(v_mz, rv)),
            snr_h=height / s_h if s_h > 0 else np.inf,
            snr_v=height / s_v if s_v > 0 else np.inf,
        ))
    peaks.sort(key=lambda p: (-p.height, p.bin_h))
    return peaks

"""Two-stage out-of-core 2D transform.

Stage 1 transforms every transient (row) into a fragment spectrum; stage 2
transforms every column of that intermediate along t1.  In absorption mode
each stage phases its complex spectrum and keeps only the real part, which
yields the RR plane of full hypercomplex processing without materialising
the other three planes.

Batches are sized from the chunk budget; each batch is processed by one
worker and written to a disjoint row (stage 1) or column (stage 2) range, so
the output is independent of both budget and worker count.
"""

from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analyze import Scan1D, noise_sigma, pick_peaks_1d
from .calib import Calibration, bin_frequencies, mz_to_freq
from .config import ConfigError, ProcessingConfig
from .denoise import cadzow
from .lpredict import default_order, estimate_n_corrupt, repair_column
from .phase import (PhaseModel, eval_phase_h, eval_phase_v, optimize_phase_h,
                    optimize_phase_v, phase_factor)
from .spectrum import Spectrum2D
from .store import AcquisitionParams, DatasetHandle, S2DMeta, create_dataset

# bytes of working memory per sample of padded FFT length (real input,
# complex half spectrum, phased copy and output)
_WORK_BYTES_PER_SAMPLE = 40
_CHUNK_TARGET = (32, 4096)
_MIN_BATCH = 32


def n_bins(n: int, zerofill: int) -> int:
    """Half-spectrum bins kept after padding n samples to n * 2**zerofill."""
    return (n << zerofill) // 2


def fixed_chunks(n_rows, n_cols):
    return (min(_CHUNK_TARGET[0], n_rows), min(_CHUNK_TARGET[1], n_cols))


# ------------------------------------------------------------------ kernels
def spectrum_rows(block, weights, zerofill):
    """Windowed, zero-padded half spectra of each row: complex (rows, bins)."""
    n = block.shape[1]
    x = block * weights
    return np.fft.rfft(x, n=n << zerofill, axis=1)[:, :n_bins(n, zerofill)]


def reduce_spectrum(spec, mode, factor_re=None, factor_im=None):
    """Absorption: Re(spec * exp(-i phi)); magnitude: |spec|.

    Written out elementwise (no complex multiply or hypot) so every element
    is computed the same way regardless of its position in the batch.
    """
    re, im = spec.real, spec.imag
    if mode == "absorption":
        return re * factor_re - im * factor_im
    return np.sqrt(re * re + im * im)


def transform_rows(block, cfg: ProcessingConfig, weights, factor=None):
    """Stage-1 kernel on a block of raw transients (rows)."""
    block = np.asarray(block, dtype=float)
    if cfg.denoise.enabled:
        block = np.vstack([cadzow(r, cfg.denoise) for r in block])
    S = spectrum_rows(block, weights, cfg.zf_h)
    if cfg.mode == "absorption":
        return reduce_spectrum(S, "absorption", factor.real[None, :], factor.imag[None, :])
    return reduce_spectrum(S, "magnitude")


def transform_cols(block, cfg: ProcessingConfig, weights, factor=None, n_corrupt=0, lp_order=1):
    """Stage-2 kernel on a block of intermediate columns, shape (n_t1, cols)."""
    block = np.asarray(block, dtype=float)
    if n_corrupt > 0:
        block = np.column_stack([repair_column(block[:, j], lp_order, n_corrupt,
                                               cfg.lp.train_fraction)
                                 for j in range(block.shape[1])])
    n = block.shape[0]
    x = block * weights[:, None]
    S = np.fft.rfft(x, n=n << cfg.zerofill_v, axis=0)[:n_bins(n, cfg.zerofill_v)]
    if cfg.mode == "absorption":
        return reduce_spectrum(S, "absorption", factor.real[:, None], factor.imag[:, None])
    return reduce_spectrum(S, "magnitude")


# ----------------------------------------------------------------- batching
def _batches(total, per_batch):
    return [(s, min(total, s + per_batch)) for s in range(0, total, per_batch)]


def _run(jobs, fn, threads):
    if threads <= 1 or len(jobs) <= 1:
        for job in jobs:
            fn(*job)
        return
    # at most 2 jobs per worker in flight, so queued work stays O(threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending = deque()
        for job in jobs:
            if len(pending) >= 2 * threads:
                pending.popleft().result()
            pending.append(pool.submit(fn, *job))
        while pending:
            pending.popleft().result()


def _plan(cfg, n_units, unit_len, zerofill, threads):
    """(units per batch, workers) for a budget shared by all workers.

    Workers are only added while each still gets a batch of ``_MIN_BATCH``
    units within the budget, so the budget bounds memory for any thread
    count; the output depends on neither.
    """
    per_unit = max(1, (unit_len << zerofill) * _WORK_BYTES_PER_SAMPLE)
    budget = cfg.effective_chunk_bytes()
    # a worker is only worth adding if it gets a batch of useful width
    min_batch = min(_MIN_BATCH, n_units)
    workers = max(1, min(threads, budget // (per_unit * min_batch), n_units))
    return max(1, budget // workers // per_unit), workers


def _meta_for(cal_h: Calibration | None, cal_v: Calibration | None, mode):
    return S2DMeta(cal_h.A if cal_h else 0.0, cal_h.B if cal_h else 0.0,
                   cal_v.A if cal_v else 0.0, cal_v.B if cal_v else 0.0,
                   cal_v.modulation_offset if cal_v else 0.0, mode)


def calibrations(params: AcquisitionParams, cfg: ProcessingConfig):
    cal_h = cal_v = None
    if cfg.cal_h is not None:
        cal_h = Calibration(cfg.cal_h[0], cfg.cal_h[1], "horizontal")
    elif params.cal_A > 0:
        cal_h = Calibration(params.cal_A, params.cal_B, "horizontal")
    if cfg.cal_v is not None:
        cal_v = Calibration(cfg.cal_v[0], cfg.cal_v[1], "vertical", cfg.cal_v[2])
    elif params.cal_A > 0:
        cal_v = Calibration(params.cal_A, params.cal_B, "vertical", params.modulation_offset)
    return cal_h, cal_v


def h_band_hz(params: AcquisitionParams, cal_h):
    """Horizontal band in Hz from the m/z limits, or None."""
    if cal_h is None or params.mz_max_h <= 0:
        return None
    lo = mz_to_freq(params.mz_max_h, cal_h)
    hi = mz_to_freq(params.mz_min_h, cal_h) if params.mz_min_h > 0 else params.horizontal_range
    return float(lo), float(min(hi, params.horizontal_range))


def v_band_hz(params: AcquisitionParams, cal_v):
    if cal_v is None or params.mz_max_v <= 0:
        return None
    return float(mz_to_freq(params.mz_max_v, cal_v)), float(params.vertical_range)


# ------------------------------------------------------------------- stages
def process_rows(raw: DatasetHandle, cfg: ProcessingConfig, params: AcquisitionParams, path,
                 phase: PhaseModel | None = None, threads=None) -> DatasetHandle:
    """Stage 1: every transient -> real fragment spectrum (time-freq)."""
    if raw.domain_tag != "time-time":
        raise ConfigError(f"process_rows needs time-time input, got {raw.domain_tag}")
    if cfg.mode == "absorption" and phase is None:
        raise ConfigError("absorption mode requires phase model")
    threads = threads or cfg.threads
    n_t1, n_t2 = raw.shape
    bins = n_bins(n_t2, cfg.zf_h)
    weights = cfg.apod_h.weights(n_t2)
    factor = None
    if cfg.mode == "absorption":
        factor = phase_factor(eval_phase_h(bin_frequencies(bins, params.sample_rate_t2), phase))
    cal_h, cal_v = calibrations(params, cfg)
    out = create_dataset(n_t1, bins, "real-f64", fixed_chunks(n_t1, bins), path, "time-freq",
                         _meta_for(cal_h, cal_v, cfg.mode))

    def job(r0, r1):
        out.write_block(r0, 0, transform_rows(raw.read_block(r0, r1, 0, n_t2), cfg, weights, factor))

    per_batch, workers = _plan(cfg, n_t1, n_t2, cfg.zf_h, threads)
    _run(_batches(n_t1, per_batch), job, workers)
    return out


def process_cols(inter: DatasetHandle, cfg: ProcessingConfig, params: AcquisitionParams, path,
                 phase: PhaseModel | None = None, n_corrupt=0, threads=None,
                 provenance=None) -> Spectrum2D:
    """Stage 2: every intermediate column -> precursor spectrum; returns the
    freq-freq spectrum with its axes."""
    if inter.domain_tag != "time-freq" or inter.is_complex:
        raise ConfigError("process_cols needs a real time-freq intermediate")
    if cfg.mode == "absorption" and phase is None:
        raise ConfigError("absorption mode requires phase model")
    threads = threads or cfg.threads
    n_t1, n_h = inter.shape
    n_v = n_bins(n_t1, cfg.zerofill_v)
    weights = cfg.apod_v.weights(n_t1)
    factor = None
    if cfg.mode == "absorption":
        factor = phase_factor(eval_phase_v(bin_frequencies(n_v, params.sample_rate_t1), phase))
    lp_order = cfg.lp.order or default_order(cfg.lp.n_precursors)
    cal_h, cal_v = calibrations(params, cfg)
    out = create_dataset(n_v, n_h, cfg.out_kind, fixed_chunks(n_v, n_h), path, "freq-freq",
                         _meta_for(cal_h, cal_v, cfg.mode))
    cols, workers = _plan(cfg, n_h, n_t1, cfg.zerofill_v, threads)

    def job(c0, c1):
        blk = inter.read_block(0, n_t1, c0, c1)
        out.write_block(0, c0, transform_cols(blk, cfg, weights, factor, n_corrupt, lp_order))

    _run(_batches(n_h, cols), job, workers)
    band = None
    if params.mz_max_h > 0:
        band = (params.mz_min_h, params.mz_max_h)
    spec = Spectrum2D(out, params.sample_rate_t2, params.sample_rate_t1, cfg.mode, cal_h, cal_v,
                      band, params.mz_max_v, dict(provenance or {}))
    spec.write_sidecar()
    return spec


# ------------------------------------------------------------ phase fitting
def summed_row_spectrum(raw: DatasetHandle, cfg: ProcessingConfig, rows_per_block=64):
    """Complex fragment spectrum of the sum of all transients."""
    n_t1, n_t2 = raw.shape
    total = np.zeros(n_t2)
    for r0 in range(0, n_t1, rows_per_block):
        total += raw.read_block(r0, min(n_t1, r0 + rows_per_block), 0, n_t2).sum(axis=0)
    return spectrum_rows(total[None, :], cfg.apod_h.weights(n_t2), cfg.zf_h)[0]


def fit_phase_h(raw, cfg, params):
    spec = summed_row_spectrum(raw, cfg)
    f = bin_frequencies(spec.size, params.sample_rate_t2)
    cal_h, _ = calibrations(params, cfg)
    return optimize_phase_h(spec, f, cfg.phase_h.seed_c1, cfg.phase_h.seed_c2,
                            band=h_band_hz(params, cal_h))


def strongest_columns(inter: DatasetHandle, params, cfg, count, rows_per_block=64):
    """Columns at the tallest peaks of the t1-summed intermediate, in band."""
    n_t1, n_h = inter.shape
    profile = np.zeros(n_h)
    for r0 in range(0, n_t1, rows_per_block):
        profile += inter.read_block(r0, min(n_t1, r0 + rows_per_block), 0, n_h).sum(axis=0)
    f = bin_frequencies(n_h, params.sample_rate_t2)
    cal_h, _ = calibrations(params, cfg)
    band = h_band_hz(params, cal_h)
    lo, hi = (1, n_h) if band is None else (int(np.searchsorted(f, band[0])),
                                            int(np.searchsorted(f, band[1], side="right")))
    scan = Scan1D(profile, f, None, "profile", n_t1, cfg.mode)
    peaks = pick_peaks_1d(scan, 6.0, noise=noise_sigma(profile[lo:hi]), band=(lo, hi))
    return [p.index for p in peaks[:count]]


def precursor_scan_spectra(inter: DatasetHandle, cfg, cols):
    """Complex vertical spectra (windowed, zero-filled) of the given columns."""
    n_t1 = inter.n_rows
    w = cfg.apod_v.weights(n_t1)
    out = []
    for c in cols:
        x = inter.read_col(c) * w
        out.append(np.fft.rfft(x, n=n_t1 << cfg.zerofill_v)[:n_bins(n_t1, cfg.zerofill_v)])
    return out


def fit_phase_v(inter, cfg, params):
    cols = strongest_columns(inter, params, cfg, cfg.phase_v.n_columns)
    if not cols:
        raise ConfigError("vertical phase optimization found no fragment columns")
    scans = precursor_scan_spectra(inter, cfg, cols)
    f = bin_frequencies(scans[0].size, params.sample_rate_t1)
    _, cal_v = calibrations(params, cfg)
    return optimize_phase_v(scans, f, cfg.phase_v.seed_c1, band=v_band_hz(params, cal_v))


@dataclass
class RunInfo:
    phase: PhaseModel | None
    n_corrupt: int
    h_objective: float | None = None
    v_objective: float | None = None


def process_2d(raw: DatasetHandle, cfg: ProcessingConfig, params: AcquisitionParams, out_path,
               threads=None, keep_intermediate=False):
    """Rows then columns, with phase optimization when configured.

    Returns (Spectrum2D, RunInfo).  The intermediate goes to
    ``<out_path>.rows`` and is removed unless ``keep_intermediate``.
    """
    cfg.validate()
    out_path = Path(out_path)
    inter_path = out_path.with_name(out_path.name + ".rows")
    info = RunInfo(None, 0)
    h = cfg.phase_h.coeffs or (0.0, 0.0, 0.0)
    v = cfg.phase_v.coeffs or (0.0, 0.0)
    if cfg.mode == "absorption" and cfg.phase_h.optimize:
        res = fit_phase_h(raw, cfg, params)
        h, info.h_objective = res.coeffs, res.objective
    phase = PhaseModel(h, v, params.vertical_range)
    inter = process_rows(raw, cfg, params, inter_path, phase, threads)
    try:
        if cfg.phase_v.optimize:
            res = fit_phase_v(inter, cfg, params)
            v, info.v_objective = res.coeffs, res.objective
            phase = PhaseModel(h, v, params.vertical_range)
        defined_v = cfg.phase_v.defined
        info.phase = phase if (cfg.mode == "absorption" or defined_v) else None
        if cfg.lp.enabled:
            if cfg.lp.n_corrupt == "auto":
                if not defined_v:
                    raise ConfigError("lp.n_corrupt = auto needs a vertical phase model")
                info.n_corrupt = estimate_n_corrupt(phase, raw.n_rows)
            else:
                info.n_corrupt = int(cfg.lp.n_corrupt)
        prov = {"config_sha256": cfg.hash(), "ms2d_version": __version__,
                "numpy_version": np.__version__, "n_corrupt": info.n_corrupt}
        if info.phase is not None:
            prov.update({"phase_h": ",".join(repr(c) for c in phase.h_coeffs),
                         "phase_v": ",".join(repr(c) for c in phase.v_coeffs)})
        spec = process_cols(inter, cfg, params, out_path, phase, info.n_corrupt, threads, prov)
    finally:
        inter.close()
        if not keep_intermediate:
            try:
                os.remove(inter_path)
            except OSError:
                pass
    return spec, info

"""Synthetic 2D FT-ICR data: the ground-truth oracle.

Every precursor p has its abundance modulated over t1 as
1/2 (1 + cos(theta_p)), theta_p = 2 pi nu'_p t1 + phi_p + d0 + d1 nu'_p, where
nu'_p is its cyclotron frequency minus the modulation offset.  Each of its
fragments f contributes

    A_p * y_f * m_p(t1) * cos(2 pi f_f t2 + phi_h(f_f)) * exp(-t2 / tau)

to the transient, so fragments are modulated at exactly their precursor's
frequency.  An optional residual term puts the unfragmented precursor at its
own horizontal frequency, on the autocorrelation line.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import keyvalue
from .calib import Calibration, freq_to_mz, mz_to_freq
from .phase import eval_phase_h
from .store import AcquisitionParams, T2DWriter, import_raw


class SimError(ValueError):
    pass


@dataclass
class Precursor:
    mz: float
    abundance: float = 1.0
    residual: float = 0.0
    phase: float = 0.0
    fragments: list = field(default_factory=list)  # (mz, yield) pairs


@dataclass
class SimSpec:
    params: AcquisitionParams
    precursors: list = field(default_factory=list)
    phase_h: tuple = (0.0, 0.0, 0.0)
    phase_v: tuple = (0.0, 0.0)
    tau: float = 3e-3
    sigma: float = 0.0
    scintillation: float = 0.0
    harmonic2: float = 0.0
    seed: int = 0
    corrupt_rows: int = 0
    corrupt_level: float = 0.0

    @property
    def cal_h(self) -> Calibration:
        return Calibration(self.params.cal_A, self.params.cal_B, "horizontal")

    @property
    def cal_v(self) -> Calibration:
        return Calibration(self.params.cal_A, self.params.cal_B, "vertical",
                           self.params.modulation_offset)


@dataclass
class TruthPeak:
    kind: str  # "cross" or "auto"
    precursor: int
    precursor_mz: float
    fragment_mz: float
    freq_h: float
    freq_v: float
    amplitude: float

    def bins(self, h_bin_hz, v_bin_hz):
        return int(round(self.freq_v / v_bin_hz)), int(round(self.freq_h / h_bin_hz))


def validate(spec: SimSpec) -> None:
    p = spec.params
    if not spec.tau > 0:
        raise SimError("tau must be positive")
    if spec.sigma < 0 or spec.scintillation < 0:
        raise SimError("noise levels must be >= 0")
    if p.cal_A <= 0:
        raise SimError("simulation needs a calibration (cal_A > 0)")
    if not 0 <= spec.corrupt_rows <= p.n_t1:
        raise SimError("corrupt_rows outside the t1 range")
    nyq_h, nyq_v = p.horizontal_range, p.vertical_range
    for k, pre in enumerate(spec.precursors):
        if pre.abundance < 0 or pre.residual < 0:
            raise SimError(f"precursor {k}: abundance and residual must be >= 0")
        if p.mz_max_v > 0 and pre.mz > p.mz_max_v:
            raise SimError(f"precursor {k}: m/z {pre.mz} above vertical limit {p.mz_max_v}")
        try:
            nu = mz_to_freq(pre.mz, spec.cal_v)
        except ValueError as exc:
            raise SimError(f"precursor {k}: {exc}") from None
        if not 0 < nu < nyq_v:
            raise SimError(f"precursor {k}: modulation {nu:.1f} Hz outside (0, {nyq_v:.1f})")
        mzs = [f[0] for f in pre.fragments] + ([pre.mz] if pre.residual > 0 else [])
        for mz in mzs:
            if p.mz_max_h > 0 and not p.mz_min_h <= mz <= p.mz_max_h:
                raise SimError(f"m/z {mz} outside horizontal band [{p.mz_min_h}, {p.mz_max_h}]")
            f = mz_to_freq(mz, spec.cal_h)
            if not 0 < f < nyq_h:
                raise SimError(f"m/z {mz}: frequency {f:.1f} Hz outside (0, {nyq_h:.1f})")
        for mz, y in pre.fragments:
            if y < 0:
                raise SimError(f"precursor {k}: negative fragment yield")


def ground_truth(spec: SimSpec) -> list[TruthPeak]:
    """Expected 2D peaks: one cross-peak per fragment, one autocorrelation peak
    per precursor with residual signal."""
    out = []
    for k, pre in enumerate(spec.precursors):
        nu = mz_to_freq(pre.mz, spec.cal_v)
        for mz, y in pre.fragments:
            out.append(TruthPeak("cross", k, pre.mz, mz, mz_to_freq(mz, spec.cal_h), nu,
                                 pre.abundance * y))
        if pre.residual > 0:
            out.append(TruthPeak("auto", k, pre.mz, pre.mz, mz_to_freq(pre.mz, spec.cal_h), nu,
                                 pre.abundance * pre.residual))
    return out


def _terms(spec: SimSpec):
    """Per-term (precursor index, amplitude, horizontal frequency)."""
    pidx, amp, freq = [], [], []
    for k, pre in enumerate(spec.precursors):
        for mz, y in pre.fragments:
            pidx.append(k)
            amp.append(pre.abundance * y)
            freq.append(mz_to_freq(mz, spec.cal_h))
        if pre.residual > 0:
            pidx.append(k)
            amp.append(pre.abundance * pre.residual)
            freq.append(mz_to_freq(pre.mz, spec.cal_h))
    return np.array(pidx, dtype=int), np.array(amp), np.array(freq)


def waveforms(spec: SimSpec) -> np.ndarray:
    """Horizontal waveform of every term, shape (terms, n_t2)."""
    _, amp, freq = _terms(spec)
    p = spec.params
    t2 = np.arange(p.n_t2) / p.sample_rate_t2
    phi = eval_phase_h(freq, spec.phase_h)
    decay = np.exp(-t2 / spec.tau)
    return amp[:, None] * np.cos(2 * np.pi * freq[:, None] * t2[None, :] + phi[:, None]) * decay


def modulation(spec: SimSpec, r0: int, r1: int) -> np.ndarray:
    """Precursor modulation for rows [r0, r1), shape (rows, precursors), with
    scintillation and head corruption applied."""
    p = spec.params
    t1 = np.arange(r0, r1) * p.dt1
    nu = np.array([mz_to_freq(pre.mz, spec.cal_v) for pre in spec.precursors])
    ph = np.array([pre.phase for pre in spec.precursors])
    d0, d1 = spec.phase_v
    theta = 2 * np.pi * nu[None, :] * t1[:, None] + (ph + d0 + d1 * nu)[None, :]
    osc = np.cos(theta) + spec.harmonic2 * np.cos(2 * theta)
    if spec.corrupt_rows > 0 and spec.corrupt_level > 0:
        for i in range(r0, min(r1, spec.corrupt_rows)):
            g = np.random.default_rng([spec.seed, i, 2]).uniform(-1.0, 1.0, nu.size)
            osc[i - r0] *= 1.0 + spec.corrupt_level * g
    m = 0.5 * (1.0 + osc)
    if spec.scintillation > 0:
        for i in range(r0, r1):
            g = np.random.default_rng([spec.seed, i, 1]).standard_normal(nu.size)
            m[i - r0] *= 1.0 + spec.scintillation * g
    return m


def generate_rows(spec: SimSpec, r0: int, r1: int, wave=None) -> np.ndarray:
    """Transients for t1 rows [r0, r1) in float64."""
    pidx, _, _ = _terms(spec)
    p = spec.params
    rows = np.zeros((r1 - r0, p.n_t2))
    if pidx.size:
        wave = waveforms(spec) if wave is None else wave
        rows += modulation(spec, r0, r1)[:, pidx] @ wave
    if spec.sigma > 0:
        for i in range(r0, r1):
            rows[i - r0] += spec.sigma * np.random.default_rng([spec.seed, i, 0]).standard_normal(p.n_t2)
    return rows


def synthesize(spec: SimSpec, out_dir, encoding="f32le", rows_per_block=64, keep=False):
    """Write the dataset as T2D plus ``ground_truth.csv``.

    Returns (raw handle, ground truth); with ``keep`` also the stored matrix.
    """
    validate(spec)
    out_dir = Path(out_dir)
    wave = waveforms(spec) if spec.precursors else None
    kept = []
    with T2DWriter(out_dir, spec.params, encoding) as w:
        for r0 in range(0, spec.params.n_t1, rows_per_block):
            r1 = min(spec.params.n_t1, r0 + rows_per_block)
            stored = w.write_rows(generate_rows(spec, r0, r1, wave))
            if keep:
                kept.append(stored)
    truth = ground_truth(spec)
    write_truth_csv(out_dir / "ground_truth.csv", truth)
    handle, _ = import_raw(out_dir / "header.t2d")
    if keep:
        return handle, truth, np.concatenate(kept)
    return handle, truth


def write_truth_csv(path, truth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "precursor", "precursor_mz", "fragment_mz", "freq_h_hz", "freq_v_hz",
                    "amplitude"])
        for t in truth:
            w.writerow([t.kind, t.precursor, repr(t.precursor_mz), repr(t.fragment_mz),
                        repr(float(t.freq_h)), repr(float(t.freq_v)), repr(float(t.amplitude))])


# ----------------------------------------------------------------- config
def _floats(text, n):
    vals = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    if len(vals) != n:
        raise SimError(f"expected {n} comma-separated numbers, got {text!r}")
    return tuple(vals)


def spec_from_config(kv: dict) -> SimSpec:
    """Build a SimSpec from ``key = value`` pairs (see README for the keys)."""
    try:
        params = AcquisitionParams(
            n_t1=int(kv["n_t1"]), dt1=float(kv["dt1_us"]) * 1e-6, n_t2=int(kv["n_t2"]),
            sample_rate_t2=float(kv["sample_rate_hz"]),
            cal_A=float(kv.get("cal_a_hz_th", 0.0)), cal_B=float(kv.get("cal_b_hz2_th", 0.0)),
            modulation_offset=float(kv.get("modulation_offset_hz", 0.0)),
            mz_min_h=float(kv.get("mz_min_h", 0.0)), mz_max_h=float(kv.get("mz_max_h", 0.0)),
            mz_max_v=float(kv.get("mz_max_v", 0.0)),
        )
    except KeyError as exc:
        raise SimError(f"missing simulation key {exc.args[0]}") from None
    ids = sorted({k.split(".")[1] for k in kv if k.startswith("precursor.")}, key=lambda s: (len(s), s))
    precursors = []
    for pid in ids:
        g = lambda name, d=None: kv.get(f"precursor.{pid}.{name}", d)
        if g("mz") is None:
            raise SimError(f"precursor.{pid}.mz missing")
        frags = []
        for item in (g("fragments", "") or "").split(","):
            if item.strip():
                mz, _, y = item.partition(":")
                frags.append((float(mz), float(y) if y else 1.0))
        precursors.append(Precursor(float(g("mz")), float(g("abundance", 1.0)),
                                    float(g("residual", 0.0)), float(g("phase", 0.0)), frags))
    spec = SimSpec(
        params, precursors,
        phase_h=_floats(kv["phase_h"], 3) if "phase_h" in kv else (0.0, 0.0, 0.0),
        phase_v=_floats(kv["phase_v"], 2) if "phase_v" in kv else (0.0, 0.0),
        tau=float(kv.get("tau_s", 3e-3)), sigma=float(kv.get("sigma", 0.0)),
        scintillation=float(kv.get("scintillation", 0.0)),
        harmonic2=float(kv.get("harmonic2", 0.0)), seed=int(kv.get("seed", 0)),
        corrupt_rows=int(kv.get("corrupt_rows", 0)),
        corrupt_level=float(kv.get("corrupt_level", 0.0)),
    )
    validate(spec)
    return spec


def spec_to_config(spec: SimSpec) -> dict:
    p = spec.params
    kv = {
        "n_t1": p.n_t1, "dt1_us": p.dt1 * 1e6, "n_t2": p.n_t2,
        "sample_rate_hz": float(p.sample_rate_t2), "cal_a_hz_th": float(p.cal_A),
        "cal_b_hz2_th": float(p.cal_B), "modulation_offset_hz": float(p.modulation_offset),
        "mz_min_h": float(p.mz_min_h), "mz_max_h": float(p.mz_max_h), "mz_max_v": float(p.mz_max_v),
        "tau_s": float(spec.tau), "sigma": float(spec.sigma),
        "scintillation": float(spec.scintillation), "harmonic2": float(spec.harmonic2),
        "seed": spec.seed, "phase_h": ",".join(repr(float(c)) for c in spec.phase_h),
        "phase_v": ",".join(repr(float(c)) for c in spec.phase_v),
        "corrupt_rows": spec.corrupt_rows, "corrupt_level": float(spec.corrupt_level),
    }
    for k, pre in enumerate(spec.precursors, 1):
        kv[f"precursor.{k}.mz"] = repr(float(pre.mz))
        kv[f"precursor.{k}.abundance"] = float(pre.abundance)
        kv[f"precursor.{k}.residual"] = float(pre.residual)
        kv[f"precursor.{k}.phase"] = float(pre.phase)
        kv[f"precursor.{k}.fragments"] = ",".join(f"{mz!r}:{y!r}" for mz, y in pre.fragments)
    return kv


# ------------------------------------------------------------ scene helpers
DEFAULT_A = 2.30307e8  # Hz*Th
DEFAULT_B = -5.2e9  # Hz^2*Th
DEFAULT_OFFSET = 92.2e3  # Hz


def scene_params(n_t1=256, n_t2=16384, dt1=2e-6, rate=2.0e6, A=DEFAULT_A, B=DEFAULT_B,
                 offset=DEFAULT_OFFSET, nu_min=20e3) -> AcquisitionParams:
    """Acquisition with the horizontal band spanning 5%..97.5% of Nyquist and
    the vertical band starting at modulation ``nu_min``."""
    cal_h = Calibration(A, B, "horizontal")
    cal_v = Calibration(A, B, "vertical", offset)
    return AcquisitionParams(
        n_t1=n_t1, dt1=dt1, n_t2=n_t2, sample_rate_t2=rate, cal_A=A, cal_B=B,
        modulation_offset=offset,
        mz_min_h=float(freq_to_mz(0.975 * rate / 2, cal_h)),
        mz_max_h=float(freq_to_mz(0.05 * rate / 2, cal_h)),
        mz_max_v=float(freq_to_mz(nu_min, cal_v)),
    )


def scene_from_hz(params: AcquisitionParams, layout, **kw) -> SimSpec:
    """Build a SimSpec from frequencies: ``layout`` is a list of
    (nu_v_hz, abundance, residual, [(f_h_hz, yield), ...])."""
    cal_h = Calibration(params.cal_A, params.cal_B, "horizontal")
    cal_v = Calibration(params.cal_A, params.cal_B, "vertical", params.modulation_offset)
    pres = []
    for nu, ab, res, frags in layout:
        pres.append(Precursor(float(freq_to_mz(nu, cal_v)), ab, res, 0.0,
                              [(float(freq_to_mz(f, cal_h)), y) for f, y in frags]))
    return SimSpec(params, pres, **kw)


def standard_scene(sigma=4.0, seed=0, n_t1=256, n_t2=16384, residual=0.0, **kw) -> SimSpec:
    """3 precursors x 4 fragments on a 256 x 16k grid."""
    layout = [
        (40e3, 1.0, residual, [(180e3, 1.0), (390e3, 0.8), (610e3, 0.6), (870e3, 0.7)]),
        (110e3, 0.8, residual, [(240e3, 0.9), (455e3, 1.0), (700e3, 0.5), (930e3, 0.6)]),
        (190e3, 0.6, residual, [(150e3, 0.7), (330e3, 0.6), (525e3, 1.0), (780e3, 0.9)]),
    ]
    return scene_from_hz(scene_params(n_t1=n_t1, n_t2=n_t2), layout, sigma=sigma, seed=seed, **kw)

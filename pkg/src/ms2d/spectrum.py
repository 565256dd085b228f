"""Processed 2D spectrum: a freq-freq dataset plus its axes and calibrations."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import keyvalue
from .calib import Calibration, bin_frequencies, mz_axis, mz_to_freq
from .store import DatasetHandle, S2DMeta, open_dataset


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


@dataclass
class Spectrum2D:
    """Rows are vertical (precursor) bins, columns horizontal (fragment) bins."""

    data: DatasetHandle
    sample_rate_h: float
    sample_rate_v: float
    mode: str
    cal_h: Calibration | None = None
    cal_v: Calibration | None = None
    mz_band_h: tuple[float, float] | None = None
    mz_max_v: float = 0.0
    provenance: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.data.shape

    @property
    def h_hz(self) -> np.ndarray:
        return bin_frequencies(self.data.n_cols, self.sample_rate_h)

    @property
    def v_hz(self) -> np.ndarray:
        return bin_frequencies(self.data.n_rows, self.sample_rate_v)

    @property
    def h_mz(self) -> np.ndarray | None:
        return None if self.cal_h is None else mz_axis(self.h_hz, self.cal_h)

    @property
    def v_mz(self) -> np.ndarray | None:
        return None if self.cal_v is None else mz_axis(self.v_hz, self.cal_v)

    @property
    def h_bin_hz(self) -> float:
        return self.sample_rate_h / (2.0 * self.data.n_cols)

    @property
    def v_bin_hz(self) -> float:
        return self.sample_rate_v / (2.0 * self.data.n_rows)

    def col_band(self) -> tuple[int, int]:
        """Half-open column range inside the horizontal m/z band (bin 0 excluded)."""
        n = self.data.n_cols
        if self.cal_h is None or self.mz_band_h is None or self.mz_band_h[1] <= 0:
            return 1, n
        lo_mz, hi_mz = self.mz_band_h
        f_lo = mz_to_freq(hi_mz, self.cal_h)
        f_hi = mz_to_freq(lo_mz, self.cal_h) if lo_mz > 0 else np.inf
        c0 = max(1, int(np.ceil(f_lo / self.h_bin_hz)))
        c1 = n if not np.isfinite(f_hi) else min(n, int(np.floor(f_hi / self.h_bin_hz)) + 1)
        return c0, max(c0 + 1, c1)

    def row_band(self) -> tuple[int, int]:
        """Half-open row range below the vertical m/z limit (bin 0 excluded)."""
        n = self.data.n_rows
        if self.cal_v is None or self.mz_max_v <= 0:
            return 1, n
        nu = mz_to_freq(self.mz_max_v, self.cal_v)
        r0 = max(1, int(np.ceil(nu / self.v_bin_hz)))
        return min(r0, n - 1), n

    # ------------------------------------------------------------ persistence
    def write_sidecar(self) -> None:
        items = {
            "sample_rate_h_hz": float(self.sample_rate_h),
            "sample_rate_v_hz": float(self.sample_rate_v),
            "mode": self.mode,
            "mz_min_h": float(self.mz_band_h[0]) if self.mz_band_h else 0.0,
            "mz_max_h": float(self.mz_band_h[1]) if self.mz_band_h else 0.0,
            "mz_max_v": float(self.mz_max_v),
        }
        for key, value in sorted(self.provenance.items()):
            items[f"provenance.{key}"] = value
        keyvalue.write_file(sidecar_path(self.data.path), items, header="ms2d spectrum axes")

    def s2d_meta(self) -> S2DMeta:
        return S2DMeta(
            cal_A_h=self.cal_h.A if self.cal_h else 0.0,
            cal_B_h=self.cal_h.B if self.cal_h else 0.0,
            cal_A_v=self.cal_v.A if self.cal_v else 0.0,
            cal_B_v=self.cal_v.B if self.cal_v else 0.0,
            modulation_offset_hz=self.cal_v.modulation_offset if self.cal_v else 0.0,
            mode=self.mode,
        )


def open_spectrum(path) -> Spectrum2D:
    """Open an S2D spectrum written by the pipeline (needs its ``.meta`` sidecar)."""
    handle = open_dataset(path)
    side = sidecar_path(path)
    kv = keyvalue.read_file(side) if side.exists() else {}
    if "sample_rate_h_hz" not in kv or "sample_rate_v_hz" not in kv:
        handle.close()
        raise ValueError(f"{side}: sample rates missing; cannot build frequency axes")
    m = handle.meta
    cal_h = Calibration(m.cal_A_h, m.cal_B_h, "horizontal") if m.cal_A_h > 0 else None
    cal_v = (Calibration(m.cal_A_v, m.cal_B_v, "vertical", m.modulation_offset_hz)
             if m.cal_A_v > 0 else None)
    band = (float(kv.get("mz_min_h", 0.0)), float(kv.get("mz_max_h", 0.0)))
    prov = {k.split(".", 1)[1]: v for k, v in kv.items() if k.startswith("provenance.")}
    return Spectrum2D(handle, float(kv["sample_rate_h_hz"]), float(kv["sample_rate_v_hz"]),
                      m.mode, cal_h, cal_v, band if band[1] > 0 else None,
                      float(kv.get("mz_max_v", 0.0)), prov)

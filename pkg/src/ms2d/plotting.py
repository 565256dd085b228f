"""Figure rendering for CLI reports (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.linewidth": 0.8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 0.8,
    "svg.hashsalt": "ms2d",
}

# fixed metadata keeps PNG bytes identical across runs
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_scan(scan, path, peaks=(), title=None):
    """Line plot of a 1D scan against m/z (Hz when uncalibrated)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 3.0))
        use_mz = scan.mz is not None and np.isfinite(scan.mz).any()
        x = scan.mz if use_mz else scan.hz
        ok = np.isfinite(x)
        ax.plot(x[ok], scan.values[ok], color="k")
        for p in peaks:
            ax.plot(p.centroid_mz if use_mz else p.centroid_hz, p.height, "v", color="tab:red", ms=4)
        ax.set_xlabel("m/z" if use_mz else "frequency (Hz)")
        ax.set_ylabel("intensity")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def plot_peaks_2d(peaks, path, title=None):
    """Scatter of 2D peak centroids (fragment m/z vs precursor m/z)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 4.5))
        if peaks:
            h = np.array([p.mz_h for p in peaks])
            v = np.array([p.mz_v for p in peaks])
            s = np.array([p.height for p in peaks])
            ax.scatter(h, v, s=8 + 40 * s / s.max(), c="k", linewidths=0)
            lo, hi = np.nanmin(np.r_[h, v]), np.nanmax(np.r_[h, v])
            ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.6, ls="--")
        ax.set_xlabel("fragment m/z")
        ax.set_ylabel("precursor m/z")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def plot_region(values, extent, path, levels=None, title=None):
    """Grayscale image of a spectrum region, optional contour overlay.

    ``extent`` is (h_lo, h_hi, v_lo, v_hi) in display units.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 4.5))
        vmax = float(np.max(np.abs(values))) or 1.0
        ax.imshow(values, origin="lower", aspect="auto", extent=extent, cmap="gray_r",
                  vmin=0.0, vmax=vmax, interpolation="nearest")
        if levels is not None and np.max(values) > min(levels):
            ax.contour(values, levels=levels, extent=extent, colors="tab:red", linewidths=0.5)
        ax.set_xlabel("fragment axis")
        ax.set_ylabel("precursor axis")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)

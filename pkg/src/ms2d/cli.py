"""``ms2d`` command-line front end.

Exit codes: 0 success, 1 processing error, 2 usage/config error.  Errors go
to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, analyze, keyvalue, simulate
from .calib import CalibrationError, fit_calibration
from .config import ConfigError, config_from_items, load_config
from .phase import PhaseError, PhaseModel
from .pipeline import fit_phase_h, fit_phase_v, process_2d, process_rows
from .spectrum import open_spectrum
from .store import StoreError, import_raw, open_dataset, read_t2d_header


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(exc, code):
    payload = {"error": str(exc), "type": type(exc).__name__, "exit": code}
    offset = getattr(exc, "offset", None)
    if offset is not None:
        payload["offset"] = offset
    print(json.dumps(payload), file=sys.stderr)
    return code


def _fmt(x):
    return repr(float(x))


def _write_provenance(path, command, args, extra=None):
    items = {"command": command, "ms2d_version": __version__, "numpy_version": np.__version__}
    for k, v in sorted(vars(args).items()):
        if k != "func" and v is not None:
            items[f"arg.{k}"] = v
    items.update(extra or {})
    keyvalue.write_file(path, items, header="ms2d provenance")


def _outdir_for(path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# ------------------------------------------------------------------ commands
def cmd_simulate(args):
    if args.spec:
        kv = keyvalue.read_file(args.spec)
        if args.seed is not None:
            kv["seed"] = str(args.seed)
        spec = simulate.spec_from_config(kv)
    else:
        spec = simulate.standard_scene(seed=args.seed or 0)
    out = Path(args.out)
    handle, truth = simulate.synthesize(spec, out)
    handle.close()
    keyvalue.write_file(out / "sim.cfg", simulate.spec_to_config(spec), header="ms2d simulation spec")
    _write_provenance(out / "provenance.txt", "simulate", args)
    print(json.dumps({"out": str(out), "n_t1": spec.params.n_t1, "n_t2": spec.params.n_t2,
                      "peaks": len(truth)}))
    return 0


def _load_cfg(args):
    overrides = {}
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "threads", None):
        overrides["threads"] = args.threads
    return load_config(args.config, **overrides)


def cmd_process(args):
    cfg = _load_cfg(args)
    cfg.validate()
    raw, params = import_raw(args.inp)
    out = _outdir_for(args.out)
    spec, info = process_2d(raw, cfg, params, out, threads=args.threads)
    summary = {"out": str(out), "shape": list(spec.shape), "mode": spec.mode,
               "config_sha256": cfg.hash(), "n_corrupt": info.n_corrupt}
    if info.phase is not None:
        summary["phase_h"] = list(info.phase.h_coeffs)
        summary["phase_v"] = list(info.phase.v_coeffs)
        summary["v_rotations"] = info.phase.v_rotations
    _write_provenance(Path(str(out) + ".provenance"), "process", args,
                      {"config_sha256": cfg.hash()})
    spec.data.close()
    print(json.dumps(summary))
    return 0


def cmd_phase_opt(args):
    kv = keyvalue.read_file(args.config) if args.config else {}
    kv["mode"] = "absorption"
    kv.setdefault("phase_h.optimize", "true")
    cfg = config_from_items(kv)
    raw, params = import_raw(args.inp)
    res = fit_phase_h(raw, cfg, params)
    out = {"c0": res.coeffs[0], "c1": res.coeffs[1], "c2": res.coeffs[2]}
    if args.vertical:
        tmp = Path(args.work or ".") / ".ms2d_phase_rows.s2d"
        model = PhaseModel(res.coeffs, (0.0, 0.0), params.vertical_range)
        inter = process_rows(raw, cfg, params, tmp, model, threads=args.threads)
        try:
            vres = fit_phase_v(inter, cfg, params)
        finally:
            inter.close()
            tmp.unlink(missing_ok=True)
        out.update({"d0": vres.coeffs[0], "d1": vres.coeffs[1],
                    "v_rotations": PhaseModel(res.coeffs, vres.coeffs, params.vertical_range).v_rotations})
    print(json.dumps(out))
    return 0


def _write_scan_csv(path, scan):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mz", "freq_hz", "intensity"])
        mz = scan.mz if scan.mz is not None else np.full(scan.values.size, np.nan)
        for m, f, v in zip(mz, scan.hz, scan.values):
            w.writerow(["" if not np.isfinite(m) else _fmt(m), _fmt(f), _fmt(v)])


def cmd_scan(args):
    from . import plotting

    spec = open_spectrum(args.inp)
    chosen = [a is not None for a in (args.precursor_mz, args.fragment_mz)] + [args.autocorrelation]
    if sum(chosen) != 1:
        raise UsageError("give exactly one of --precursor-mz, --fragment-mz, --autocorrelation")
    if args.precursor_mz is not None:
        scan = analyze.extract_fragment_scan(spec, args.precursor_mz, args.rows)
    elif args.fragment_mz is not None:
        scan = analyze.extract_precursor_scan(spec, args.fragment_mz)
    else:
        scan = analyze.extract_autocorrelation(spec)
    out = _outdir_for(args.out)
    _write_scan_csv(out, scan)
    peaks = analyze.pick_peaks_1d(scan, args.threshold_sigma) if scan.values.size >= 5 else []
    plotting.plot_scan(scan, out.with_suffix(".png"), peaks, title=scan.origin)
    _write_provenance(Path(str(out) + ".provenance"), "scan", args)
    print(json.dumps({"out": str(out), "origin": scan.origin, "rows_summed": scan.rows_summed,
                      "peaks": len(peaks)}))
    return 0


PEAK_FIELDS = ["mz_h", "mz_v", "freq_h_hz", "freq_v_hz", "height", "snr_h", "snr_v", "r_h", "r_v"]


def _peak_row(p):
    return [p.mz_h, p.mz_v, p.hz_h, p.hz_v, p.height, p.snr_h, p.snr_v, p.r_h, p.r_v]


def match_peaks(a, b, tol_h, tol_v):
    """Pairs (pa, pb) of peaks whose centroids agree within the tolerances (Hz)."""
    pairs = []
    used = set()
    for pa in a:
        best, dist = None, np.inf
        for k, pb in enumerate(b):
            if k in used:
                continue
            dh, dv = abs(pa.hz_h - pb.hz_h) / tol_h, abs(pa.hz_v - pb.hz_v) / tol_v
            if dh <= 1 and dv <= 1 and dh + dv < dist:
                best, dist = k, dh + dv
        if best is not None:
            used.add(best)
            pairs.append((pa, b[best]))
    return pairs


def compare_modes(spec_a, spec_b, threshold_sigma=6.0):
    """Median absorption/magnitude ratios of FWHM (per dimension) and SNR over
    peaks found in both spectra."""
    pa = analyze.pick_peaks_2d(spec_a, threshold_sigma)
    pb = analyze.pick_peaks_2d(spec_b, threshold_sigma)
    if spec_a.mode == "magnitude" and spec_b.mode == "absorption":
        spec_a, spec_b, pa, pb = spec_b, spec_a, pb, pa
    tol_h = 3 * max(spec_a.h_bin_hz, spec_b.h_bin_hz)
    tol_v = 3 * max(spec_a.v_bin_hz, spec_b.v_bin_hz)
    pairs = match_peaks(pa, pb, tol_h, tol_v)
    if not pairs:
        raise analyze.AnalysisError("no peaks common to both spectra")
    hz_h = lambda p, s: p.fwhm_h_bins * s.h_bin_hz
    hz_v = lambda p, s: p.fwhm_v_bins * s.v_bin_hz
    ratio = lambda vals: float(np.median(vals))
    return {
        "mode_num": spec_a.mode, "mode_den": spec_b.mode, "matched": len(pairs),
        "fwhm_ratio_h": ratio([hz_h(x, spec_a) / hz_h(y, spec_b) for x, y in pairs]),
        "fwhm_ratio_v": ratio([hz_v(x, spec_a) / hz_v(y, spec_b) for x, y in pairs]),
        "fwhm_ratio_h_max": float(max(hz_h(x, spec_a) / hz_h(y, spec_b) for x, y in pairs)),
        "fwhm_ratio_v_max": float(max(hz_v(x, spec_a) / hz_v(y, spec_b) for x, y in pairs)),
        "snr_ratio_h": ratio([x.snr_h / y.snr_h for x, y in pairs]),
        "snr_ratio_v": ratio([x.snr_v / y.snr_v for x, y in pairs]),
    }


def cmd_peaks(args):
    from . import plotting

    spec = open_spectrum(args.inp)
    if args.compare:
        other = open_spectrum(args.compare)
        print(json.dumps(compare_modes(spec, other, args.threshold_sigma)))
        return 0
    peaks = analyze.pick_peaks_2d(spec, args.threshold_sigma)
    if args.out:
        out = _outdir_for(args.out)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PEAK_FIELDS)
            for p in peaks:
                w.writerow([_fmt(v) for v in _peak_row(p)])
        plotting.plot_peaks_2d(peaks, out.with_suffix(".png"), title=f"{spec.mode} peaks")
        _write_provenance(Path(str(out) + ".provenance"), "peaks", args)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(PEAK_FIELDS)
        for p in peaks:
            w.writerow([_fmt(v) for v in _peak_row(p)])
    return 0


def cmd_calibrate(args):
    refs = []
    with open(args.refs, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                refs.append((float(row["freq_hz"]), float(row["mz"])))
            except (KeyError, TypeError, ValueError):
                raise UsageError("refs CSV needs numeric columns freq_hz, mz") from None
    fit = fit_calibration(refs, args.dimension, args.offset_hz)
    out = {"A": fit.cal.A, "B": fit.cal.B, "dimension": fit.cal.dimension,
           "offset_hz": fit.cal.modulation_offset,
           "residuals_ppm": [float(r) for r in fit.residuals_ppm]}
    print(json.dumps(out))
    return 0


def cmd_info(args):
    path = Path(args.inp)
    if path.is_dir() or path.name.endswith(".t2d"):
        params, encoding, data = read_t2d_header(path)
        out = {"format": "T2D", "n_t1": params.n_t1, "n_t2": params.n_t2, "dt1_us": params.dt1 * 1e6,
               "sample_rate_hz": params.sample_rate_t2, "encoding": encoding,
               "vertical_range_hz": params.vertical_range, "cal_A": params.cal_A,
               "cal_B": params.cal_B, "modulation_offset_hz": params.modulation_offset}
    else:
        h = open_dataset(path)
        m = h.meta
        out = {"format": "S2D", "n_rows": h.n_rows, "n_cols": h.n_cols, "value_kind": h.value_kind,
               "domain": h.domain_tag, "chunk_shape": list(h.chunk_shape), "mode": m.mode,
               "cal_A_h": m.cal_A_h, "cal_B_h": m.cal_B_h, "cal_A_v": m.cal_A_v,
               "cal_B_v": m.cal_B_v, "modulation_offset_hz": m.modulation_offset_hz}
        h.close()
    print(json.dumps(out))
    return 0


def parse_region(text):
    """``h_lo:h_hi,v_lo:v_hi`` -> ((h_lo, h_hi), (v_lo, v_hi))."""
    try:
        h, v = text.split(",")
        return keyvalue.as_range(h), keyvalue.as_range(v)
    except ValueError:
        raise UsageError(f"--region must look like h_lo:h_hi,v_lo:v_hi, got {text!r}") from None


def _axis_range(axis, lo, hi):
    """Index range [i0, i1) of finite axis values within [lo, hi]."""
    lo, hi = min(lo, hi), max(lo, hi)
    idx = np.nonzero(np.isfinite(axis) & (axis >= lo) & (axis <= hi))[0]
    if idx.size == 0:
        return 0, 0
    return int(idx.min()), int(idx.max()) + 1


def contour_groups(values, level):
    """Closed contour polylines at ``level`` grouped by connected region.

    Returns a list of groups, each a list of (N, 2) arrays in (col, row) index
    coordinates.
    """
    import contourpy
    from scipy import ndimage

    labels, n = ndimage.label(values >= level, structure=np.ones((3, 3)))
    groups = []
    floor = min(float(values.min()), level) - 1.0
    for k in range(1, n + 1):
        sub = np.where(labels == k, values, floor)
        sub = np.pad(sub, 1, constant_values=floor)
        gen = contourpy.contour_generator(z=sub, name="serial", corner_mask=False)
        lines = [ln - 1.0 for ln in gen.lines(level) if len(ln) > 1]
        groups.append(lines)
    return groups


def _interp(axis, x):
    i = np.arange(axis.size)
    return np.interp(x, i, axis)


def cmd_export(args):
    from . import plotting

    spec = open_spectrum(args.inp)
    h_mz, v_mz = spec.h_mz, spec.v_mz
    h_axis = h_mz if h_mz is not None else spec.h_hz
    v_axis = v_mz if v_mz is not None else spec.v_hz
    if args.region:
        (h_lo, h_hi), (v_lo, v_hi) = parse_region(args.region)
        c0, c1 = _axis_range(h_axis, h_lo, h_hi)
        r0, r1 = _axis_range(v_axis, v_lo, v_hi)
    else:
        c0, c1 = spec.col_band()
        r0, r1 = spec.row_band()
    if c1 <= c0 or r1 <= r0:
        raise analyze.AnalysisError("empty region")
    values = spec.data.read_block(r0, r1, c0, c1)
    if args.level is not None:
        level = args.level
    else:
        sigma = analyze.global_noise(spec)
        level = args.threshold_sigma * sigma if sigma > 0 else np.inf
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    groups = contour_groups(values, level) if np.isfinite(level) else []
    if args.format in ("csv", "both"):
        with open(out / "contours.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "line", "point", "mz_h", "mz_v"])
            for g, lines in enumerate(groups):
                for li, ln in enumerate(lines):
                    xs = _interp(h_axis[c0:c1], ln[:, 0])
                    ys = _interp(v_axis[r0:r1], ln[:, 1])
                    for pi, (x, y) in enumerate(zip(xs, ys)):
                        w.writerow([g, li, pi, _fmt(x), _fmt(y)])
    if args.format in ("png", "both"):
        extent = (float(h_axis[c0]), float(h_axis[c1 - 1]), float(v_axis[r0]), float(v_axis[r1 - 1]))
        lv = [level] if np.isfinite(level) else None
        plotting.plot_region(values, extent, out / "region.png", lv, title=f"{spec.mode} region")
    _write_provenance(out / "provenance.txt", "export", args, {"level": float(level)})
    print(json.dumps({"out": str(out), "groups": len(groups), "level": float(level),
                      "rows": [r0, r1], "cols": [c0, c1]}))
    return 0


# -------------------------------------------------------------------- parser
def build_parser():
    p = _Parser(prog="ms2d", description="2D FT-ICR MS processing")
    p.add_argument("--version", action="version", version=f"ms2d {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a synthetic T2D dataset")
    s.add_argument("--spec", help="simulation spec (key = value)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("process", help="raw T2D -> S2D spectrum")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--mode", choices=["magnitude", "absorption"])
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_process)

    s = sub.add_parser("phase-opt", help="optimize phase coefficients")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--config")
    s.add_argument("--vertical", action="store_true", help="also fit the vertical phase")
    s.add_argument("--work", help="directory for the temporary intermediate")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_phase_opt)

    s = sub.add_parser("scan", help="extract a 1D scan to CSV")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--precursor-mz", type=float)
    s.add_argument("--fragment-mz", type=float)
    s.add_argument("--autocorrelation", action="store_true")
    s.add_argument("--rows", type=int, default=1)
    s.add_argument("--threshold-sigma", type=float, default=6.0)
    s.set_defaults(func=cmd_scan)

    s = sub.add_parser("peaks", help="2D peak list")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out")
    s.add_argument("--threshold-sigma", type=float, default=6.0)
    s.add_argument("--compare", help="second spectrum (other mode) for FWHM/SNR ratios")
    s.set_defaults(func=cmd_peaks)

    s = sub.add_parser("calibrate", help="fit m/z = A/f + B/f^2")
    s.add_argument("--refs", required=True, help="CSV with columns freq_hz, mz")
    s.add_argument("--dimension", choices=["horizontal", "vertical"], default="horizontal")
    s.add_argument("--offset-hz", type=float, default=0.0)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("info", help="describe an S2D file or T2D directory")
    s.add_argument("inp", nargs="?")
    s.add_argument("--in", dest="inp_flag")
    s.set_defaults(func=cmd_info)

    s = sub.add_parser("export", help="contour CSV and image of a region")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--region", help="h_lo:h_hi,v_lo:v_hi in axis units (m/z when calibrated)")
    s.add_argument("--threshold-sigma", type=float, default=6.0)
    s.add_argument("--level", type=float, help="absolute contour level (overrides sigma)")
    s.add_argument("--format", choices=["csv", "png", "both"], default="both")
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command == "info":
            args.inp = args.inp or args.inp_flag
            if not args.inp:
                raise UsageError("info needs a path")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _emit_error(exc, 2)
    except (StoreError, CalibrationError, PhaseError, analyze.AnalysisError,
            simulate.SimError, keyvalue.KeyValueError, ValueError, OSError) as exc:
        return _emit_error(exc, 1)


if __name__ == "__main__":
    sys.exit(main())

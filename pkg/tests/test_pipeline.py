import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import TWO_PI, hypercomplex_rr, raw_from_array
from ms2d import analyze, pipeline, simulate
from ms2d.calib import bin_frequencies
from ms2d.config import ConfigError, LPSettings, PhaseSettings, ProcessingConfig
from ms2d.phase import PhaseModel, eval_phase_h, eval_phase_v
from ms2d.spectrum import open_spectrum
from ms2d.store import AcquisitionParams, create_dataset
from ms2d.window import ApodizationSpec

NONE = ApodizationSpec("none")
KV = ApodizationSpec("kv-asym", 0.25)


def _params(n1, n2, rate=2e6, dt1=2e-6):
    return AcquisitionParams(n_t1=n1, dt1=dt1, n_t2=n2, sample_rate_t2=rate)


def _cfg(mode="absorption", h=(0.0, 0.0, 0.0), v=(0.0, 0.0), **kw):
    return ProcessingConfig(mode=mode, phase_h=PhaseSettings(coeffs=h),
                            phase_v=PhaseSettings(coeffs=v), **kw)


def _run(tmp_path, arr, cfg, params=None, name="out", **kw):
    arr = np.asarray(arr, dtype=float)
    params = params or _params(*arr.shape)
    raw = raw_from_array(tmp_path / f"{name}.raw", arr)
    spec, info = pipeline.process_2d(raw, cfg, params, tmp_path / f"{name}.s2d", **kw)
    return spec.data.to_array(), spec, info


# ------------------------------------------------------- hypercomplex oracle
@pytest.mark.parametrize("seed", range(5))
def test_rr_plane_matches_four_plane_oracle(tmp_path, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(32, 32)) + 1j * rng.normal(size=(32, 32))
    params = _params(32, 32)
    h = tuple(rng.uniform(-3, 3) * np.array([1.0, 1e-5, 1e-11]))
    v = (rng.uniform(-3, 3), rng.uniform(-1e-4, 1e-4))
    cfg = _cfg(h=h, v=v, apod_h=KV, apod_v=ApodizationSpec("sine-bell", 0.25, 0.5),
               zerofill_h=1, zerofill_v=2)
    # the instrument records real transients; both parts go through separately
    for part, x in (("re", z.real), ("im", z.imag)):
        got, _, _ = _run(tmp_path, x, cfg, params, name=f"{part}{seed}")
        f_h = bin_frequencies(got.shape[1], params.sample_rate_t2)
        f_v = bin_frequencies(got.shape[0], params.sample_rate_t1)
        want = hypercomplex_rr(x, cfg.apod_h.weights(32), cfg.apod_v.weights(32), 1, 2,
                               eval_phase_h(f_h, h), eval_phase_v(f_v, v))
        assert np.max(np.abs(got - want)) <= 1e-10 * np.max(np.abs(want))


def test_oracle_detects_a_wrong_phase_sign(tmp_path):
    x = np.random.default_rng(0).normal(size=(16, 16))
    params = _params(16, 16)
    cfg = _cfg(h=(0.4, 0.0, 0.0), v=(0.9, 0.0), apod_h=NONE, apod_v=NONE,
               zerofill_h=0, zerofill_v=0)
    got, _, _ = _run(tmp_path, x, cfg, params)
    wrong = hypercomplex_rr(x, np.ones(16), np.ones(16), 0, 0,
                            np.full(8, 0.4), np.full(8, -0.9))
    assert np.max(np.abs(got - wrong)) > 1e-3


# ---------------------------------------------------------- trivial examples
def test_impulse_gives_flat_magnitude(tmp_path):
    x = np.zeros((8, 8))
    x[0, 0] = 1.0
    got, _, _ = _run(tmp_path, x, _cfg("magnitude", apod_h=NONE, apod_v=NONE,
                                       zerofill_h=0, zerofill_v=0))
    assert got.shape == (4, 4)
    np.testing.assert_allclose(got, 1.0, atol=1e-15)


def test_zero_row_gives_zero_row(tmp_path):
    x = np.random.default_rng(1).normal(size=(8, 64))
    x[3] = 0.0
    params = _params(8, 64)
    raw = raw_from_array(tmp_path / "raw", x)
    for mode in ("absorption", "magnitude"):
        cfg = _cfg(mode, h=(0.3, 1e-6, 0.0))
        inter = pipeline.process_rows(raw, cfg, params, tmp_path / f"{mode}.rows",
                                      PhaseModel((0.3, 1e-6, 0.0)))
        out = inter.to_array()
        assert np.all(out[3] == 0.0)
        assert np.any(out[2] != 0.0)


def test_dc_column_lands_in_bin_zero(tmp_path):
    x = np.full((16, 4), 2.5)
    for mode in ("absorption", "magnitude"):
        got, _, _ = _run(tmp_path, x, _cfg(mode, apod_h=NONE, apod_v=NONE,
                                           zerofill_h=0, zerofill_v=0), name=mode)
        assert got[0, 0] == pytest.approx(2.5 * 16 * 4)
        got[0, 0] = 0.0
        assert np.max(np.abs(got)) < 1e-12


def test_pure_cosine_column_gives_one_line(tmp_path):
    n1, k0 = 64, 9
    t = np.arange(n1)
    inter = create_dataset(n1, 4, "real-f64", (n1, 4), tmp_path / "rows", "time-freq")
    inter.write_block(0, 0, np.repeat(np.cos(TWO_PI * k0 * t / n1)[:, None], 4, axis=1))
    for mode in ("absorption", "magnitude"):
        cfg = _cfg(mode, apod_v=NONE, zerofill_v=0)
        spec = pipeline.process_cols(inter, cfg, _params(n1, 8), tmp_path / f"{mode}.s2d",
                                     PhaseModel())
        col = spec.data.read_col(2)
        assert col[k0] == pytest.approx(n1 / 2)
        col[k0] = 0.0
        assert np.max(np.abs(col)) < 1e-12


def test_damped_cosine_absorption_matches_lorentzian(tmp_path):
    # on-bin damped cosine, exact phase, no window: the real part at bin k is
    # the real part of a geometric series with ratio r exp(-i 2 pi (k-k0)/M)
    n, k0, rate, tau = 256, 40, 2e6, 4e-5
    t = np.arange(n) / rate
    f0 = k0 * rate / n
    phi0 = 0.7
    x = np.cos(TWO_PI * f0 * t + phi0) * np.exp(-t / tau)
    params = _params(1, n, rate)
    cfg = _cfg(h=(phi0, 0.0, 0.0), apod_h=NONE, zerofill_h=0)
    raw = raw_from_array(tmp_path / "raw", x[None, :])
    row = pipeline.process_rows(raw, cfg, params, tmp_path / "rows",
                                PhaseModel((phi0, 0.0, 0.0))).to_array()[0]
    r = np.exp(-1 / (rate * tau))
    k = np.arange(n // 2)
    pos = (1 - r**n) / (1 - r * np.exp(-1j * TWO_PI * (k - k0) / n))
    neg = (1 - r**n) / (1 - r * np.exp(-1j * TWO_PI * (k + k0) / n)) * np.exp(-2j * phi0)
    want = np.real(0.5 * (pos + neg))
    np.testing.assert_allclose(row, want, atol=1e-10 * want.max())
    assert row.argmax() == k0 and row[k0] > 0
    # symmetric about the line to the level of the negative-frequency image
    assert abs(row[k0 - 5] - row[k0 + 5]) < 0.02 * row[k0]


def test_instrument_scale_row_length():
    # 512k-point transients zerofilled twice keep 1M real bins
    assert pipeline.n_bins(524288, 2) == 1048576


@pytest.mark.parametrize("zf_h,zf_v", [(0, 0), (1, 2), (2, 1), (3, 0)])
def test_output_dims_follow_zerofill(tmp_path, zf_h, zf_v):
    x = np.random.default_rng(2).normal(size=(8, 16))
    got, _, _ = _run(tmp_path, x, _cfg(zerofill_h=zf_h, zerofill_v=zf_v))
    assert got.shape == (8 * 2**zf_v // 2, 16 * 2**zf_h // 2)


# ---------------------------------------------------------------- invariants
@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1), st.integers(3, 10))
def test_parseval_row_energy(seed, log_n):
    n = 2**log_n
    x = np.random.default_rng(seed).normal(size=(1, n))
    half = pipeline.spectrum_rows(x, np.ones(n), 0)[0]
    nyq = np.sum(x[0] * (-1.0) ** np.arange(n))  # the one bin the half spectrum drops
    energy = (abs(half[0])**2 + 2 * np.sum(np.abs(half[1:])**2) + nyq**2) / n
    assert energy == pytest.approx(np.sum(x**2), rel=1e-9)


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_stage2_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(2, 32, 6))
    cfg = _cfg(v=(0.5, 2e-5))
    w = cfg.apod_v.weights(32)
    nb = pipeline.n_bins(32, cfg.zerofill_v)
    from ms2d.phase import phase_factor
    fac = phase_factor(eval_phase_v(bin_frequencies(nb, 5e5), (0.5, 2e-5)))
    T = lambda Z: pipeline.transform_cols(Z, cfg, w, fac)
    lhs, rhs = T(a * X + b * Y), a * T(X) + b * T(Y)
    scale = max(1.0, np.max(np.abs(rhs)))
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * scale


@pytest.mark.parametrize("seed", range(3))
def test_magnitude_nonnegative_and_axes_monotone(tmp_path, seed):
    x = np.random.default_rng(seed).normal(size=(16, 64))
    got, spec, _ = _run(tmp_path, x, _cfg("magnitude"))
    assert got.min() >= 0
    assert np.all(np.diff(spec.h_hz) > 0) and np.all(np.diff(spec.v_hz) > 0)


def test_absorption_values_can_be_negative(tmp_path):
    x = np.random.default_rng(0).normal(size=(16, 64))
    got, _, _ = _run(tmp_path, x, _cfg("absorption"))
    assert got.min() < 0


# ------------------------------------------------- out-of-core determinism
@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    spec = simulate.standard_scene(sigma=4.0, seed=2, n_t1=64, n_t2=4096)
    raw, truth = simulate.synthesize(spec, d / "raw")
    return d, raw, spec, truth


def test_output_independent_of_budget_and_threads(small_scene):
    d, raw, spec, _ = small_scene
    outs = []
    for i, (budget, threads) in enumerate([(1 << 20, 1), (64 << 20, 1), (1 << 20, 8),
                                           (64 << 20, 8), (70_000, 3)]):
        cfg = _cfg(chunk_bytes=budget)
        s, _ = pipeline.process_2d(raw, cfg, spec.params, d / f"det{i}.s2d", threads=threads)
        outs.append(s.data.to_array())
    for o in outs[1:]:
        assert o.tobytes() == outs[0].tobytes()


def test_env_budget_override_does_not_change_output(small_scene, monkeypatch):
    d, raw, spec, _ = small_scene
    a, _ = pipeline.process_2d(raw, _cfg("magnitude"), spec.params, d / "env_a.s2d")
    monkeypatch.setenv("MS2D_CHUNK_BYTES", "300000")
    assert _cfg().effective_chunk_bytes() == 300000
    b, _ = pipeline.process_2d(raw, _cfg("magnitude"), spec.params, d / "env_b.s2d", threads=4)
    assert a.data.to_array().tobytes() == b.data.to_array().tobytes()


def test_out_of_core_equals_in_memory(small_scene):
    d, raw, spec, _ = small_scene
    cfg = _cfg(h=(0.2, 1e-7, 1e-13), v=(0.4, 1e-6))
    s, _ = pipeline.process_2d(raw, cfg, spec.params, d / "ooc.s2d", threads=2)
    x = raw.to_array()
    p = spec.params
    n1, n2 = x.shape
    fh = bin_frequencies(pipeline.n_bins(n2, cfg.zf_h), p.sample_rate_t2)
    fv = bin_frequencies(pipeline.n_bins(n1, cfg.zerofill_v), p.sample_rate_t1)
    A = np.fft.rfft(x * cfg.apod_h.weights(n2), n=n2 << cfg.zf_h, axis=1)[:, :fh.size]
    A = np.real(A * np.exp(-1j * eval_phase_h(fh, cfg.phase_h.coeffs)))
    B = np.fft.rfft(A * cfg.apod_v.weights(n1)[:, None], n=n1 << cfg.zerofill_v,
                    axis=0)[:fv.size]
    want = np.real(B * np.exp(-1j * eval_phase_v(fv, cfg.phase_v.coeffs))[:, None])
    got = s.data.to_array()
    assert np.max(np.abs(got - want)) <= 1e-12 * np.max(np.abs(want))


def test_intermediate_removed_unless_kept(small_scene):
    d, raw, spec, _ = small_scene
    pipeline.process_2d(raw, _cfg("magnitude"), spec.params, d / "tmp1.s2d")
    assert not (d / "tmp1.s2d.rows").exists()
    pipeline.process_2d(raw, _cfg("magnitude"), spec.params, d / "tmp2.s2d",
                        keep_intermediate=True)
    assert (d / "tmp2.s2d.rows").exists()


def test_sidecar_carries_provenance(small_scene):
    d, raw, spec, _ = small_scene
    cfg = _cfg()
    pipeline.process_2d(raw, cfg, spec.params, d / "prov.s2d")
    s = open_spectrum(d / "prov.s2d")
    assert s.provenance["config_sha256"] == cfg.hash()
    assert s.mode == "absorption"
    assert s.cal_h is not None and s.cal_v is not None


def test_lp_repair_runs_in_stage_two(small_scene):
    d, raw, spec, _ = small_scene
    lp = LPSettings(enabled=True, n_corrupt=4, n_precursors=3)
    s, info = pipeline.process_2d(raw, _cfg(lp=lp), spec.params, d / "lp.s2d")
    base, _ = pipeline.process_2d(raw, _cfg(), spec.params, d / "nolp.s2d")
    assert info.n_corrupt == 4
    assert s.shape == base.shape
    assert not np.array_equal(s.data.to_array(), base.data.to_array())


# -------------------------------------------------------------- validation
def test_absorption_without_phase_model_is_rejected(small_scene):
    d, raw, spec, _ = small_scene
    with pytest.raises(ConfigError, match="absorption mode requires phase model"):
        pipeline.process_2d(raw, ProcessingConfig(mode="absorption"), spec.params, d / "x.s2d")
    with pytest.raises(ConfigError, match="absorption mode requires phase model"):
        pipeline.process_rows(raw, _cfg(), spec.params, d / "x.rows", None)


def test_magnitude_ignores_phase_model(tmp_path):
    x = np.random.default_rng(4).normal(size=(8, 32))
    a, _, _ = _run(tmp_path, x, ProcessingConfig(mode="magnitude"), name="a")
    b, _, _ = _run(tmp_path, x, _cfg("magnitude", h=(1.0, 2e-6, 0.0), v=(0.3, 1e-5)), name="b")
    assert a.tobytes() == b.tobytes()


def test_stage_domain_checks(tmp_path):
    h = create_dataset(4, 8, "real-f64", (4, 8), tmp_path / "ff", "freq-freq")
    with pytest.raises(ConfigError, match="time-time"):
        pipeline.process_rows(h, _cfg("magnitude"), _params(4, 8), tmp_path / "r")
    with pytest.raises(ConfigError, match="time-freq"):
        pipeline.process_cols(h, _cfg("magnitude"), _params(4, 8), tmp_path / "c")


# ---------------------------------------------- simulator ground truth
def _two_by_three(tmp_path, sigma, seed=5, scale=None):
    p = simulate.scene_params(n_t1=256, n_t2=8192)
    y = scale or 1.0
    layout = [(60e3, 1.0, 0.5, [(200e3, 1.0), (520e3, 0.8 * y), (800e3, 0.7)]),
              (150e3, 0.8, 0.5, [(260e3, 0.9), (610e3, 1.0), (880e3, 0.6)])]
    spec = simulate.scene_from_hz(p, layout, sigma=sigma, seed=seed)
    raw, truth = simulate.synthesize(spec, tmp_path / f"raw{sigma}{y}")
    return raw, spec, truth


def test_two_precursors_three_fragments_peak_table(tmp_path):
    raw, spec, truth = _two_by_three(tmp_path, sigma=2.0)
    assert sum(t.kind == "cross" for t in truth) == 6
    assert sum(t.kind == "auto" for t in truth) == 2
    s, _ = pipeline.process_2d(raw, _cfg(), spec.params, tmp_path / "pt.s2d")
    peaks = analyze.pick_peaks_2d(s, 6.0)
    assert len(peaks) == len(truth)
    for t in truth:
        r, c = t.bins(s.h_bin_hz, s.v_bin_hz)
        best = min(peaks, key=lambda q: abs(q.row - r) + abs(q.col - c))
        assert abs(best.row - r) <= 1 and abs(best.col - c) <= 1


def _noiseless_single(tmp_path, mode):
    p = simulate.scene_params(n_t1=64, n_t2=1024)
    vb = p.sample_rate_t1 / 64
    layout = [(5 * vb, 1.0, 0.4, [(200e3, 1.0), (520e3, 0.8)])]
    spec = simulate.scene_from_hz(p, layout, sigma=0.0, tau=2e-4)
    raw, truth = simulate.synthesize(spec, tmp_path / f"raw_{mode}")
    cfg = _cfg(mode, apod_h=NONE, apod_v=NONE, zerofill_h=0, zerofill_v=0)
    s, _ = pipeline.process_2d(raw, cfg, spec.params, tmp_path / f"{mode}.s2d")
    return s, truth


@pytest.mark.parametrize("mode", ["magnitude", "absorption"])
def test_noiseless_peak_count_equals_truth(tmp_path, mode):
    # unwindowed, unpadded transforms of on-bin modulation have no sidelobes,
    # so every maximum above the quantisation floor is a true peak
    s, truth = _noiseless_single(tmp_path, mode)
    peaks = analyze.pick_peaks_2d(s, 6.0)
    assert len(peaks) == len(truth) == 3
    got = sorted((q.row, q.col) for q in peaks)
    want = sorted(t.bins(s.h_bin_hz, s.v_bin_hz) for t in truth)
    assert got == want


def test_doubling_yield_doubles_cross_peak_height(tmp_path):
    heights = []
    for y in (1.0, 2.0):
        raw, spec, truth = _two_by_three(tmp_path, sigma=0.0, scale=y)
        s, _ = pipeline.process_2d(raw, _cfg(), spec.params, tmp_path / f"y{y}.s2d")
        t = next(t for t in truth if abs(t.freq_h - 520e3) < 1)
        r, c = t.bins(s.h_bin_hz, s.v_bin_hz)
        heights.append(s.data.read_block(r - 2, r + 3, c - 2, c + 3).max())
    assert heights[1] / heights[0] == pytest.approx(2.0, rel=0.01)


# ------------------------------------------------------------- extraction
@pytest.fixture(scope="module")
def residual_scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("resid")
    out = {}
    for res in (0.0, 0.6):
        spec = simulate.standard_scene(sigma=1.0, seed=7, n_t1=128, n_t2=8192, residual=res)
        raw, truth = simulate.synthesize(spec, d / f"raw{res}")
        s, _ = pipeline.process_2d(raw, _cfg(), spec.params, d / f"s{res}.s2d")
        out[res] = (s, spec, truth)
    return out


def test_fragment_scan_sums_rows(residual_scene):
    s, spec, truth = residual_scene[0.6]
    pre = spec.precursors[0].mz
    one = analyze.extract_fragment_scan(s, pre, 1)
    five = analyze.extract_fragment_scan(s, pre, 5)
    r = int(np.nanargmin(np.abs(s.v_mz - pre)))
    np.testing.assert_allclose(five.values, s.data.read_block(r - 2, r + 3, 0, s.shape[1]).sum(0),
                               rtol=0, atol=1e-9)
    assert five.rows_summed == 5 and one.rows_summed == 1
    c0, c1 = s.col_band()
    sig = analyze.noise_sigma(one.values[c0:c1])
    pk = analyze.pick_peaks_1d(one, 6.0, noise=sig, band=(c0, c1))
    found = sorted(p.centroid_mz for p in pk[:4])
    want = sorted(mz for mz, _ in spec.precursors[0].fragments)
    np.testing.assert_allclose(found, want, rtol=2e-4)


def test_precursor_scan_shows_its_precursor(residual_scene):
    s, spec, truth = residual_scene[0.6]
    for k, pre in enumerate(spec.precursors):
        frag = pre.fragments[0][0]
        scan = analyze.extract_precursor_scan(s, frag)
        r0, r1 = s.row_band()
        top = r0 + int(np.argmax(scan.values[r0:r1]))
        assert abs(scan.mz[top] - pre.mz) < 3 * abs(scan.mz[top] - scan.mz[top + 1])


def test_autocorrelation_line_needs_residual(residual_scene):
    for res, expect in ((0.6, True), (0.0, False)):
        s, spec, truth = residual_scene[res]
        with pytest.warns(UserWarning, match="autocorrelation locus"):
            auto = analyze.extract_autocorrelation(s)
        sigma = analyze.global_noise(s)
        for pre in spec.precursors:
            ok = np.isfinite(auto.mz)
            c = int(np.nanargmin(np.where(ok, np.abs(auto.mz - pre.mz), np.nan)))
            peak = np.max(auto.values[max(0, c - 3):c + 4])
            assert (peak > 10 * sigma) == expect

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from sdgs_sim.geometry import GroundSite, LinkConstants, OrbitElements
from sdgs_sim.uncertainty import (
    ErrorState,
    LosGeometry,
    RunBiases,
    Scenario,
    UncertaintyConfig,
    clock_range_error_m,
    initial_state,
    monte_carlo_open_loop,
    open_loop_trajectory,
    range_error_at,
    run_rng,
    sample_run_biases,
    velocity_error_at,
)

C = 299792458.0
ZERO = UncertaintyConfig(
    eph_along_track_bias_m=0.0, eph_drift_rw_m_per_sqrt_s=0.0, gnss_sigma_h_m=0.0, gnss_sigma_v_m=0.0,
    clock_bias_sigma_us=0.0, clock_drift_ppm=0.0, prop_jitter_sigma_us=0.0, prop_fast_sigma_us=0.0,
    osc_static_sigma_hz=0.0, osc_jitter_sigma_hz=0.0,
)
SITE = GroundSite("Shenzhen", 22.5, 114.0)


@pytest.fixture(scope="module")
def scenario():
    return Scenario.longest_pass(SITE, OrbitElements())


def _biases(**kw):
    base = dict(eph_bias_m=0.0, clock_bias_s=0.0, clock_drift=0.0, resync_phase_s=0.0, osc_static_hz=0.0,
                gnss_enu_m=(0.0, 0.0, 0.0))
    base.update(kw)
    return RunBiases(**base)


def test_run_biases_are_deterministic():
    cfg = UncertaintyConfig()
    assert sample_run_biases(cfg, run_rng(4, "x")) == sample_run_biases(cfg, run_rng(4, "x"))
    assert sample_run_biases(cfg, run_rng(4, "x")) != sample_run_biases(cfg, run_rng(4, "y"))


def test_along_track_bias_moments():
    rng = np.random.default_rng(0)
    cfg = UncertaintyConfig()
    b = np.array([sample_run_biases(cfg, rng).eph_bias_m for _ in range(100_000)])
    assert b.min() >= -150.0 and b.max() <= 150.0
    assert abs(b.mean()) < 2.0
    assert b.min() < -149.0 and b.max() > 149.0


def test_zero_config_gives_zero_biases():
    b = sample_run_biases(ZERO, np.random.default_rng(1))
    assert b.eph_bias_m == 0 and b.clock_bias_s == 0 and b.clock_drift == 0 and b.osc_static_hz == 0
    assert b.gnss_enu_m == (0.0, 0.0, 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        UncertaintyConfig(gnss_sigma_h_m=-1.0)
    with pytest.raises(ValueError):
        UncertaintyConfig(clock_resync_interval_s=0.0)
    with pytest.raises(ValueError):
        UncertaintyConfig(prop_fast_sigma_us=0.5, prop_jitter_sigma_us=0.4)


def test_zero_config_range_and_velocity_errors_are_zero():
    rng = np.random.default_rng(2)
    b = sample_run_biases(ZERO, rng)
    state = initial_state(ZERO, 0.0, 0.005, rng)
    r = range_error_at(ZERO, b, 0.0, state, rng)
    v = velocity_error_at(ZERO, b, 0.0, state)
    assert r.total_dtau_s == 0.0
    assert v.total_dcfo_hz == 0.0


def test_clock_drift_after_four_seconds():
    assert clock_range_error_m(_biases(clock_drift=0.5e-6), 4.0) == pytest.approx(C * 2e-6)
    assert C * 2e-6 == pytest.approx(599.585, abs=1e-3)
    cfg = replace(ZERO, clock_drift_ppm=0.5, clock_resync_interval_s=10.0)
    rng = np.random.default_rng(0)
    state = ErrorState(t_s=3.995, dt_s=0.005)
    r = range_error_at(cfg, _biases(clock_drift=0.5e-6), 4.0, state, rng)
    assert r.d_rho_clk_m == pytest.approx(599.585, abs=1e-3)
    assert r.total_dtau_s == pytest.approx(2.0e-6, abs=1e-15)


def test_clock_term_resets_at_resync():
    cfg = replace(ZERO, clock_drift_ppm=0.5, clock_resync_interval_s=4.0)
    rng = np.random.default_rng(0)
    b = _biases(clock_drift=0.5e-6)
    state = ErrorState(t_s=3.0, dt_s=1.0)
    before = range_error_at(cfg, b, 3.999, state, rng).d_rho_clk_m
    after = range_error_at(cfg, b, 4.001, state, rng).d_rho_clk_m
    assert before > 590.0 and after < 1.0


def test_prop_jitter_quantile():
    cfg = replace(ZERO, prop_jitter_sigma_us=0.4, prop_fast_sigma_us=0.21)
    rng = np.random.default_rng(7)
    b = sample_run_biases(cfg, rng)
    vals = np.empty(100_000)
    for i in range(vals.size):
        state = initial_state(cfg, 10.0, 0.005, rng)
        vals[i] = range_error_at(cfg, b, 10.0, state, rng).total_dtau_s
    p95 = np.quantile(np.abs(vals), 0.95)
    assert p95 == pytest.approx(1.959964 * 0.4e-6, rel=0.03)


def test_velocity_error_to_hertz():
    state = ErrorState(t_s=0.0, dt_s=0.005, eph_vel_ms=0.1)
    v = velocity_error_at(ZERO, _biases(), 0.0, state)
    assert v.total_dcfo_hz == pytest.approx(0.1 / C * 2e9, abs=1e-12)
    assert v.total_dcfo_hz == pytest.approx(0.667, abs=5e-4)


def test_cfo_distribution_matches_gaussian_convolution():
    cfg = replace(ZERO, osc_static_sigma_hz=250.0, osc_jitter_sigma_hz=50.0, osc_jitter_corr_s=0.0,
                  eph_drift_rw_m_per_sqrt_s=3.0, eph_vel_corr_s=1.0)
    hz = LinkConstants().hz_per_ms
    sigma = math.sqrt(250.0**2 + 50.0**2 + (hz * 3.0) ** 2)
    rng = np.random.default_rng(9)
    vals = np.empty(100_000)
    for i in range(vals.size):
        b = sample_run_biases(cfg, rng)
        state = initial_state(cfg, 0.0, 0.005, rng)
        vals[i] = velocity_error_at(cfg, b, 0.0, state, rng).total_dcfo_hz
    oracle = stats.norm.ppf(0.975) * sigma
    assert np.quantile(np.abs(vals), 0.95) == pytest.approx(oracle, rel=0.05)


def test_decomposition_identity(scenario):
    cfg = UncertaintyConfig()
    rng = run_rng(1, "decomp")
    b = sample_run_biases(cfg, rng)
    t = scenario.window[0] + 100.0 + 0.005 * np.arange(2000)
    state = initial_state(cfg, float(t[0]), 0.005, rng)
    r, v = open_loop_trajectory(cfg, b, state, LosGeometry.build(SITE, scenario.elems, t), rng)
    total = r.d_rho_eph_m + r.d_rho_ue_m + r.d_rho_clk_m + r.d_rho_prop_m
    assert np.all(r.total_dtau_s == total / C)
    assert np.max(np.abs(r.total_dtau_s * C - total)) / C < 1e-15
    hz = LinkConstants().hz_per_ms
    assert np.max(np.abs(v.total_dcfo_hz - (hz * (v.d_vr_eph_ms + v.d_vr_ue_ms) + v.d_f_osc_hz))) < 1e-9


def test_scalar_and_vector_paths_agree(scenario):
    cfg = UncertaintyConfig()
    t = scenario.window[0] + 200.0 + 0.005 * np.arange(400)
    geom = LosGeometry.build(SITE, scenario.elems, t)

    rng = run_rng(3, "paths")
    b = sample_run_biases(cfg, rng)
    state = initial_state(cfg, float(t[0]), 0.005, rng)
    r_vec, v_vec = open_loop_trajectory(cfg, b, state, geom, rng)

    rng = run_rng(3, "paths")
    b2 = sample_run_biases(cfg, rng)
    state2 = initial_state(cfg, float(t[0]), 0.005, rng)
    tau, cfo = [], []
    for k, tk in enumerate(t):
        g = geom.at(k)
        tau.append(range_error_at(cfg, b2, float(tk), state2, rng, g).total_dtau_s)
        cfo.append(velocity_error_at(cfg, b2, float(tk), state2, geom=g).total_dcfo_hz)
    assert b == b2
    assert np.allclose(tau, r_vec.total_dtau_s, rtol=1e-9, atol=1e-18)
    assert np.allclose(cfo, v_vec.total_dcfo_hz, rtol=1e-9, atol=1e-9)
    assert state.rw_m == pytest.approx(state2.rw_m, rel=1e-9)


def test_random_walk_variance_is_linear_in_time():
    cfg = replace(ZERO, eph_drift_rw_m_per_sqrt_s=0.2)
    rng = np.random.default_rng(5)
    times = [1.0, 2.0, 4.0, 8.0]
    out = np.empty((10_000, len(times)))
    for i in range(out.shape[0]):
        state = ErrorState(t_s=0.0, dt_s=1.0)
        for j, t in enumerate(times):
            out[i, j] = range_error_at(cfg, _biases(), t, state, rng).d_rho_eph_m
    var = out.var(axis=0)
    for v, t in zip(var, times):
        assert v == pytest.approx(0.04 * t, rel=0.10)


SMALL_MC = dict(segment_s=1.5, warmup_s=0.5, samples_per_run=10)


def test_monte_carlo_zero_config(scenario):
    s = monte_carlo_open_loop(ZERO, scenario, 1000, **SMALL_MC)
    assert (s.ta_open_us.p50, s.ta_open_us.p95, s.ta_open_us.p99) == (0.0, 0.0, 0.0)
    assert (s.cfo_open_hz.p50, s.cfo_open_hz.p95, s.cfo_open_hz.p99) == (0.0, 0.0, 0.0)


def test_monte_carlo_is_deterministic(scenario):
    cfg = UncertaintyConfig(seed=3)
    assert monte_carlo_open_loop(cfg, scenario, 1000, **SMALL_MC) == monte_carlo_open_loop(cfg, scenario, 1000, **SMALL_MC)


def test_monte_carlo_monotone_in_scale(scenario):
    cfg = UncertaintyConfig(seed=5)
    prev = None
    for k in (1, 2, 4):
        s = monte_carlo_open_loop(cfg.scaled(k), scenario, 1000, **SMALL_MC)
        cur = [s.ta_open_us.p50, s.ta_open_us.p95, s.ta_open_us.p99, s.cfo_open_hz.p50, s.cfo_open_hz.p95,
               s.cfo_open_hz.p99]
        if prev is not None:
            assert all(c >= p for c, p in zip(cur, prev))
        prev = cur


def test_monte_carlo_needs_1000_runs(scenario):
    with pytest.raises(ValueError):
        monte_carlo_open_loop(UncertaintyConfig(), scenario, 999)


def test_longest_pass_is_a_real_pass(scenario):
    lo, hi = scenario.window
    assert 600.0 < hi - lo < 900.0

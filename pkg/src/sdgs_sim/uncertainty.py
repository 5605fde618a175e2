"""Open-loop timing/frequency residuals from ephemeris, GNSS, clock and
propagation perturbations.

Two paths produce the same numbers: ``range_error_at``/``velocity_error_at``
advance one sample at a time through an :class:`ErrorState`, and
``open_loop_trajectory`` evaluates a whole uniformly sampled segment with
numpy. Both consume the same per-tick innovations, drawn as rows of five
standard normals (see ``INNOVATIONS``), so a given generator state yields the
same trajectory from either path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.signal import lfilter

from .geometry import (
    EARTH_ROTATION_RAD_S,
    GroundSite,
    LinkConstants,
    OrbitElements,
    line_of_sight,
    pass_window,
    propagate,
    range_acceleration,
)
from .stats import nearest_rank

INNOVATIONS = ("eph_rw", "prop_slow", "prop_fast", "osc_jitter", "eph_vel")


@dataclass(frozen=True)
class UncertaintyConfig:
    eph_along_track_bias_m: float = 150.0
    eph_drift_rw_m_per_sqrt_s: float = 0.2
    eph_vel_corr_s: float = 1.0
    gnss_sigma_h_m: float = 5.0
    gnss_sigma_v_m: float = 10.0
    clock_bias_sigma_us: float = 1.2
    clock_drift_ppm: float = 0.5
    clock_resync_interval_s: float = 4.0
    prop_jitter_sigma_us: float = 0.4
    prop_fast_sigma_us: float = 0.1976
    prop_fast_corr_s: float = 0.0078
    prop_slow_corr_s: float = 20.0
    osc_static_sigma_hz: float = 450.0
    osc_static_offset_hz: float | None = None
    osc_jitter_sigma_hz: float = 29.45
    osc_jitter_corr_s: float = 0.0077
    seed: int = 2026

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("seed", "osc_static_offset_hz") or v is None:
                continue
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"UncertaintyConfig.{f.name} must be finite and >= 0, got {v}")
        if not self.clock_resync_interval_s > 0:
            raise ValueError("UncertaintyConfig.clock_resync_interval_s must be > 0")
        if self.prop_fast_sigma_us > self.prop_jitter_sigma_us:
            raise ValueError("UncertaintyConfig.prop_fast_sigma_us exceeds prop_jitter_sigma_us")

    @property
    def prop_slow_sigma_us(self) -> float:
        return math.sqrt(self.prop_jitter_sigma_us**2 - self.prop_fast_sigma_us**2)

    def scaled(self, k: float) -> "UncertaintyConfig":
        """Every perturbation magnitude multiplied by ``k``; timescales untouched."""
        keys = (
            "eph_along_track_bias_m", "eph_drift_rw_m_per_sqrt_s", "gnss_sigma_h_m",
            "gnss_sigma_v_m", "clock_bias_sigma_us", "clock_drift_ppm",
            "prop_jitter_sigma_us", "prop_fast_sigma_us", "osc_static_sigma_hz",
            "osc_jitter_sigma_hz",
        )
        kw = {key: getattr(self, key) * k for key in keys}
        if self.osc_static_offset_hz is not None:
            kw["osc_static_offset_hz"] = self.osc_static_offset_hz * k
        return replace(self, **kw)


@dataclass(frozen=True)
class RunBiases:
    eph_bias_m: float
    clock_bias_s: float
    clock_drift: float  # fractional, signed
    resync_phase_s: float
    osc_static_hz: float
    gnss_enu_m: tuple[float, float, float]


@dataclass
class RangeErrorSample:
    t_s: float | np.ndarray
    d_rho_eph_m: float | np.ndarray
    d_rho_ue_m: float | np.ndarray
    d_rho_clk_m: float | np.ndarray
    d_rho_prop_m: float | np.ndarray
    total_dtau_s: float | np.ndarray


@dataclass
class VelocityErrorSample:
    t_s: float | np.ndarray
    d_vr_eph_ms: float | np.ndarray
    d_vr_ue_ms: float | np.ndarray
    d_f_osc_hz: float | np.ndarray
    total_dcfo_hz: float | np.ndarray


@dataclass
class ResidualSample:
    t_s: float | np.ndarray
    dtau_open_s: float | np.ndarray
    dcfo_open_hz: float | np.ndarray
    dtau_closed_s: float | np.ndarray | None = None
    dcfo_closed_hz: float | np.ndarray | None = None


def sample_run_biases(cfg: UncertaintyConfig, rng: np.random.Generator) -> RunBiases:
    """Per-run static draws. The draw order is fixed; changing it changes every run."""
    u = rng.random(3)
    z = rng.standard_normal(5)
    osc = cfg.osc_static_offset_hz if cfg.osc_static_offset_hz is not None else cfg.osc_static_sigma_hz * z[1]
    return RunBiases(
        eph_bias_m=cfg.eph_along_track_bias_m * (2.0 * u[0] - 1.0),
        clock_bias_s=cfg.clock_bias_sigma_us * 1e-6 * z[0],
        clock_drift=cfg.clock_drift_ppm * 1e-6 * (1.0 if u[1] < 0.5 else -1.0),
        resync_phase_s=cfg.clock_resync_interval_s * u[2],
        osc_static_hz=float(osc),
        gnss_enu_m=(cfg.gnss_sigma_h_m * z[2], cfg.gnss_sigma_h_m * z[3], cfg.gnss_sigma_v_m * z[4]),
    )


@dataclass
class LosGeometry:
    """Line-of-sight quantities the error model projects onto (arrays over time)."""

    t_s: np.ndarray
    los: np.ndarray  # (n, 3) unit vectors, site -> satellite
    los_dot: np.ndarray  # (n, 3), 1/s
    enu: np.ndarray  # (n, 3, 3) rows: east, north, up in the inertial frame
    range_accel_ms2: np.ndarray
    sat_speed_ms: float

    @classmethod
    def build(cls, site: GroundSite, elems: OrbitElements, t_s) -> "LosGeometry":
        t = np.atleast_1d(np.asarray(t_s, dtype=float))
        eph = propagate(elems, t)
        los, los_dot = line_of_sight(site, eph)
        lat = math.radians(site.lat_deg)
        th = math.radians(site.lon_deg) + EARTH_ROTATION_RAD_S * t
        ct, st = np.cos(th), np.sin(th)
        zero = np.zeros_like(t)
        east = np.stack([-st, ct, zero], axis=-1)
        north = np.stack([-math.sin(lat) * ct, -math.sin(lat) * st, np.full_like(t, math.cos(lat))], axis=-1)
        up = np.stack([math.cos(lat) * ct, math.cos(lat) * st, np.full_like(t, math.sin(lat))], axis=-1)
        acc = np.atleast_1d(range_acceleration(site, eph, elems)) * 1000.0
        return cls(t, los, los_dot, np.stack([east, north, up], axis=1), acc, elems.speed_km_s * 1000.0)

    def at(self, k: int) -> "LosGeometry":
        return LosGeometry(
            self.t_s[k:k + 1], self.los[k:k + 1], self.los_dot[k:k + 1], self.enu[k:k + 1],
            self.range_accel_ms2[k:k + 1], self.sat_speed_ms,
        )


def _gnss_projection(biases: RunBiases, geom: LosGeometry):
    delta = np.einsum("j,njk->nk", np.asarray(biases.gnss_enu_m), geom.enu)
    delta_dot = EARTH_ROTATION_RAD_S * np.stack([-delta[:, 1], delta[:, 0], np.zeros(len(delta))], axis=-1)
    rho = np.sum(delta * geom.los, axis=-1)
    vr = np.sum(delta_dot * geom.los, axis=-1) + np.sum(delta * geom.los_dot, axis=-1)
    return rho, vr


def _ou_coeffs(sigma: float, corr_s: float, dt: float) -> tuple[float, float]:
    """AR(1) coefficient and innovation scale for a stationary Gauss-Markov process."""
    if corr_s <= 0:
        return 0.0, sigma
    a = math.exp(-dt / corr_s)
    return a, sigma * math.sqrt(1.0 - a * a)


@dataclass
class ErrorState:
    """Stateful part of the error model for sample-by-sample evaluation."""

    t_s: float
    dt_s: float
    rw_m: float = 0.0
    prop_slow_m: float = 0.0
    prop_fast_m: float = 0.0
    osc_jitter_hz: float = 0.0
    eph_vel_ms: float = 0.0
    innovations: np.ndarray | None = field(default=None, repr=False)


def initial_state(cfg: UncertaintyConfig, t0_s: float, dt_s: float, rng: np.random.Generator) -> ErrorState:
    """Stationary start for the Gauss-Markov terms; the random walk starts at 0."""
    z = rng.standard_normal(4)
    c = LinkConstants().c_ms
    return ErrorState(
        t_s=t0_s - dt_s,
        dt_s=dt_s,
        prop_slow_m=c * cfg.prop_slow_sigma_us * 1e-6 * z[0],
        prop_fast_m=c * cfg.prop_fast_sigma_us * 1e-6 * z[1],
        osc_jitter_hz=cfg.osc_jitter_sigma_hz * z[2],
        eph_vel_ms=cfg.eph_drift_rw_m_per_sqrt_s / math.sqrt(max(cfg.eph_vel_corr_s, 1e-12)) * z[3],
    )


def _clock_range_m(cfg, biases, t, c):
    age = np.mod(t + biases.resync_phase_s, cfg.clock_resync_interval_s)
    return c * (biases.clock_bias_s + biases.clock_drift * age)


def clock_range_error_m(biases: RunBiases, time_since_resync_s: float, c_ms: float = LinkConstants().c_ms) -> float:
    """Clock term for a given age since the last resync."""
    return c_ms * (biases.clock_bias_s + biases.clock_drift * time_since_resync_s)


def _advance(cfg: UncertaintyConfig, state: ErrorState, t_s: float, rng, c: float):
    dt = t_s - state.t_s
    if dt <= 0:
        raise ValueError("samples must advance in time")
    z = rng.standard_normal(len(INNOVATIONS))
    state.rw_m = state.rw_m + cfg.eph_drift_rw_m_per_sqrt_s * math.sqrt(dt) * z[0]
    a, s = _ou_coeffs(c * cfg.prop_slow_sigma_us * 1e-6, cfg.prop_slow_corr_s, dt)
    state.prop_slow_m = a * state.prop_slow_m + s * z[1]
    a, s = _ou_coeffs(c * cfg.prop_fast_sigma_us * 1e-6, cfg.prop_fast_corr_s, dt)
    state.prop_fast_m = a * state.prop_fast_m + s * z[2]
    a, s = _ou_coeffs(cfg.osc_jitter_sigma_hz, cfg.osc_jitter_corr_s, dt)
    state.osc_jitter_hz = a * state.osc_jitter_hz + s * z[3]
    vel_sigma = cfg.eph_drift_rw_m_per_sqrt_s / math.sqrt(max(cfg.eph_vel_corr_s, 1e-12))
    a, s = _ou_coeffs(vel_sigma, cfg.eph_vel_corr_s, dt)
    state.eph_vel_ms = a * state.eph_vel_ms + s * z[4]
    state.t_s = t_s


def range_error_at(
    cfg: UncertaintyConfig,
    biases: RunBiases,
    t_s: float,
    rw_state: ErrorState,
    rng: np.random.Generator,
    geom: LosGeometry | None = None,
    consts: LinkConstants = LinkConstants(),
) -> RangeErrorSample:
    """Advance ``rw_state`` to ``t_s`` and return the range-domain error terms.

    Without ``geom`` the GNSS term is projected on the local vertical.
    """
    c = consts.c_ms
    _advance(cfg, rw_state, t_s, rng, c)
    eph = biases.eph_bias_m + rw_state.rw_m
    if geom is None:
        ue = biases.gnss_enu_m[2]
    else:
        ue = float(_gnss_projection(biases, geom)[0][0])
    clk = float(_clock_range_m(cfg, biases, t_s, c))
    prop = rw_state.prop_slow_m + rw_state.prop_fast_m
    return RangeErrorSample(t_s, eph, ue, clk, prop, (eph + ue + clk + prop) / c)


def velocity_error_at(
    cfg: UncertaintyConfig,
    biases: RunBiases,
    t_s: float,
    rw_state: ErrorState,
    rng: np.random.Generator | None = None,
    geom: LosGeometry | None = None,
    consts: LinkConstants = LinkConstants(),
) -> VelocityErrorSample:
    """Velocity-domain terms at the state's current time.

    Reads the state advanced by :func:`range_error_at`; when ``rng`` is given
    and the state lags ``t_s``, the state is advanced first.
    """
    if rng is not None and t_s > rw_state.t_s:
        _advance(cfg, rw_state, t_s, rng, consts.c_ms)
    if geom is None:
        v_ue, shift = 0.0, 0.0
    else:
        v_ue = float(_gnss_projection(biases, geom)[1][0])
        shift = biases.eph_bias_m * float(geom.range_accel_ms2[0]) / geom.sat_speed_ms
    v_eph = rw_state.eph_vel_ms + shift
    osc = biases.osc_static_hz + rw_state.osc_jitter_hz
    total = consts.hz_per_ms * (v_eph + v_ue) + osc
    return VelocityErrorSample(t_s, v_eph, v_ue, osc, total)


def _gauss_markov(z: np.ndarray, x0: float, sigma: float, corr_s: float, dt: float) -> np.ndarray:
    a, s = _ou_coeffs(sigma, corr_s, dt)
    return lfilter([1.0], [1.0, -a], s * z, zi=[a * x0])[0]


def open_loop_trajectory(
    cfg: UncertaintyConfig,
    biases: RunBiases,
    state: ErrorState,
    geom: LosGeometry,
    rng: np.random.Generator,
    consts: LinkConstants = LinkConstants(),
) -> tuple[RangeErrorSample, VelocityErrorSample]:
    """Vectorised equivalent of repeated ``range_error_at``/``velocity_error_at``.

    ``geom.t_s`` must be uniformly spaced with the state's ``dt_s`` and start one
    step after ``state.t_s``. The state is left at the last sample.
    """
    t = geom.t_s
    n = len(t)
    dt = state.dt_s
    c = consts.c_ms
    z = rng.standard_normal((n, len(INNOVATIONS)))
    rw = state.rw_m + np.cumsum(cfg.eph_drift_rw_m_per_sqrt_s * math.sqrt(dt) * z[:, 0])
    prop_slow = _gauss_markov(z[:, 1], state.prop_slow_m, c * cfg.prop_slow_sigma_us * 1e-6, cfg.prop_slow_corr_s, dt)
    prop_fast = _gauss_markov(z[:, 2], state.prop_fast_m, c * cfg.prop_fast_sigma_us * 1e-6, cfg.prop_fast_corr_s, dt)
    osc_j = _gauss_markov(z[:, 3], state.osc_jitter_hz, cfg.osc_jitter_sigma_hz, cfg.osc_jitter_corr_s, dt)
    vel_sigma = cfg.eph_drift_rw_m_per_sqrt_s / math.sqrt(max(cfg.eph_vel_corr_s, 1e-12))
    eph_vel = _gauss_markov(z[:, 4], state.eph_vel_ms, vel_sigma, cfg.eph_vel_corr_s, dt)

    ue_rho, ue_vr = _gnss_projection(biases, geom)
    eph = biases.eph_bias_m + rw
    clk = _clock_range_m(cfg, biases, t, c)
    prop = prop_slow + prop_fast
    rng_err = RangeErrorSample(t, eph, ue_rho, clk, prop, (eph + ue_rho + clk + prop) / c)

    v_eph = eph_vel + biases.eph_bias_m * geom.range_accel_ms2 / geom.sat_speed_ms
    osc = biases.osc_static_hz + osc_j
    vel_err = VelocityErrorSample(t, v_eph, ue_vr, osc, consts.hz_per_ms * (v_eph + ue_vr) + osc)

    state.t_s = float(t[-1])
    state.rw_m = float(rw[-1])
    state.prop_slow_m = float(prop_slow[-1])
    state.prop_fast_m = float(prop_fast[-1])
    state.osc_jitter_hz = float(osc_j[-1])
    state.eph_vel_ms = float(eph_vel[-1])
    return rng_err, vel_err


# ---------------------------------------------------------------------------
# Monte Carlo budget


@dataclass(frozen=True)
class Scenario:
    """A station, an orbit and one visibility window to sample segments from."""

    site: GroundSite
    elems: OrbitElements
    window: tuple[float, float]
    consts: LinkConstants = LinkConstants()

    @classmethod
    def longest_pass(
        cls,
        site: GroundSite,
        elems: OrbitElements,
        consts: LinkConstants = LinkConstants(),
        horizon_s: float = 172800.0,
        min_elev_deg: float = 0.0,
    ) -> "Scenario":
        windows = pass_window(site, elems, elems.epoch_s, elems.epoch_s + horizon_s, min_elev_deg)
        if not windows:
            raise ValueError(f"no pass of {site.name} above {min_elev_deg} deg within {horizon_s} s")
        best = max(windows, key=lambda w: (w[1] - w[0], -w[0]))
        return cls(site, elems, best, consts)


@dataclass(frozen=True)
class Percentiles:
    p50: float
    p95: float
    p99: float

    @classmethod
    def of(cls, values) -> "Percentiles":
        v = np.abs(np.asarray(values, dtype=float))
        return cls(*(nearest_rank(v, p) for p in (50, 95, 99)))


@dataclass(frozen=True)
class PercentileSummary:
    """|residual| percentiles; TA in microseconds, CFO in hertz."""

    n_runs: int
    n_samples: int
    ta_open_us: Percentiles
    cfo_open_hz: Percentiles
    ta_closed_us: Percentiles | None = None
    cfo_closed_hz: Percentiles | None = None

    def rows(self) -> list[tuple[str, Percentiles]]:
        out = [("Residual TA after open-loop (us)", self.ta_open_us)]
        if self.ta_closed_us is not None:
            out.append(("Residual TA after closed-loop (us)", self.ta_closed_us))
        out.append(("Residual CFO after open-loop (Hz)", self.cfo_open_hz))
        if self.cfo_closed_hz is not None:
            out.append(("Residual CFO after closed-loop (Hz)", self.cfo_closed_hz))
        return out


def run_rng(seed: int, *key) -> np.random.Generator:
    """Independent generator per (seed, key...), stable across processes."""
    import zlib

    words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF]
    for k in key:
        words.append(zlib.crc32(str(k).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))


def segment_trajectory(
    cfg: UncertaintyConfig,
    scenario: Scenario,
    t0_s: float,
    n_ticks: int,
    dt_s: float,
    rng: np.random.Generator,
) -> tuple[ResidualSample, RangeErrorSample, VelocityErrorSample]:
    """One run's open-loop residual trajectory over ``n_ticks`` uniform samples."""
    biases = sample_run_biases(cfg, rng)
    state = initial_state(cfg, t0_s, dt_s, rng)
    t = t0_s + dt_s * np.arange(n_ticks)
    geom = LosGeometry.build(scenario.site, scenario.elems, t)
    r, v = open_loop_trajectory(cfg, biases, state, geom, rng, scenario.consts)
    return ResidualSample(t, r.total_dtau_s, v.total_dcfo_hz), r, v


def monte_carlo_open_loop(
    cfg: UncertaintyConfig,
    scenario: Scenario,
    n_runs: int = 1000,
    *,
    pid=None,
    segment_s: float = 6.0,
    warmup_s: float = 1.0,
    samples_per_run: int = 100,
    dt_s: float = 0.005,
) -> PercentileSummary:
    """Pooled |dtau| / |dcfo| percentiles over ``n_runs`` seeded pass segments.

    With ``pid`` the residual loop is closed over each segment as well and the
    closed-loop percentiles are reported from the same sample instants.
    """
    if n_runs < 1000:
        raise ValueError("monte_carlo_open_loop needs n_runs >= 1000")
    if pid is not None:
        from .controller import track

        dt_s = pid.t_fb_s
    n_ticks = int(round(segment_s / dt_s))
    first = int(round(warmup_s / dt_s))
    if n_ticks - first < samples_per_run:
        raise ValueError("segment too short for the requested samples per run")
    idx = first + (np.arange(samples_per_run) * (n_ticks - first)) // samples_per_run
    lo, hi = scenario.window
    ta_o, cf_o, ta_c, cf_c = [], [], [], []
    for run in range(n_runs):
        rng = run_rng(cfg.seed, "mc", run)
        t0 = lo + rng.random() * max(hi - lo - segment_s, 0.0)
        traj, _, _ = segment_trajectory(cfg, scenario, t0, n_ticks, dt_s, rng)
        ta_o.append(traj.dtau_open_s[idx])
        cf_o.append(traj.dcfo_open_hz[idx])
        if pid is not None:
            ta_c.append(track(traj.dtau_open_s, pid, pid.quant_tau_s, pid.integral_limit_tau_s)[idx])
            cf_c.append(track(traj.dcfo_open_hz, pid, pid.quant_f_hz, pid.integral_limit_f_hz)[idx])
    ta_o = np.concatenate(ta_o) * 1e6
    cf_o = np.concatenate(cf_o)
    summary = dict(
        n_runs=n_runs,
        n_samples=len(ta_o),
        ta_open_us=Percentiles.of(ta_o),
        cfo_open_hz=Percentiles.of(cf_o),
    )
    if pid is not None:
        summary["ta_closed_us"] = Percentiles.of(np.concatenate(ta_c) * 1e6)
        summary["cfo_closed_hz"] = Percentiles.of(np.concatenate(cf_c))
    return PercentileSummary(**summary)

"""Delayed, quantised discrete PID acting on residual timing and frequency error.

The correction is applied through an accumulator: the plant sees
``e[k] = disturbance[k] - c[k]`` and ``c[k+1] = c[k] + quantize(u[k])``.
TA and CFO are two independent loops sharing gains and timing.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .stats import nearest_rank
from .uncertainty import ResidualSample


class LoopDivergence(RuntimeError):
    """The closed loop left the plausible residual range (unstable gains/delay)."""


@dataclass(frozen=True)
class PidConfig:
    kp: float = 0.24429
    ki: float = 5.53188
    kd: float = 0.00171
    t_fb_s: float = 0.005
    d_fb_s: float = 0.005
    quant_tau_s: float = 1.0e-7
    quant_f_hz: float = 50.0
    integral_limit_tau_s: float = 1.0e-6
    integral_limit_f_hz: float = 100.0

    def __post_init__(self):
        for name in ("kp", "ki", "kd"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"PidConfig.{name} must be finite and >= 0, got {v}")
        if not self.t_fb_s > 0:
            raise ValueError(f"PidConfig.t_fb_s must be > 0, got {self.t_fb_s}")
        if self.d_fb_s < 0:
            raise ValueError(f"PidConfig.d_fb_s must be >= 0, got {self.d_fb_s}")
        if self.quant_tau_s < 0 or self.quant_f_hz < 0:
            raise ValueError("PidConfig quantisation steps must be >= 0")
        if self.integral_limit_tau_s <= 0 or self.integral_limit_f_hz <= 0:
            raise ValueError("PidConfig integral limits must be > 0")

    @property
    def delay_index(self) -> int:
        # tolerate ratios such as 0.3/0.1 landing just under an integer
        return int(math.floor(self.d_fb_s / self.t_fb_s + 1e-9))


@dataclass
class ControllerState:
    delay: int
    integral_limit: float = math.inf  # bound on T_fb * sum(e)
    error_history: deque = field(default=None)
    integral_acc: float = 0.0  # sum of delayed errors, unscaled
    accumulated_correction: float = 0.0
    k: int = 0

    def __post_init__(self):
        if self.error_history is None:
            self.error_history = deque(maxlen=self.delay + 2)

    @classmethod
    def for_loop(cls, cfg: PidConfig, integral_limit: float = math.inf) -> "ControllerState":
        return cls(delay=cfg.delay_index, integral_limit=integral_limit)


def quantize(value: float, step: float) -> float:
    """Round to the nearest multiple of ``step``, ties away from zero."""
    if step < 0:
        raise ValueError("quantisation step must be >= 0")
    if step == 0:
        return value
    return math.copysign(math.floor(abs(value) / step + 0.5) * step, value)


def controller_step(cfg: PidConfig, state: ControllerState, e_k: float) -> tuple[float, ControllerState]:
    """Push ``e_k`` and return the PID output computed on the delayed error."""
    if not math.isfinite(e_k):
        raise ValueError("controller error sample must be finite")
    d = state.delay
    hist = state.error_history
    hist.append(e_k)
    j = state.k - d
    if j >= 0:
        ed = hist[-1 - d]
        ed1 = hist[-2 - d] if j >= 1 else 0.0
        acc = state.integral_acc + ed
        bound = state.integral_limit / cfg.t_fb_s
        if acc > bound:
            acc = bound
        elif acc < -bound:
            acc = -bound
        state.integral_acc = acc
    else:
        ed = ed1 = 0.0
    u = cfg.kp * ed + cfg.ki * cfg.t_fb_s * state.integral_acc + cfg.kd * (ed - ed1) / cfg.t_fb_s
    state.k += 1
    return u, state


def track(disturbance, cfg: PidConfig, step: float, integral_limit: float = math.inf,
          abort_above: float = math.inf) -> np.ndarray:
    """Closed-loop residual for one loop; same recurrence as ``controller_step``.

    Written as a flat loop for speed. Results are bit-identical to driving
    ``controller_step`` by hand with ``c += quantize(u, step)``. Once
    ``|e|`` exceeds ``abort_above`` the rest of the output is ``inf``.
    """
    x = np.asarray(disturbance, dtype=float).tolist()
    n = len(x)
    e = [0.0] * n
    d = cfg.delay_index
    kp, ki, kd, t_fb = cfg.kp, cfg.ki, cfg.kd, cfg.t_fb_s
    bound = integral_limit / t_fb
    acc = 0.0
    c = 0.0
    floor, copysign = math.floor, math.copysign
    for k in range(n):
        ek = x[k] - c
        if not abs(ek) <= abort_above:
            e[k:] = [math.inf] * (n - k)
            break
        e[k] = ek
        j = k - d
        if j >= 0:
            ed = e[j]
            ed1 = e[j - 1] if j >= 1 else 0.0
            acc = acc + ed
            if acc > bound:
                acc = bound
            elif acc < -bound:
                acc = -bound
        else:
            ed = ed1 = 0.0
        u = kp * ed + ki * t_fb * acc + kd * (ed - ed1) / t_fb
        if step > 0:
            u = copysign(floor(abs(u) / step + 0.5) * step, u)
        c += u
    return np.asarray(e)


def _divergence_limit(open_values: np.ndarray) -> float:
    scale = nearest_rank(np.abs(open_values), 95)
    return 100.0 * scale if scale > 0 else math.inf


def _check_divergence(open_values: np.ndarray, closed: np.ndarray, label: str) -> None:
    limit = _divergence_limit(open_values)
    if limit == math.inf:
        return
    worst = float(np.max(np.abs(closed)))
    if not math.isfinite(worst) or worst > limit:
        raise LoopDivergence(f"{label} loop diverged: |e| reached {worst:.3g}, limit {limit:.3g}")


def closed_loop_track(cfg: PidConfig, open_loop_trajectory) -> ResidualSample | list[ResidualSample]:
    """Close both residual loops over a trajectory sampled every ``t_fb_s``.

    Accepts one :class:`ResidualSample` holding arrays, or a list of scalar
    samples; returns the same shape with the closed-loop fields filled.
    """
    as_list = isinstance(open_loop_trajectory, (list, tuple))
    if as_list:
        t = np.array([s.t_s for s in open_loop_trajectory], dtype=float)
        tau = np.array([s.dtau_open_s for s in open_loop_trajectory], dtype=float)
        cfo = np.array([s.dcfo_open_hz for s in open_loop_trajectory], dtype=float)
    else:
        t = np.asarray(open_loop_trajectory.t_s, dtype=float)
        tau = np.asarray(open_loop_trajectory.dtau_open_s, dtype=float)
        cfo = np.asarray(open_loop_trajectory.dcfo_open_hz, dtype=float)
    if t.size > 1 and not np.allclose(np.diff(t), cfg.t_fb_s, rtol=1e-6, atol=1e-9):
        raise ValueError("trajectory must be sampled at the feedback period t_fb_s")
    tau_c = track(tau, cfg, cfg.quant_tau_s, cfg.integral_limit_tau_s, _divergence_limit(tau))
    cfo_c = track(cfo, cfg, cfg.quant_f_hz, cfg.integral_limit_f_hz, _divergence_limit(cfo))
    _check_divergence(tau, tau_c, "TA")
    _check_divergence(cfo, cfo_c, "CFO")
    if as_list:
        return [ResidualSample(float(t[i]), float(tau[i]), float(cfo[i]), float(tau_c[i]), float(cfo_c[i]))
                for i in range(t.size)]
    return ResidualSample(t, tau, cfo, tau_c, cfo_c)


# ---------------------------------------------------------------------------
# Delay / quantisation sweep


@dataclass(frozen=True)
class SweepRow:
    t_fb_ms: float
    d_fb_ms: float
    quant_tau_us: float
    quant_f_hz: float
    ta_p95_us: float | None
    cfo_p95_hz: float | None
    stable: bool

    def as_csv(self) -> list:
        def fmt(v, nd):
            return "" if v is None else f"{v:.{nd}f}"

        return [f"{self.t_fb_ms:g}", f"{self.d_fb_ms:g}", f"{self.quant_tau_us:g}", f"{self.quant_f_hz:g}",
                fmt(self.ta_p95_us, 3), fmt(self.cfo_p95_hz, 1), str(self.stable).lower()]


SWEEP_COLUMNS = ["t_fb_ms", "d_fb_ms", "quant_tau_us", "quant_f_hz", "ta_p95_us", "cfo_p95_hz", "stable"]
DEFAULT_SWEEP = [(5.0, 5.0, 0.1, 50.0), (10.0, 15.0, 0.5, 100.0), (20.0, 30.0, 1.0, 200.0)]


def delay_quantization_sweep(
    scenario,
    sweep_rows=DEFAULT_SWEEP,
    *,
    base: PidConfig = PidConfig(),
    uncertainty=None,
    n_runs: int = 20,
    duration_s: float = 20.0,
    warmup_s: float = 2.0,
) -> list[SweepRow]:
    """Pooled closed-loop P95 per (t_fb ms, d_fb ms, quant_tau us, quant_f Hz) row.

    Every row replays the same seeded runs so rows differ only in loop timing
    and quantisation.
    """
    from dataclasses import replace

    from .uncertainty import UncertaintyConfig, run_rng, segment_trajectory

    if n_runs < 20:
        raise ValueError("the sweep needs at least 20 runs per row")
    cfg_u = uncertainty if uncertainty is not None else UncertaintyConfig()
    out = []
    lo, hi = scenario.window
    for t_fb_ms, d_fb_ms, q_tau_us, q_f_hz in sweep_rows:
        pid = replace(base, t_fb_s=t_fb_ms / 1e3, d_fb_s=d_fb_ms / 1e3,
                      quant_tau_s=q_tau_us * 1e-6, quant_f_hz=q_f_hz)
        n_ticks = int(round(duration_s / pid.t_fb_s))
        first = int(round(warmup_s / pid.t_fb_s))
        ta, cf = [], []
        stable = True
        for run in range(n_runs):
            rng = run_rng(cfg_u.seed, "sweep", run)
            t0 = lo + rng.random() * max(hi - lo - duration_s, 0.0)
            traj, _, _ = segment_trajectory(cfg_u, scenario, t0, n_ticks, pid.t_fb_s, rng)
            try:
                res = closed_loop_track(pid, traj)
            except LoopDivergence:
                stable = False
                break
            ta.append(np.abs(res.dtau_closed_s[first:]))
            cf.append(np.abs(res.dcfo_closed_hz[first:]))
        if stable:
            out.append(SweepRow(t_fb_ms, d_fb_ms, q_tau_us, q_f_hz,
                                nearest_rank(np.concatenate(ta), 95) * 1e6,
                                nearest_rank(np.concatenate(cf), 95), True))
        else:
            out.append(SweepRow(t_fb_ms, d_fb_ms, q_tau_us, q_f_hz, None, None, False))
    return out

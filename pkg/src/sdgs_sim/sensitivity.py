"""Multiplicative +/-20% perturbation of implementation constants.

Only the controller and link emulator depend on the perturbed constants, so
the open-loop trajectories are computed once and replayed for every draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .campaign import CampaignConfig, execute_run, open_loop_run, plan_runs, station_group_summary
from .controller import LoopDivergence
from .uncertainty import run_rng

# (section, field); section is an attribute path on CampaignConfig
THETA_CORE = (
    ("link.thresholds", "tau_cp_s"),
    ("link.thresholds", "f_scs_hz"),
    ("link.dwell", "t_warn_s"),
    ("link.dwell", "t_warm_s"),
    ("link.dwell", "t_switch_s"),
    ("link.dwell", "t_cleanup_s"),
    ("link.dwell", "guard_factor"),
    ("pid", "kp"),
    ("pid", "ki"),
    ("pid", "kd"),
    ("pid", "integral_limit_tau_s"),
    ("pid", "integral_limit_f_hz"),
)
THETA_TRANSPORT = tuple(
    ("link.transport", name)
    for name in ("rate_nominal_mbps", "rate_degraded_mbps", "latency_base_ms", "latency_retx_ms",
                 "jitter_nominal_ms", "jitter_degraded_ms", "loss_nominal", "loss_degraded")
)
THETA_SETS = {"core": THETA_CORE, "full": THETA_CORE + THETA_TRANSPORT}
METRICS = ("goodput_uplift", "rtt_p95_reduction", "ta_p95_us", "cfo_p95_hz")


def _get(obj, path):
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def perturb(cfg: CampaignConfig, eps: dict[tuple[str, str], float]) -> CampaignConfig:
    """Copy of ``cfg`` with each named constant scaled by ``1 + eps``.

    Sections are rebuilt once with all their fields so cross-field checks
    (for example dwell ordering) see the final values.
    """
    by_section: dict[str, dict[str, float]] = {}
    for (section, name), e in eps.items():
        by_section.setdefault(section, {})[name] = getattr(_get(cfg, section), name) * (1.0 + e)
    out = cfg
    for section, values in by_section.items():
        out = _replace_path(out, section, values)
    return out


def _replace_path(obj, path, values):
    head, _, rest = path.partition(".")
    child = getattr(obj, head)
    if rest:
        return replace(obj, **{head: _replace_path(child, rest, values)})
    return replace(obj, **{head: replace(child, **values)})


def headline_metrics(dataset, stations) -> dict[str, float]:
    """Goodput uplift, P95 RTT reduction and closed-loop P95s, averaged over ``stations``."""
    acc = {m: [] for m in METRICS}
    for st in stations:
        a = station_group_summary(dataset, st, "A")
        b = station_group_summary(dataset, st, "B")
        acc["goodput_uplift"].append(a.mean("goodput_mean") / b.mean("goodput_mean") - 1.0)
        acc["rtt_p95_reduction"].append(1.0 - a.mean("rtt_p95") / b.mean("rtt_p95"))
        acc["ta_p95_us"].append(a.mean("ta_p95_us"))
        acc["cfo_p95_hz"].append(a.mean("cfo_p95_hz"))
    return {m: float(np.mean(v)) for m, v in acc.items()}


@dataclass
class SensitivityDraw:
    index: int
    eps: dict
    metrics: dict | None = None
    deviations: dict | None = None
    unstable: bool = False
    note: str = ""


@dataclass
class SensitivityResult:
    nominal: dict
    draws: list[SensitivityDraw] = field(default_factory=list)
    spread: float = 0.2
    metric_names: tuple[str, ...] = METRICS

    @property
    def n_unstable(self) -> int:
        return sum(d.unstable for d in self.draws)

    @property
    def max_deviation(self) -> dict[str, float]:
        ok = [d for d in self.draws if not d.unstable]
        return {m: max((d.deviations[m] for d in ok), default=0.0) for m in self.metric_names}


class _Pipeline:
    """Campaign restricted to ``stations`` with cached open-loop trajectories."""

    def __init__(self, cfg: CampaignConfig, stations):
        self.plans = [p for p in plan_runs(cfg) if p.station.name in stations and p.spec.group in "AB"]
        self.open = [open_loop_run(cfg, p) for p in self.plans]
        self.stations = stations

    def metrics(self, cfg: CampaignConfig):
        dataset = [execute_run(cfg, p, ol) for p, ol in zip(self.plans, self.open)]
        diverged = [r.key for r in dataset if r.diverged]
        if diverged:
            return None, diverged
        return headline_metrics(dataset, self.stations), diverged


def sensitivity_check(
    cfg: CampaignConfig,
    n_perturbations: int = 20,
    *,
    spread: float = 0.2,
    theta: str = "core",
    scope: str = "all",
    seed: int | None = None,
    eps_override: list[dict] | None = None,
) -> SensitivityResult:
    """Max relative deviation of the headline metrics over perturbation draws.

    ``scope`` is ``"primary"`` (first station, the steady-state table's
    station) or ``"all"``. Draws whose loop diverges, or whose perturbed
    constants are invalid, are reported as unstable and left out of the max.
    """
    if n_perturbations < 0:
        raise ValueError("n_perturbations must be >= 0")
    if theta not in THETA_SETS:
        raise ValueError(f"theta must be one of {sorted(THETA_SETS)}")
    names = [s.name for s in cfg.stations]
    stations = names[:1] if scope == "primary" else names
    keys = THETA_SETS[theta]
    rng = run_rng(cfg.seed if seed is None else seed, "sensitivity", theta)
    draws_eps = eps_override if eps_override is not None else [
        dict(zip(keys, rng.uniform(-spread, spread, len(keys)))) for _ in range(n_perturbations)
    ]
    result = SensitivityResult(nominal={}, spread=spread)
    if not draws_eps:
        return result
    pipe = _Pipeline(cfg, stations)
    nominal, diverged = pipe.metrics(cfg)
    if diverged:
        raise LoopDivergence("nominal configuration diverged in " + ",".join(diverged))
    result.nominal = nominal
    for i, eps in enumerate(draws_eps):
        draw = SensitivityDraw(i, {f"{s}.{n}": e for (s, n), e in eps.items()})
        try:
            pert = perturb(cfg, eps)
        except ValueError as exc:
            draw.unstable, draw.note = True, f"invalid constants: {exc}"
            result.draws.append(draw)
            continue
        metrics, diverged = pipe.metrics(pert)
        if diverged:
            draw.unstable, draw.note = True, "loop diverged in " + ",".join(diverged)
        else:
            draw.metrics = metrics
            draw.deviations = {m: abs(metrics[m] - nominal[m]) / abs(nominal[m]) for m in METRICS}
        result.draws.append(draw)
    return result

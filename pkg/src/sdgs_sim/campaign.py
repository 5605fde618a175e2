"""A/B/D campaign harness: per-station runs, telemetry files, steady-state
filtering and run/group statistics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .controller import LoopDivergence, PidConfig, closed_loop_track
from .geometry import GroundSite, LinkConstants, OrbitElements, geometry_at, propagate
from .link import (
    HANDOVER_ORDER,
    TELEMETRY_FIELDS,
    HandoverState,
    LinkConfig,
    LinkSession,
    Mode,
    TelemetryRow,
    TickInputs,
    link_tick,
)
from .stats import MissingCoverageError, mean_std, nearest_rank
from .uncertainty import (
    LosGeometry,
    ResidualSample,
    Scenario,
    UncertaintyConfig,
    initial_state,
    open_loop_trajectory,
    run_rng,
    sample_run_biases,
)

DEFAULT_STATIONS = (
    GroundSite("Shenzhen", 22.5, 114.0),
    GroundSite("Beijing", 39.9, 116.4),
    GroundSite("Tokyo", 35.7, 139.7),
    GroundSite("Los Angeles", 34.1, -118.2),
)


@dataclass(frozen=True)
class RunSpec:
    id: str
    mode: Mode
    seed: int
    duration_s: float = 600.0

    @property
    def group(self) -> str:
        return self.id[:1]


DEFAULT_RUNS = (
    RunSpec("A1", Mode.EDGE_CONTROLLED, 11),
    RunSpec("A2", Mode.EDGE_CONTROLLED, 12),
    RunSpec("A3", Mode.EDGE_CONTROLLED, 13),
    RunSpec("B1", Mode.REFERENCE, 21),
    RunSpec("B2", Mode.REFERENCE, 22),
    RunSpec("B3", Mode.REFERENCE, 23),
    RunSpec("D1", Mode.PROBE, 31),
)

GROUP_MODE = {"A": Mode.EDGE_CONTROLLED, "B": Mode.REFERENCE, "D": Mode.PROBE}


@dataclass(frozen=True)
class CampaignConfig:
    stations: tuple[GroundSite, ...] = DEFAULT_STATIONS
    orbit: OrbitElements = OrbitElements()
    runs: tuple[RunSpec, ...] = DEFAULT_RUNS
    uncertainty: UncertaintyConfig = UncertaintyConfig(osc_static_offset_hz=805.0, seed=2026)
    pid: PidConfig = PidConfig()
    link: LinkConfig = LinkConfig()
    consts: LinkConstants = LinkConstants()
    seed: int = 2026
    downsample: int = 20
    min_elev_deg: float = 0.0
    search_horizon_s: float = 172800.0

    def problems(self) -> list[str]:
        """Invariant violations, each naming the offending section."""
        out = []
        if not self.stations:
            out.append("campaign.stations: at least one station required")
        names = [s.name for s in self.stations]
        if len(set(names)) != len(names):
            out.append("campaign.stations: duplicate station names")
        ids = [r.id for r in self.runs]
        if len(set(ids)) != len(ids):
            out.append("campaign.runs: duplicate run ids")
        seeds = [r.seed for r in self.runs]
        if len(set(seeds)) != len(seeds):
            out.append("campaign.runs: seeds must be distinct per run")
        for r in self.runs:
            want = GROUP_MODE.get(r.group)
            if want is None:
                out.append(f"campaign.runs: run {r.id} must start with A, B or D")
            elif r.mode is not want:
                out.append(f"campaign.runs: run-group invariant violated, {r.id} is {r.mode.value}, expected {want.value}")
            if not r.duration_s > 0:
                out.append(f"campaign.runs: run {r.id} duration_s must be > 0")
        if self.downsample < 1:
            out.append("campaign.downsample: must be >= 1")
        durations = {r.duration_s for r in self.runs}
        if len(durations) > 1:
            out.append("campaign.runs: A/B runs must share one orbital window, so durations must match")
        return out

    def config_hash(self) -> str:
        blob = json.dumps(_plain(asdict(self)), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Mode):
        return obj.value
    return obj


# ---------------------------------------------------------------------------
# Run planning and execution


@dataclass(frozen=True)
class RunPlan:
    station: GroundSite
    spec: RunSpec
    t0_s: float
    los_s: float
    n_ticks: int


def plan_runs(cfg: CampaignConfig) -> list[RunPlan]:
    """Every station's runs share the window ending at LOS of its longest pass."""
    problems = cfg.problems()
    if problems:
        raise ValueError("; ".join(problems))
    plans = []
    t_fb = cfg.pid.t_fb_s
    for site in cfg.stations:
        sc = Scenario.longest_pass(site, cfg.orbit, cfg.consts, cfg.search_horizon_s, cfg.min_elev_deg)
        los = sc.window[1]
        for spec in cfg.runs:
            n = int(round(spec.duration_s / t_fb))
            plans.append(RunPlan(site, spec, los - n * t_fb, los, n))
    return plans


@dataclass
class OpenLoopRun:
    """Tick-rate open-loop residuals and row-rate geometry for one run."""

    t_s: np.ndarray
    dtau_s: np.ndarray
    dcfo_hz: np.ndarray
    row_index: np.ndarray
    elevation_deg: np.ndarray
    slant_range_km: np.ndarray
    doppler_hz: np.ndarray


def _run_key(cfg: CampaignConfig, plan: RunPlan, *extra):
    return run_rng(cfg.seed, plan.station.name, plan.spec.id, plan.spec.seed, *extra)


def open_loop_run(cfg: CampaignConfig, plan: RunPlan) -> OpenLoopRun:
    rng = _run_key(cfg, plan, "uncertainty")
    t_fb = cfg.pid.t_fb_s
    t = plan.t0_s + t_fb * np.arange(plan.n_ticks)
    biases = sample_run_biases(cfg.uncertainty, rng)
    state = initial_state(cfg.uncertainty, float(t[0]), t_fb, rng)
    geom = LosGeometry.build(plan.station, cfg.orbit, t)
    r, v = open_loop_trajectory(cfg.uncertainty, biases, state, geom, rng, cfg.consts)
    rows = np.arange(0, plan.n_ticks, cfg.downsample)
    g = geometry_at(plan.station, propagate(cfg.orbit, t[rows]), cfg.consts)
    return OpenLoopRun(t, r.total_dtau_s, v.total_dcfo_hz, rows,
                       np.asarray(g.elevation_deg), np.asarray(g.slant_range_km), np.asarray(g.doppler_hz))


@dataclass
class RunResult:
    station: str
    spec: RunSpec
    rows: list[TelemetryRow]
    t0_s: float
    los_s: float
    diverged: bool = False

    @property
    def run_id(self) -> str:
        return self.spec.id

    @property
    def key(self) -> str:
        return f"{slug(self.station)}_{self.spec.id}"


def slug(name: str) -> str:
    return name.lower().replace(" ", "_")


def execute_run(cfg: CampaignConfig, plan: RunPlan, ol: OpenLoopRun | None = None) -> RunResult:
    """Controller (closed-loop modes only) then link emulator over one run."""
    if ol is None:
        ol = open_loop_run(cfg, plan)
    mode = plan.spec.mode
    tau_c = cfo_c = None
    diverged = False
    if mode.closed_loop:
        try:
            res = closed_loop_track(cfg.pid, ResidualSample(ol.t_s, ol.dtau_s, ol.dcfo_hz))
        except LoopDivergence:
            diverged = True
            mode = Mode.REFERENCE  # the loop is dropped; rows fall back to the open-loop prior
        else:
            tau_c, cfo_c = res.dtau_closed_s, res.dcfo_closed_hz
    rng = _run_key(cfg, plan, "transport")
    rtt_rng = _run_key(cfg, plan, "probe") if mode is Mode.PROBE else None
    session = LinkSession()
    dt_row = cfg.downsample * cfg.pid.t_fb_s
    rows = []
    name = plan.station.name
    for j, k in enumerate(ol.row_index.tolist()):
        t = float(ol.t_s[k])
        inp = TickInputs(
            t_s=t - plan.t0_s,
            station=name,
            run_id=plan.spec.id,
            mode=mode,
            elevation_deg=float(ol.elevation_deg[j]),
            slant_range_km=float(ol.slant_range_km[j]),
            doppler_hz=float(ol.doppler_hz[j]),
            time_to_los_s=plan.los_s - t,
            dtau_open_s=float(ol.dtau_s[k]),
            dcfo_open_hz=float(ol.dcfo_hz[k]),
            dtau_closed_s=None if tau_c is None else float(tau_c[k]),
            dcfo_closed_hz=None if cfo_c is None else float(cfo_c[k]),
        )
        rows.append(link_tick(inp, session, cfg.link, dt_row, rng, rtt_rng))
    if diverged:
        rows = [replace(r, mode=plan.spec.mode.value) for r in rows]
    return RunResult(name, plan.spec, rows, plan.t0_s, plan.los_s, diverged)


def _execute(args):
    cfg, plan = args
    return execute_run(cfg, plan)


def run_campaign(cfg: CampaignConfig, jobs: int = 1) -> list[RunResult]:
    """All station x run combinations, in config order; results do not depend on ``jobs``."""
    plans = plan_runs(cfg)
    jobs = max(1, min(jobs, len(plans)))
    if jobs == 1:
        return [execute_run(cfg, p) for p in plans]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_execute, [(cfg, p) for p in plans]))


# ---------------------------------------------------------------------------
# Telemetry files

_FMT = {
    "t_s": "{:.3f}",
    "elevation_deg": "{:.4f}",
    "slant_range_km": "{:.4f}",
    "doppler_hz": "{:.3f}",
    "dtau_open_us": "{:.6f}",
    "dcfo_open_hz": "{:.4f}",
    "dtau_closed_us": "{:.6f}",
    "dcfo_closed_hz": "{:.4f}",
    "goodput_mbps": "{:.4f}",
    "rtt_ms": "{:.4f}",
}


def _cell(name, value):
    if value is None:
        return ""
    fmt = _FMT.get(name)
    return fmt.format(value) if fmt else str(value)


def telemetry_csv(rows: list[TelemetryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TELEMETRY_FIELDS)
    for r in rows:
        w.writerow([_cell(f, getattr(r, f)) for f in TELEMETRY_FIELDS])
    return buf.getvalue()


def row_counts(rows) -> dict[str, int]:
    counts = {s.value: 0 for s in HANDOVER_ORDER}
    for r in rows:
        counts[r.handover_state] += 1
    return counts


def write_telemetry(cfg: CampaignConfig, dataset: list[RunResult], out_dir) -> list[Path]:
    """One CSV plus JSON sidecar per run under ``out_dir/telemetry``."""
    tdir = Path(out_dir) / "telemetry"
    tdir.mkdir(parents=True, exist_ok=True)
    digest = cfg.config_hash()
    paths = []
    for order, run in enumerate(dataset):
        path = tdir / f"{run.key}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(telemetry_csv(run.rows))
        meta = {
            "run_id": run.run_id,
            "mode": run.spec.mode.value,
            "order": order,
            "station": run.station,
            "seed": run.spec.seed,
            "campaign_seed": cfg.seed,
            "config_hash": digest,
            "start_s": run.t0_s,
            "end_s": run.los_s,
            "row_counts": row_counts(run.rows),
            "diverged": run.diverged,
            "version": __version__,
            "numpy": np.__version__,
        }
        with open(tdir / f"{run.key}.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(path)
    return paths


def _parse(name, text):
    if name in ("station", "run_id", "mode", "handover_state", "regime"):
        return text
    if name == "loss_event":
        return int(text)
    return None if text == "" else float(text)


def load_telemetry(out_dir) -> list[RunResult]:
    """Read back a telemetry directory written by :func:`write_telemetry`, in campaign order."""
    tdir = Path(out_dir) / "telemetry"
    if not tdir.is_dir():
        raise FileNotFoundError(f"no telemetry directory under {out_dir}")
    metas = [(json.loads(p.read_text(encoding="utf-8")), p) for p in sorted(tdir.glob("*.json"))]
    metas.sort(key=lambda m: m[0].get("order", 0))
    out = []
    for meta, meta_path in metas:
        with open(meta_path.with_suffix(".csv"), encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != TELEMETRY_FIELDS:
                raise ValueError(f"{meta_path.with_suffix('.csv')}: unexpected header")
            rows = [TelemetryRow(*(_parse(n, v) for n, v in zip(header, rec))) for rec in reader]
        spec = RunSpec(meta["run_id"], Mode(meta["mode"]), meta["seed"], meta["end_s"] - meta["start_s"])
        out.append(RunResult(meta["station"], spec, rows, meta["start_s"], meta["end_s"], meta["diverged"]))
    return out


# ---------------------------------------------------------------------------
# Statistics


def steady_state_filter(rows):
    """Rows tagged NORMAL, in their original order."""
    return [r for r in rows if r.handover_state == HandoverState.NORMAL.value]


@dataclass(frozen=True)
class RunSummary:
    run_id: str
    n_rows_total: int
    n_rows_normal: int
    goodput_mean: float
    goodput_std: float
    rtt_mean: float
    rtt_p95: float
    rtt_p99: float
    ta_p95_us: float | None
    cfo_p95_hz: float | None
    ta_open_p95_us: float
    cfo_open_p95_hz: float
    station: str = ""
    mode: str = ""


def summarize_run(rows) -> RunSummary:
    """Per-run statistics over the NORMAL rows; percentiles are nearest-rank."""
    rows = list(rows)
    normal = steady_state_filter(rows)
    if not normal:
        rid = rows[0].run_id if rows else "?"
        raise MissingCoverageError(f"run {rid} has no steady-state (NORMAL) rows")
    gp = np.array([r.goodput_mbps for r in normal])
    rtt = np.array([r.rtt_ms for r in normal])
    g_mean, g_std = mean_std(gp)
    closed = [r for r in normal if r.dtau_closed_us is not None]

    def p95(vals):
        return nearest_rank(np.abs(np.asarray(vals, dtype=float)), 95)

    return RunSummary(
        run_id=normal[0].run_id,
        n_rows_total=len(rows),
        n_rows_normal=len(normal),
        goodput_mean=g_mean,
        goodput_std=g_std,
        rtt_mean=float(np.mean(rtt)),
        rtt_p95=nearest_rank(rtt, 95),
        rtt_p99=nearest_rank(rtt, 99),
        ta_p95_us=p95([r.dtau_closed_us for r in closed]) if closed else None,
        cfo_p95_hz=p95([r.dcfo_closed_hz for r in closed]) if closed else None,
        ta_open_p95_us=p95([r.dtau_open_us for r in normal]),
        cfo_open_p95_hz=p95([r.dcfo_open_hz for r in normal]),
        station=normal[0].station,
        mode=normal[0].mode,
    )


GROUP_METRICS = ("goodput_mean", "rtt_mean", "rtt_p95", "rtt_p99", "ta_p95_us", "cfo_p95_hz",
                 "ta_open_p95_us", "cfo_open_p95_hz")


@dataclass(frozen=True)
class GroupSummary:
    n: int
    stats: dict = field(default_factory=dict)  # metric -> (mean, sample std)

    def mean(self, metric: str) -> float:
        return self.stats[metric][0]

    def std(self, metric: str) -> float:
        return self.stats[metric][1]


def summarize_group(summaries: list[RunSummary]) -> GroupSummary:
    """Mean and n-1 standard deviation of each per-run statistic."""
    if not summaries:
        raise MissingCoverageError("empty run group")
    stats = {}
    for m in GROUP_METRICS:
        vals = [getattr(s, m) for s in summaries]
        if any(v is None for v in vals):
            continue
        stats[m] = mean_std(vals)
    return GroupSummary(len(summaries), stats)


def group_runs(dataset: list[RunResult], station: str, group: str) -> list[RunResult]:
    return [r for r in dataset if r.station == station and r.spec.group == group]


def stations_of(dataset: list[RunResult]) -> list[str]:
    seen = []
    for r in dataset:
        if r.station not in seen:
            seen.append(r.station)
    return seen


def station_group_summary(dataset, station: str, group: str) -> GroupSummary:
    runs = group_runs(dataset, station, group)
    if not runs:
        raise MissingCoverageError(f"run group {group} missing for station {station}")
    return summarize_group([summarize_run(r.rows) for r in runs])


def transient_counts(dataset: list[RunResult]) -> dict[str, dict[str, tuple[int, float]]]:
    """Per-mode row counts and percentages for every handover state."""
    out = {}
    for mode in Mode:
        rows = [row for run in dataset if run.spec.mode is mode for row in run.rows]
        if not rows:
            continue
        counts = row_counts(rows)
        total = len(rows)
        out[mode.value] = {k: (v, 100.0 * v / total) for k, v in counts.items()}
    return out


def file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(map(str, paths)):
        h.update(os.path.basename(p).encode())
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()

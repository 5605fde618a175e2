"""Plain-text and CSV renderings of the campaign tables and the supporting analyses."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

from .campaign import (
    RunResult,
    station_group_summary,
    stations_of,
    summarize_run,
    transient_counts,
    group_runs,
)
from .link import HANDOVER_ORDER, Mode
from .stats import MissingCoverageError, percent_change


class MissingInputError(MissingCoverageError):
    """A table cannot be built because one of its input groups is absent."""


@dataclass(frozen=True)
class Table:
    name: str
    title: str
    header: list[str]
    rows: list[list[str]]

    def to_text(self) -> str:
        cells = [self.header] + self.rows
        widths = [max(len(str(r[i])) for r in cells) for i in range(len(self.header))]
        line = "  ".join("-" * w for w in widths)
        out = [self.title, line, "  ".join(h.ljust(w) for h, w in zip(self.header, widths)), line]
        for r in self.rows:
            out.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))
        out.append(line)
        return "\n".join(s.rstrip() for s in out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        w.writerows(self.rows)
        return buf.getvalue()


def _pm(mean: float, std: float, nd: int = 2) -> str:
    if std != std:  # nan for a single run
        return f"{mean:.{nd}f}"
    return f"{mean:.{nd}f} ± {std:.{nd}f}"


def _pct(v: float) -> str:
    return f"{v:+.1f}%"


def _require(dataset, station: str, group: str):
    if not group_runs(dataset, station, group):
        raise MissingInputError(f"run group {group} missing for station {station}")


def primary_station(dataset) -> str:
    stations = stations_of(dataset)
    if not stations:
        raise MissingInputError("empty telemetry dataset")
    return stations[0]


def steady_state_table(dataset: list[RunResult], station: str | None = None) -> Table:
    station = station or primary_station(dataset)
    for g in ("A", "B"):
        _require(dataset, station, g)
    a = station_group_summary(dataset, station, "A")
    b = station_group_summary(dataset, station, "B")
    rows = []
    for label, key in (("Artifact-level goodput (Mbps)", "goodput_mean"), ("Mean RTT (ms)", "rtt_mean"),
                       ("P95 RTT (ms)", "rtt_p95"), ("P99 RTT (ms)", "rtt_p99")):
        rows.append([label, _pm(b.mean(key), b.std(key)), _pm(a.mean(key), a.std(key)),
                     _pct(percent_change(a.mean(key), b.mean(key)))])
    return Table("steady_state", f"Steady-state comparison, {station} (NORMAL rows, n={a.n} per group)",
                 ["metric", f"reference (n={b.n})", f"edge-controlled (n={a.n})", "change"], rows)


def cross_station_table(dataset: list[RunResult]) -> Table:
    rows = []
    for st in stations_of(dataset):
        for g in ("A", "B"):
            _require(dataset, st, g)
        a = station_group_summary(dataset, st, "A")
        b = station_group_summary(dataset, st, "B")
        rows.append([st, f"{b.mean('goodput_mean'):.2f}", f"{a.mean('goodput_mean'):.2f}",
                     _pct(percent_change(a.mean("goodput_mean"), b.mean("goodput_mean"))),
                     f"{a.mean('ta_p95_us'):.2f}", f"{a.mean('cfo_p95_hz'):.0f}"])
    n = len({(r.station, r.run_id) for r in dataset})
    return Table("cross_station", f"Cross-station summary ({n} runs total)",
                 ["station", "reference goodput", "controlled goodput", "goodput change",
                  "closed-loop TA P95 (us)", "closed-loop CFO P95 (Hz)"], rows)


def _span(vals, nd):
    lo, hi = min(vals), max(vals)
    a, b = f"{lo:.{nd}f}", f"{hi:.{nd}f}"
    return a if a == b else f"{a}-{b}"


def reconciliation_table(dataset: list[RunResult], mc) -> Table:
    if mc is None or mc.ta_closed_us is None:
        raise MissingInputError("Monte Carlo summary with closed-loop rows is missing")
    stations = stations_of(dataset)
    for st in stations:
        for g in ("A", "B"):
            _require(dataset, st, g)
    a = [station_group_summary(dataset, st, "A") for st in stations]
    b = [station_group_summary(dataset, st, "B") for st in stations]
    rows = [
        ["Residual TA, open-loop (us)", f"{mc.ta_open_us.p95:.2f}", _span([s.mean("ta_open_p95_us") for s in b], 2)],
        ["Residual TA, closed-loop (us)", f"{mc.ta_closed_us.p95:.2f}", _span([s.mean("ta_p95_us") for s in a], 2)],
        ["Residual CFO, open-loop (Hz)", f"{mc.cfo_open_hz.p95:.0f}", _span([s.mean("cfo_open_p95_hz") for s in b], 0)],
        ["Residual CFO, closed-loop (Hz)", f"{mc.cfo_closed_hz.p95:.0f}", _span([s.mean("cfo_p95_hz") for s in a], 0)],
    ]
    return Table("reconciliation", "Model-based vs campaign residual P95",
                 ["metric (P95)", "model-based uncertainty", "campaign"], rows)


def transient_table(dataset: list[RunResult]) -> Table:
    counts = transient_counts(dataset)
    if not counts:
        raise MissingInputError("no runs in the dataset")
    rows = []
    for mode, per_state in counts.items():
        for st in HANDOVER_ORDER:
            n, pct = per_state[st.value]
            rows.append([mode, st.value, str(n), f"{pct:.2f}"])
    return Table("transient_counts", "Rows per handover state and mode", ["mode", "state", "rows", "percent"], rows)


def emit_tables(dataset: list[RunResult], mc) -> list[Table]:
    """The four campaign tables; raises :class:`MissingInputError` naming what is absent."""
    return [steady_state_table(dataset), cross_station_table(dataset), reconciliation_table(dataset, mc),
            transient_table(dataset)]


def run_table(dataset: list[RunResult]) -> Table:
    rows = []
    for run in dataset:
        s = summarize_run(run.rows)
        rows.append([run.station, run.run_id, run.spec.mode.value, str(s.n_rows_total), str(s.n_rows_normal),
                     f"{s.goodput_mean:.2f}", f"{s.rtt_mean:.2f}", f"{s.rtt_p95:.2f}",
                     "" if s.ta_p95_us is None else f"{s.ta_p95_us:.3f}",
                     "" if s.cfo_p95_hz is None else f"{s.cfo_p95_hz:.1f}"])
    return Table("runs", "Per-run steady-state summary",
                 ["station", "run", "mode", "rows", "normal rows", "goodput", "rtt mean", "rtt p95",
                  "TA P95 (us)", "CFO P95 (Hz)"], rows)


def probe_check(dataset: list[RunResult]) -> dict[str, float]:
    """Relative mean-RTT gap between each station's probe run and its A group."""
    out = {}
    for st in stations_of(dataset):
        d = [r for r in group_runs(dataset, st, "D") if r.spec.mode is Mode.PROBE]
        if not d:
            continue
        a = station_group_summary(dataset, st, "A").mean("rtt_mean")
        out[st] = abs(summarize_run(d[0].rows).rtt_mean - a) / a
    return out


def percentile_table(mc) -> Table:
    rows = [[label, f"{p.p50:.3g}", f"{p.p95:.3g}", f"{p.p99:.3g}"] for label, p in mc.rows()]
    return Table("montecarlo", f"Residual distribution ({mc.n_runs} runs, {mc.n_samples} pooled samples)",
                 ["metric", "P50", "P95", "P99"], rows)


def sweep_table(rows) -> Table:
    from .controller import SWEEP_COLUMNS

    return Table("sweep", "Delay / quantisation sweep (closed-loop P95)", list(SWEEP_COLUMNS),
                 [r.as_csv() for r in rows])


def sensitivity_table(result) -> Table:
    rows = []
    for d in result.draws:
        if d.unstable:
            rows.append([str(d.index), "UNSTABLE", "", "", "", d.note])
            continue
        rows.append([str(d.index), "ok"] + [f"{100 * d.deviations[m]:.3f}" for m in result.metric_names] + [""])
    if result.draws:
        rows.append(["max", f"{result.n_unstable} unstable"] +
                     [f"{100 * result.max_deviation[m]:.3f}" for m in result.metric_names] + [""])
    return Table("sensitivity", f"Relative deviation (%) under +/-{100 * result.spread:.0f}% constant perturbations",
                 ["draw", "status"] + list(result.metric_names) + ["note"], rows)


def write_tables(tables: list[Table], out_dir, fmt: str = "csv") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in tables:
        path = out / f"{t.name}.{'csv' if fmt == 'csv' else 'txt'}"
        path.write_text(t.to_csv() if fmt == "csv" else t.to_text(), encoding="utf-8", newline="\n")
        paths.append(path)
    return paths

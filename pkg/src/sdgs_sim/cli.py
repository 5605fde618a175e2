"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, SimConfig, default_config_text, load_config, validate_sections

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML config file (default: bundled defaults; '-' reads stdin)")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--seed-override", type=int, default=None, help="replace the config seed")
    common.add_argument("--jobs", type=int, default=None, help="worker processes for the campaign")
    common.add_argument("--format", choices=("csv", "text"), default="csv", help="table output format")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    p = argparse.ArgumentParser(prog="sdgs-sim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run the campaign and emit the four tables")
    sub.add_parser("montecarlo", parents=[common], help="open/closed-loop residual percentiles")
    sub.add_parser("sweep", parents=[common], help="delay / quantisation sweep")
    s = sub.add_parser("sensitivity", parents=[common], help="+/-20%% constant perturbation check")
    s.add_argument("--draws", type=int, default=None, help="override the number of draws")
    sub.add_parser("report", parents=[common], help="rebuild tables and figures from an output directory")
    sub.add_parser("validate", parents=[common], help="check the config without running")
    sub.add_parser("dump-config", help="print the bundled default config")
    return p


def _effective_seed(args, cfg: SimConfig) -> int:
    if args.seed_override is not None:
        return args.seed_override
    env = os.environ.get("SDGS_SIM_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError({"top": [f"SDGS_SIM_SEED must be an integer, got {env!r}"]}) from None
    return cfg.seed


def _emit(tables, out: Path, fmt: str) -> None:
    from .report import write_tables

    write_tables(tables, out / "report", fmt)
    for t in tables:
        print(t.to_text())


def _montecarlo(cfg: SimConfig, out: Path):
    from .uncertainty import Scenario, monte_carlo_open_loop

    site = cfg.campaign.stations[0]
    sc = Scenario.longest_pass(site, cfg.campaign.orbit, cfg.campaign.consts, cfg.campaign.search_horizon_s,
                               cfg.campaign.min_elev_deg)
    m = cfg.montecarlo
    mc = monte_carlo_open_loop(cfg.uncertainty, sc, m.n_runs, pid=cfg.campaign.pid, segment_s=m.segment_s,
                               warmup_s=m.warmup_s, samples_per_run=m.samples_per_run)
    out.mkdir(parents=True, exist_ok=True)
    (out / "montecarlo.json").write_text(json.dumps(asdict(mc), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return mc


def _load_mc(out: Path):
    from .uncertainty import PercentileSummary, Percentiles

    path = out / "montecarlo.json"
    if not path.is_file():
        return None
    d = json.loads(path.read_text(encoding="utf-8"))
    for k in ("ta_open_us", "cfo_open_hz", "ta_closed_us", "cfo_closed_hz"):
        if d.get(k) is not None:
            d[k] = Percentiles(**d[k])
    return PercentileSummary(**d)


def _campaign_figures(dataset, out: Path) -> None:
    from .campaign import group_runs, transient_counts
    from .plots import plot_run_residuals, plot_state_fractions

    st = dataset[0].station
    a, b = group_runs(dataset, st, "A"), group_runs(dataset, st, "B")
    if a and b:
        plot_run_residuals(a[0], b[0], out / "figures" / "residuals.png")
    plot_state_fractions(transient_counts(dataset), out / "figures" / "handover_states.png")


def cmd_run(cfg: SimConfig, args, out: Path) -> int:
    from .campaign import file_digest, run_campaign, write_telemetry
    from .report import emit_tables, run_table

    jobs = args.jobs or min(len(cfg.campaign.runs) * len(cfg.campaign.stations), os.cpu_count() or 1)
    t = time.perf_counter()
    dataset = run_campaign(cfg.campaign, jobs=jobs)
    paths = write_telemetry(cfg.campaign, dataset, out)
    print(f"campaign: {len(dataset)} runs in {time.perf_counter() - t:.1f} s, telemetry digest {file_digest(paths)}")
    mc = _montecarlo(cfg, out)
    _emit(emit_tables(dataset, mc) + [run_table(dataset)], out, args.format)
    if not args.no_figures:
        from .plots import plot_percentiles

        _campaign_figures(dataset, out)
        plot_percentiles(mc, out / "figures" / "montecarlo.png")
    return EXIT_OK


def cmd_montecarlo(cfg: SimConfig, args, out: Path) -> int:
    from .report import percentile_table

    mc = _montecarlo(cfg, out)
    _emit([percentile_table(mc)], out, args.format)
    if not args.no_figures:
        from .plots import plot_percentiles

        plot_percentiles(mc, out / "figures" / "montecarlo.png")
    return EXIT_OK


def cmd_sweep(cfg: SimConfig, args, out: Path) -> int:
    from .controller import delay_quantization_sweep
    from .report import sweep_table
    from .uncertainty import Scenario

    c = cfg.campaign
    sc = Scenario.longest_pass(c.stations[0], c.orbit, c.consts, c.search_horizon_s, c.min_elev_deg)
    s = cfg.sweep
    rows = delay_quantization_sweep(sc, s.rows, base=c.pid, uncertainty=cfg.uncertainty, n_runs=s.n_runs,
                                    duration_s=s.duration_s, warmup_s=s.warmup_s)
    table = sweep_table(rows)
    _emit([table], out, args.format)
    if not args.no_figures:
        from .plots import plot_loop_response, plot_sweep

        plot_sweep(rows, out / "figures" / "sweep.png")
        plot_loop_response(c.pid, cfg.loop_analysis, out / "figures" / "loop_response.png")
    return EXIT_OK


def cmd_sensitivity(cfg: SimConfig, args, out: Path) -> int:
    from .report import sensitivity_table
    from .sensitivity import sensitivity_check

    s = cfg.sensitivity
    n = s.n_draws if args.draws is None else args.draws
    if n < 0:
        raise ConfigError({"sensitivity": ["--draws must be >= 0"]})
    res = sensitivity_check(cfg.campaign, n, spread=s.spread, theta=s.theta, scope=s.scope)
    _emit([sensitivity_table(res)], out, args.format)
    if res.draws:
        worst = max(res.max_deviation.values())
        print(f"max relative deviation {100 * worst:.2f}% ({res.n_unstable} unstable draws)")
    return EXIT_OK


def cmd_report(cfg: SimConfig, args, out: Path) -> int:
    from .campaign import load_telemetry
    from .report import (
        MissingInputError,
        cross_station_table,
        reconciliation_table,
        run_table,
        steady_state_table,
        transient_table,
    )

    dataset = load_telemetry(out)
    mc = _load_mc(out)
    tables, missing = [], []
    for build in (lambda: steady_state_table(dataset), lambda: cross_station_table(dataset),
                  lambda: reconciliation_table(dataset, mc), lambda: transient_table(dataset),
                  lambda: run_table(dataset)):
        try:
            tables.append(build())
        except MissingInputError as exc:
            missing.append(str(exc))
    _emit(tables, out, args.format)
    if not args.no_figures:
        _campaign_figures(dataset, out)
    for m in missing:
        print(f"refused table: {m}", file=sys.stderr)
    return EXIT_RUNTIME if missing else EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "montecarlo": cmd_montecarlo,
    "sweep": cmd_sweep,
    "sensitivity": cmd_sensitivity,
    "report": cmd_report,
}


def cmd_validate(args) -> int:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib

    if args.config is None:
        text = default_config_text()
    elif args.config == "-":
        text = sys.stdin.read()
    else:
        p = Path(args.config)
        if not p.is_file():
            print(f"FAIL top: config file not found: {p}")
            return EXIT_CONFIG
        text = p.read_text(encoding="utf-8")
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        print(f"FAIL top: not valid TOML: {exc}")
        return EXIT_CONFIG
    results = validate_sections(doc)
    for section, problems in results.items():
        print(f"{'PASS' if not problems else 'FAIL'} {section}")
        for m in problems:
            print(f"    {m}")
    return EXIT_OK if not any(results.values()) else EXIT_CONFIG


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "dump-config":
        sys.stdout.write(default_config_text())
        return EXIT_OK
    if args.command == "validate":
        return cmd_validate(args)
    try:
        cfg = load_config(args.config)
        seed = _effective_seed(args, cfg)
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError({"top": ["--jobs must be >= 1"]})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = cfg.with_seed(seed)
    print(f"effective seed: {seed}")
    out = Path(args.out)
    try:
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to one exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

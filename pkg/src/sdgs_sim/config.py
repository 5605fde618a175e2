"""Load and validate the single TOML file that drives every subcommand."""

from __future__ import annotations

import io
import sys
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .campaign import CampaignConfig, RunSpec
from .controller import DEFAULT_SWEEP, PidConfig
from .geometry import GroundSite, LinkConstants, OrbitElements
from .link import LinkConfig, Mode, RegimeThresholds, StateDwellConfig, TransportParams
from .loop_analysis import LoopAnalysisConfig
from .uncertainty import UncertaintyConfig

SECTIONS = (
    "orbit", "link_constants", "uncertainty", "pid", "regime", "transport", "dwell",
    "campaign", "montecarlo", "sweep", "sensitivity", "loop_analysis",
)
SECTION_TYPE = {
    "orbit": "OrbitElements",
    "link_constants": "LinkConstants",
    "uncertainty": "UncertaintyConfig",
    "pid": "PidConfig",
    "regime": "RegimeThresholds",
    "transport": "TransportParams",
    "dwell": "StateDwellConfig",
    "campaign": "CampaignConfig",
    "montecarlo": "MonteCarloSettings",
    "sweep": "SweepSettings",
    "sensitivity": "SensitivitySettings",
    "loop_analysis": "LoopAnalysisConfig",
}


class ConfigError(ValueError):
    def __init__(self, problems: dict[str, list[str]]):
        self.problems = problems
        msgs = [m for ms in problems.values() for m in ms]
        super().__init__("; ".join(msgs) if msgs else "invalid configuration")


@dataclass(frozen=True)
class MonteCarloSettings:
    n_runs: int = 1000
    segment_s: float = 6.0
    warmup_s: float = 1.0
    samples_per_run: int = 100

    def __post_init__(self):
        if self.n_runs < 1000:
            raise ValueError("MonteCarloSettings.n_runs must be >= 1000")
        if not self.segment_s > self.warmup_s >= 0:
            raise ValueError("MonteCarloSettings: need segment_s > warmup_s >= 0")
        if self.samples_per_run < 1:
            raise ValueError("MonteCarloSettings.samples_per_run must be >= 1")


@dataclass(frozen=True)
class SweepSettings:
    rows: tuple = tuple(DEFAULT_SWEEP)
    n_runs: int = 20
    duration_s: float = 20.0
    warmup_s: float = 2.0

    def __post_init__(self):
        if self.n_runs < 20:
            raise ValueError("SweepSettings.n_runs must be >= 20")
        for row in self.rows:
            if len(row) != 4 or row[0] <= 0 or row[1] < 0 or row[2] < 0 or row[3] < 0:
                raise ValueError(f"SweepSettings.rows: bad row {row!r}, expected (t_fb_ms>0, d_fb_ms, quant_tau_us, quant_f_hz)")
        if not self.duration_s > self.warmup_s >= 0:
            raise ValueError("SweepSettings: need duration_s > warmup_s >= 0")


@dataclass(frozen=True)
class SensitivitySettings:
    n_draws: int = 20
    spread: float = 0.2
    theta: str = "core"
    scope: str = "all"

    def __post_init__(self):
        if self.n_draws < 0:
            raise ValueError("SensitivitySettings.n_draws must be >= 0")
        if not 0 <= self.spread < 1:
            raise ValueError("SensitivitySettings.spread must lie in [0, 1)")
        if self.theta not in ("core", "full"):
            raise ValueError("SensitivitySettings.theta must be 'core' or 'full'")
        if self.scope not in ("primary", "all"):
            raise ValueError("SensitivitySettings.scope must be 'primary' or 'all'")


@dataclass(frozen=True)
class SimConfig:
    seed: int
    campaign: CampaignConfig
    uncertainty: UncertaintyConfig
    montecarlo: MonteCarloSettings
    sweep: SweepSettings
    sensitivity: SensitivitySettings
    loop_analysis: LoopAnalysisConfig

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(
            self,
            seed=seed,
            campaign=replace(self.campaign, seed=seed, uncertainty=replace(self.campaign.uncertainty, seed=seed)),
            uncertainty=replace(self.uncertainty, seed=seed),
        )


def default_config_text() -> str:
    return resources.files("sdgs_sim").joinpath("data/default_config.toml").read_text(encoding="utf-8")


def _build(cls, section: str, data, problems, exclude=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        problems.setdefault(section, []).append(f"[{section}] must be a table")
        return None
    known = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(data) - known)
    if unknown:
        problems.setdefault(section, []).append(f"[{section}] unknown key(s): {', '.join(unknown)}")
        return None
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        problems.setdefault(section, []).append(f"{SECTION_TYPE.get(section, cls.__name__)}: {exc}")
        return None


def parse_config(doc: dict) -> SimConfig:
    """Build every section; collects all problems before raising :class:`ConfigError`."""
    problems: dict[str, list[str]] = {}
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        problems.setdefault("top", []).append(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        problems.setdefault("top", []).append("seed must be a non-negative integer")
        seed = 0

    orbit = _build(OrbitElements, "orbit", doc.get("orbit"), problems)
    consts = _build(LinkConstants, "link_constants", doc.get("link_constants"), problems)
    unc = _build(UncertaintyConfig, "uncertainty", doc.get("uncertainty"), problems, exclude=("seed",))
    pid = _build(PidConfig, "pid", doc.get("pid"), problems)
    th = _build(RegimeThresholds, "regime", doc.get("regime"), problems)
    tp = _build(TransportParams, "transport", doc.get("transport"), problems)
    dw = _build(StateDwellConfig, "dwell", doc.get("dwell"), problems)
    mc = _build(MonteCarloSettings, "montecarlo", doc.get("montecarlo"), problems)
    sweep_doc = dict(doc.get("sweep", {}) or {})
    if "rows" in sweep_doc:
        sweep_doc["rows"] = tuple(tuple(float(x) for x in r) for r in sweep_doc["rows"])
    sw = _build(SweepSettings, "sweep", sweep_doc, problems)
    sens = _build(SensitivitySettings, "sensitivity", doc.get("sensitivity"), problems)
    la_doc = dict(doc.get("loop_analysis", {}) or {})
    if "eval_frequencies_hz" in la_doc:
        la_doc["eval_frequencies_hz"] = tuple(float(f) for f in la_doc["eval_frequencies_hz"])
    la = _build(LoopAnalysisConfig, "loop_analysis", la_doc, problems)

    camp = _campaign(doc.get("campaign", {}) or {}, problems)
    rig_unc = None
    if unc is not None and camp is not None:
        try:
            rig_unc = replace(unc, seed=seed, **camp.pop("rig"))
        except (TypeError, ValueError) as exc:
            problems.setdefault("campaign", []).append(f"[campaign.rig] UncertaintyConfig: {exc}")

    if problems:
        raise ConfigError(problems)
    unc = replace(unc, seed=seed)
    try:
        campaign = CampaignConfig(
            stations=camp["stations"], orbit=orbit, runs=camp["runs"], uncertainty=rig_unc, pid=pid,
            link=LinkConfig(th, tp, dw), consts=consts, seed=seed, downsample=camp["downsample"],
            min_elev_deg=camp["min_elev_deg"], search_horizon_s=camp["search_horizon_s"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError({"campaign": [f"CampaignConfig: {exc}"]}) from exc
    issues = campaign.problems()
    if issues:
        raise ConfigError({"campaign": [f"CampaignConfig: {m}" for m in issues]})
    return SimConfig(seed, campaign, unc, mc, sw, sens, la)


_CAMPAIGN_KEYS = {"stations", "runs", "rig", "downsample", "min_elev_deg", "search_horizon_s", "duration_s"}


def _campaign(doc: dict, problems) -> dict | None:
    bad = sorted(set(doc) - _CAMPAIGN_KEYS)
    if bad:
        problems.setdefault("campaign", []).append(f"[campaign] unknown key(s): {', '.join(bad)}")
        return None
    sites = []
    for i, s in enumerate(doc.get("stations", [])):
        try:
            sites.append(GroundSite(**s))
        except (TypeError, ValueError) as exc:
            problems.setdefault("campaign", []).append(f"[[campaign.stations]] #{i + 1} GroundSite: {exc}")
    duration = doc.get("duration_s", 600.0)
    runs = []
    for i, r in enumerate(doc.get("runs", [])):
        try:
            runs.append(RunSpec(id=str(r["id"]), mode=Mode(r["mode"]), seed=int(r["seed"]),
                                duration_s=float(r.get("duration_s", duration))))
        except (KeyError, ValueError, TypeError) as exc:
            problems.setdefault("campaign", []).append(f"[[campaign.runs]] #{i + 1} RunSpec: bad or missing {exc}")
    if not sites:
        problems.setdefault("campaign", []).append("[campaign] at least one station is required")
    if not runs:
        problems.setdefault("campaign", []).append("[campaign] at least one run is required")
    return {
        "stations": tuple(sites),
        "runs": tuple(runs),
        "rig": dict(doc.get("rig", {}) or {}),
        "downsample": int(doc.get("downsample", 20)),
        "min_elev_deg": float(doc.get("min_elev_deg", 0.0)),
        "search_horizon_s": float(doc.get("search_horizon_s", 172800.0)),
    }


def load_config(path: str | Path | None = None) -> SimConfig:
    """Parse ``path`` (``'-'`` reads stdin, ``None`` the bundled defaults)."""
    if path is None:
        text = default_config_text()
    elif str(path) == "-":
        text = sys.stdin.read()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError({"top": [f"config file not found: {p}"]})
        text = p.read_text(encoding="utf-8")
    try:
        doc = tomllib.load(io.BytesIO(text.encode("utf-8")))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError({"top": [f"config is not valid TOML: {exc}"]}) from exc
    return parse_config(doc)


def validate_sections(doc: dict) -> dict[str, list[str]]:
    """Per-section problem lists (empty list = PASS)."""
    try:
        parse_config(doc)
    except ConfigError as exc:
        found = exc.problems
    else:
        found = {}
    return {s: found.get(s, []) for s in ("top",) + SECTIONS}

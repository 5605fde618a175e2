"""Regime guard, regime-switching transport penalties and the handover
state machine that tags every telemetry row."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from enum import Enum

import numpy as np


class Regime(str, Enum):
    NOMINAL = "NOMINAL"
    DEGRADED = "DEGRADED"


class HandoverState(str, Enum):
    NORMAL = "NORMAL"
    PRE_WARN = "PRE_WARN"
    PRE_WARM = "PRE_WARM"
    SWITCHING = "SWITCHING"
    CLEANUP = "CLEANUP"


class Mode(str, Enum):
    EDGE_CONTROLLED = "EDGE_CONTROLLED"
    REFERENCE = "REFERENCE"
    PROBE = "PROBE"

    @property
    def closed_loop(self) -> bool:
        return self is not Mode.REFERENCE


HANDOVER_ORDER = (
    HandoverState.NORMAL,
    HandoverState.PRE_WARN,
    HandoverState.PRE_WARM,
    HandoverState.SWITCHING,
    HandoverState.CLEANUP,
)


@dataclass(frozen=True)
class RegimeThresholds:
    tau_cp_s: float = 1.0e-6
    f_scs_hz: float = 300.0

    def __post_init__(self):
        if not (self.tau_cp_s > 0 and self.f_scs_hz > 0):
            raise ValueError("RegimeThresholds: tau_cp_s and f_scs_hz must be > 0")


@dataclass(frozen=True)
class TransportParams:
    rate_nominal_mbps: float = 198.0
    rate_degraded_mbps: float = 80.14
    latency_base_ms: float = 18.96
    latency_retx_ms: float = 35.35
    jitter_nominal_ms: float = 17.4
    jitter_degraded_ms: float = 20.3
    loss_nominal: float = 0.001
    loss_degraded: float = 0.02
    goodput_sigma_nominal_mbps: float = 4.0
    goodput_sigma_degraded_mbps: float = 0.4

    def __post_init__(self):
        if not self.rate_degraded_mbps < self.rate_nominal_mbps:
            raise ValueError("TransportParams: rate_degraded_mbps must be below rate_nominal_mbps")
        if self.latency_retx_ms < 0 or self.latency_base_ms < 0:
            raise ValueError("TransportParams: latencies must be >= 0")
        for name in ("loss_nominal", "loss_degraded"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"TransportParams: {name} must lie in [0, 1]")
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"TransportParams: {f.name} must be >= 0")


@dataclass(frozen=True)
class StateDwellConfig:
    """Time-to-LOS thresholds for the handover preparation states.

    In conservative mode (persistently degraded residuals) every threshold is
    stretched by ``1 + guard_factor`` so preparation starts earlier.
    """

    t_warn_s: float = 240.0
    t_warm_s: float = 126.0
    t_switch_s: float = 0.84
    t_cleanup_s: float = 5.0
    guard_factor: float = 0.12
    guard_corr_s: float = 5.0

    def __post_init__(self):
        if not self.t_warn_s > self.t_warm_s > self.t_switch_s > 0:
            raise ValueError("StateDwellConfig: need t_warn_s > t_warm_s > t_switch_s > 0")
        if self.t_cleanup_s < 0 or self.guard_factor < 0 or self.guard_corr_s <= 0:
            raise ValueError("StateDwellConfig: t_cleanup_s, guard_factor >= 0 and guard_corr_s > 0")


def classify_regime(dtau_s: float, dcfo_hz: float, th: RegimeThresholds) -> Regime:
    """NOMINAL iff both residuals sit inside their thresholds (inclusive)."""
    if not (math.isfinite(dtau_s) and math.isfinite(dcfo_hz)):
        raise ValueError("classify_regime needs finite residuals")
    if abs(dtau_s) <= th.tau_cp_s and abs(dcfo_hz) <= th.f_scs_hz:
        return Regime.NOMINAL
    return Regime.DEGRADED


def transport_step(regime: Regime, params: TransportParams, rng: np.random.Generator,
                   rtt_rng: np.random.Generator | None = None) -> tuple[float, float, int]:
    """One transport sample: (goodput Mbps, RTT ms, loss event).

    Draw order is goodput, jitter, loss. ``rtt_rng`` lets a probe session
    draw its RTT jitter from an independent stream.
    """
    rtt_rng = rng if rtt_rng is None else rtt_rng
    if regime is Regime.NOMINAL:
        rate, sigma, jit = params.rate_nominal_mbps, params.goodput_sigma_nominal_mbps, params.jitter_nominal_ms
        latency, loss = params.latency_base_ms, params.loss_nominal
    else:
        rate, sigma, jit = params.rate_degraded_mbps, params.goodput_sigma_degraded_mbps, params.jitter_degraded_ms
        latency, loss = params.latency_base_ms + params.latency_retx_ms, params.loss_degraded
    goodput = max(0.0, rate + sigma * rng.standard_normal())
    rtt = latency + abs(jit * rtt_rng.standard_normal())
    lost = int(rng.random() < loss)
    return goodput, rtt, lost


def handover_step(
    hs: HandoverState,
    elevation_deg: float,
    time_to_los_s: float,
    dwell: StateDwellConfig,
    *,
    time_in_state_s: float = 0.0,
    conservative: bool = False,
) -> HandoverState:
    """Advance at most one state along NORMAL -> PRE_WARN -> PRE_WARM -> SWITCHING -> CLEANUP -> NORMAL.

    SWITCHING completes at loss of signal; CLEANUP returns to NORMAL once its
    dwell has elapsed and a new pass is up (elevation >= 0, far from LOS).
    """
    scale = 1.0 + dwell.guard_factor if conservative else 1.0
    if hs is HandoverState.NORMAL:
        return HandoverState.PRE_WARN if time_to_los_s < dwell.t_warn_s * scale else hs
    if hs is HandoverState.PRE_WARN:
        return HandoverState.PRE_WARM if time_to_los_s < dwell.t_warm_s * scale else hs
    if hs is HandoverState.PRE_WARM:
        return HandoverState.SWITCHING if time_to_los_s < dwell.t_switch_s * scale else hs
    if hs is HandoverState.SWITCHING:
        return HandoverState.CLEANUP if time_to_los_s <= 0.0 else hs
    acquired = elevation_deg >= 0.0 and time_to_los_s >= dwell.t_warn_s * scale
    return HandoverState.NORMAL if time_in_state_s >= dwell.t_cleanup_s and acquired else hs


@dataclass
class LinkSession:
    """Per-run emulator state: handover tag, dwell clock, degraded-indicator EWMA."""

    state: HandoverState = HandoverState.NORMAL
    time_in_state_s: float = 0.0
    degraded_ewma: float = 0.0

    @property
    def conservative(self) -> bool:
        return self.degraded_ewma > 0.5


@dataclass(frozen=True)
class TelemetryRow:
    t_s: float
    station: str
    run_id: str
    mode: str
    handover_state: str
    elevation_deg: float
    slant_range_km: float
    doppler_hz: float
    dtau_open_us: float
    dcfo_open_hz: float
    dtau_closed_us: float | None
    dcfo_closed_hz: float | None
    regime: str
    goodput_mbps: float
    rtt_ms: float
    loss_event: int


TELEMETRY_FIELDS = [f.name for f in fields(TelemetryRow)]


@dataclass(frozen=True)
class LinkConfig:
    thresholds: RegimeThresholds = RegimeThresholds()
    transport: TransportParams = TransportParams()
    dwell: StateDwellConfig = StateDwellConfig()


@dataclass(frozen=True)
class TickInputs:
    t_s: float
    station: str
    run_id: str
    mode: Mode
    elevation_deg: float
    slant_range_km: float
    doppler_hz: float
    time_to_los_s: float
    dtau_open_s: float
    dcfo_open_hz: float
    dtau_closed_s: float | None = None
    dcfo_closed_hz: float | None = None


def link_tick(
    inp: TickInputs,
    session: LinkSession,
    cfg: LinkConfig,
    dt_s: float,
    rng: np.random.Generator,
    rtt_rng: np.random.Generator | None = None,
) -> TelemetryRow:
    """Classify the active residual, draw transport, step the handover machine, emit a row.

    The row is tagged with the handover state after this tick's update.
    """
    if inp.mode.closed_loop:
        if inp.dtau_closed_s is None or inp.dcfo_closed_hz is None:
            raise ValueError(f"{inp.mode.value} tick needs closed-loop residuals")
        tau, cfo = inp.dtau_closed_s, inp.dcfo_closed_hz
    else:
        tau, cfo = inp.dtau_open_s, inp.dcfo_open_hz
    regime = classify_regime(tau, cfo, cfg.thresholds)
    goodput, rtt, lost = transport_step(regime, cfg.transport, rng, rtt_rng)

    alpha = 1.0 - math.exp(-dt_s / cfg.dwell.guard_corr_s)
    session.degraded_ewma += alpha * ((regime is Regime.DEGRADED) - session.degraded_ewma)
    new = handover_step(session.state, inp.elevation_deg, inp.time_to_los_s, cfg.dwell,
                        time_in_state_s=session.time_in_state_s, conservative=session.conservative)
    session.time_in_state_s = dt_s if new is not session.state else session.time_in_state_s + dt_s
    session.state = new

    closed = inp.mode.closed_loop
    return TelemetryRow(
        t_s=inp.t_s,
        station=inp.station,
        run_id=inp.run_id,
        mode=inp.mode.value,
        handover_state=new.value,
        elevation_deg=inp.elevation_deg,
        slant_range_km=inp.slant_range_km,
        doppler_hz=inp.doppler_hz,
        dtau_open_us=inp.dtau_open_s * 1e6,
        dcfo_open_hz=inp.dcfo_open_hz,
        dtau_closed_us=inp.dtau_closed_s * 1e6 if closed else None,
        dcfo_closed_hz=inp.dcfo_closed_hz if closed else None,
        regime=regime.value,
        goodput_mbps=goodput,
        rtt_ms=rtt,
        loss_event=lost,
    )

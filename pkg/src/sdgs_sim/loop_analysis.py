"""z-domain view of the delayed residual loop.

Polynomials are kept in powers of ``w = z^-1`` (index i holds the w**i
coefficient). With ``C(z)`` the PID term on delayed samples and a
first-order plant ``P(z) = g z^-1 / (1 - p z^-1)``::

    T_cl(z) = z^-d C P / (1 + z^-d C P)

The campaign's plant is the accumulator ``c[k+1] = c[k] + u[k]``, that is
``g = 1, p = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P

from .controller import PidConfig


@dataclass(frozen=True)
class LoopAnalysisConfig:
    plant_gain: float = 1.0
    plant_pole: float = 1.0
    eval_frequencies_hz: tuple[float, ...] = field(default=(0.1, 1.0, 5.0, 10.0, 20.0, 50.0, 100.0))

    def __post_init__(self):
        # p = 1 is the integrating actuator used by the campaign; beyond it the plant is unstable
        if not abs(self.plant_pole) <= 1.0:
            raise ValueError(f"LoopAnalysisConfig.plant_pole must satisfy |p| <= 1, got {self.plant_pole}")


@dataclass(frozen=True)
class LoopResponse:
    points: list[tuple[float, float, float]]  # (freq_hz, |T_cl|, phase_deg)
    stable: bool
    spectral_radius: float
    dc_gain: float


def controller_polys(pid: PidConfig) -> tuple[np.ndarray, np.ndarray]:
    """Numerator and denominator of C in w, with the integrator cancelled when ki = 0."""
    if not pid.t_fb_s > 0:
        raise ValueError("t_fb_s must be > 0")
    t = pid.t_fb_s
    diff = np.array([1.0, -1.0])
    if pid.ki == 0:
        return P.polyadd([pid.kp], (pid.kd / t) * diff), np.array([1.0])
    num = P.polyadd(P.polyadd(pid.kp * diff, [pid.ki * t]), (pid.kd / t) * P.polymul(diff, diff))
    return num, diff


def loop_polys(pid: PidConfig, plant: LoopAnalysisConfig) -> tuple[np.ndarray, np.ndarray]:
    """(numerator, characteristic) polynomials of T_cl in w."""
    nc, dc = controller_polys(pid)
    np_ = np.array([0.0, plant.plant_gain])
    dp = np.array([1.0, -plant.plant_pole])
    num = P.polymul(P.polymul(np.r_[np.zeros(pid.delay_index), 1.0], nc), np_)
    den = P.polyadd(P.polymul(dc, dp), num)
    return num, den


def _trim(poly: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(poly)
    return poly[: nz[-1] + 1] if nz.size else poly[:1]


def schur_cohn_stable(den_w: np.ndarray) -> bool:
    """Jury/Schur-Cohn test: all roots of the characteristic polynomial inside |z| < 1.

    ``den_w`` holds w-coefficients, which are the z-coefficients in descending
    order once multiplied through by z^n.
    """
    c = np.asarray(_trim(np.asarray(den_w, dtype=float)), dtype=float)
    while c.size > 1:
        if c[0] == 0:
            return False
        k = c[-1] / c[0]
        if abs(k) >= 1.0:
            return False
        c = (c - k * c[::-1])[:-1]
    return True


def closed_loop_response(pid: PidConfig, plant: LoopAnalysisConfig = LoopAnalysisConfig()) -> LoopResponse:
    """|T_cl| and phase on the unit circle, plus the stability verdict."""
    if not pid.t_fb_s > 0:
        raise ValueError("t_fb_s must be > 0")
    num, den = loop_polys(pid, plant)
    if not np.any(num):
        pts = [(float(f), 0.0, 0.0) for f in plant.eval_frequencies_hz]
        return LoopResponse(pts, True, 0.0, 0.0)
    den = _trim(den)
    roots = np.roots(den) if den.size > 1 else np.array([])
    radius = float(np.max(np.abs(roots))) if roots.size else 0.0
    stable = schur_cohn_stable(den)
    pts = []
    for f in plant.eval_frequencies_hz:
        w = np.exp(-2j * math.pi * f * pid.t_fb_s)
        h = P.polyval(w, num) / P.polyval(w, den)
        pts.append((float(f), float(abs(h)), float(np.degrees(np.angle(h)))))
    # exact at z = 1: the integrator zeroes C's denominator so T_cl(1) = num/num
    dc = float(P.polyval(1.0, num) / P.polyval(1.0, den))
    return LoopResponse(pts, stable, radius, dc)


def error_attenuation(pid: PidConfig, f_hz: float, plant: LoopAnalysisConfig = LoopAnalysisConfig()) -> float:
    """|1 - T_cl| at ``f_hz``: residual amplitude per unit disturbance amplitude."""
    num, den = loop_polys(pid, plant)
    w = np.exp(-2j * math.pi * f_hz * pid.t_fb_s)
    return float(abs(1.0 - P.polyval(w, num) / P.polyval(w, den)))

"""Circular-orbit propagation and station-to-satellite geometry.

Positions are kilometres in an Earth-centred inertial frame whose x axis is
aligned with the Greenwich meridian at t = 0. The Earth is a sphere.
Every function accepts scalar or array-valued times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

MU_KM3_S2 = 398600.4418
EARTH_RADIUS_KM = 6371.0
EARTH_ROTATION_RAD_S = 7.2921159e-5
SPEED_OF_LIGHT_M_S = 299792458.0


class GeometryError(ValueError):
    """Raised for degenerate or invalid geometry inputs."""


@dataclass(frozen=True)
class OrbitElements:
    altitude_km: float = 550.0
    inclination_deg: float = 53.0
    raan_deg: float = 0.0
    phase_deg: float = 0.0
    epoch_s: float = 0.0

    def __post_init__(self):
        if not self.altitude_km > 0:
            raise GeometryError(f"altitude_km must be > 0, got {self.altitude_km}")
        if not 0.0 <= self.inclination_deg <= 180.0:
            raise GeometryError(f"inclination_deg must be in [0, 180], got {self.inclination_deg}")
        object.__setattr__(self, "raan_deg", self.raan_deg % 360.0)
        object.__setattr__(self, "phase_deg", self.phase_deg % 360.0)

    @property
    def semi_major_axis_km(self) -> float:
        return EARTH_RADIUS_KM + self.altitude_km

    @property
    def mean_motion_rad_s(self) -> float:
        return math.sqrt(MU_KM3_S2 / self.semi_major_axis_km**3)

    @property
    def period_s(self) -> float:
        return 2.0 * math.pi / self.mean_motion_rad_s

    @property
    def speed_km_s(self) -> float:
        return math.sqrt(MU_KM3_S2 / self.semi_major_axis_km)


@dataclass(frozen=True)
class GroundSite:
    name: str
    lat_deg: float
    lon_deg: float
    alt_m: float = 0.0

    def __post_init__(self):
        if abs(self.lat_deg) > 90.0:
            raise GeometryError(f"{self.name}: |lat_deg| must be <= 90, got {self.lat_deg}")
        if abs(self.lon_deg) > 180.0:
            raise GeometryError(f"{self.name}: |lon_deg| must be <= 180, got {self.lon_deg}")


@dataclass(frozen=True)
class LinkConstants:
    f_c_hz: float = 2.0e9
    c_ms: float = SPEED_OF_LIGHT_M_S

    def __post_init__(self):
        if not self.f_c_hz > 0:
            raise GeometryError(f"f_c_hz must be > 0, got {self.f_c_hz}")

    @property
    def hz_per_ms(self) -> float:
        """Doppler produced by 1 m/s of radial velocity."""
        return self.f_c_hz / self.c_ms


@dataclass(frozen=True)
class EphemerisSample:
    t_s: float | np.ndarray
    r_s: np.ndarray  # (..., 3) km
    v_s: np.ndarray  # (..., 3) km/s


@dataclass(frozen=True)
class GeometrySample:
    t_s: float | np.ndarray
    slant_range_km: float | np.ndarray
    radial_velocity_kms: float | np.ndarray
    elevation_deg: float | np.ndarray
    doppler_hz: float | np.ndarray


def propagate(elems: OrbitElements, t_s) -> EphemerisSample:
    """Two-body circular propagation of ``elems`` to time(s) ``t_s``."""
    t = np.asarray(t_s, dtype=float)
    if np.any(t < elems.epoch_s - 86400.0):
        raise GeometryError("t_s must not precede epoch_s by more than one day")
    a = elems.semi_major_axis_km
    n = elems.mean_motion_rad_s
    u = math.radians(elems.phase_deg) + n * (t - elems.epoch_s)
    raan = math.radians(elems.raan_deg)
    inc = math.radians(elems.inclination_deg)
    cu, su = np.cos(u), np.sin(u)
    co, so = math.cos(raan), math.sin(raan)
    ci, si = math.cos(inc), math.sin(inc)
    r = a * np.stack([co * cu - so * su * ci, so * cu + co * su * ci, su * si], axis=-1)
    v = a * n * np.stack([-co * su - so * cu * ci, -so * su + co * cu * ci, cu * si], axis=-1)
    return EphemerisSample(t_s=t_s, r_s=r, v_s=v)


def site_state(site: GroundSite, t_s) -> tuple[np.ndarray, np.ndarray]:
    """Inertial position (km) and velocity (km/s) of a rotating ground site."""
    t = np.asarray(t_s, dtype=float)
    r_mag = EARTH_RADIUS_KM + site.alt_m / 1000.0
    lat = math.radians(site.lat_deg)
    theta = math.radians(site.lon_deg) + EARTH_ROTATION_RAD_S * t
    cl = math.cos(lat)
    x = r_mag * cl * np.cos(theta)
    y = r_mag * cl * np.sin(theta)
    z = np.full_like(x, r_mag * math.sin(lat))
    r = np.stack([x, y, z], axis=-1)
    v = EARTH_ROTATION_RAD_S * np.stack([-y, x, np.zeros_like(x)], axis=-1)
    return r, v


def _finish(t_s, value):
    return float(value) if np.ndim(t_s) == 0 else value


def geometry_at(site: GroundSite, sample: EphemerisSample, consts: LinkConstants) -> GeometrySample:
    r_u, v_u = site_state(site, sample.t_s)
    dr = sample.r_s - r_u
    dv = sample.v_s - v_u
    rho = np.linalg.norm(dr, axis=-1)
    if np.any(rho <= 0.0):
        raise GeometryError(f"satellite coincides with site {site.name}")
    v_r = np.sum(dv * dr, axis=-1) / rho
    up = r_u / np.linalg.norm(r_u, axis=-1, keepdims=True)
    sin_el = np.clip(np.sum(dr * up, axis=-1) / rho, -1.0, 1.0)
    elev = np.degrees(np.arcsin(sin_el))
    # positive Doppler while the range is shrinking
    doppler = -consts.hz_per_ms * v_r * 1000.0
    t = sample.t_s
    return GeometrySample(
        t_s=t,
        slant_range_km=_finish(t, rho),
        radial_velocity_kms=_finish(t, v_r),
        elevation_deg=_finish(t, elev),
        doppler_hz=_finish(t, doppler),
    )


def line_of_sight(site: GroundSite, sample: EphemerisSample) -> tuple[np.ndarray, np.ndarray]:
    """Unit vector from site to satellite and its time derivative (1/s)."""
    r_u, v_u = site_state(site, sample.t_s)
    dr = sample.r_s - r_u
    dv = sample.v_s - v_u
    rho = np.linalg.norm(dr, axis=-1, keepdims=True)
    los = dr / rho
    los_dot = (dv - np.sum(dv * los, axis=-1, keepdims=True) * los) / rho
    return los, los_dot


def range_acceleration(site: GroundSite, sample: EphemerisSample, elems: OrbitElements):
    """Second time derivative of slant range, km/s^2."""
    r_u, v_u = site_state(site, sample.t_s)
    dr = sample.r_s - r_u
    dv = sample.v_s - v_u
    a_s = -(elems.mean_motion_rad_s**2) * sample.r_s
    a_u = -(EARTH_ROTATION_RAD_S**2) * r_u * np.array([1.0, 1.0, 0.0])
    rho = np.linalg.norm(dr, axis=-1)
    v_r = np.sum(dv * dr, axis=-1) / rho
    acc = (np.sum((a_s - a_u) * dr, axis=-1) + np.sum(dv * dv, axis=-1) - v_r**2) / rho
    return _finish(sample.t_s, acc)


def predicted_geometry(
    site: GroundSite,
    perturbed_elems: OrbitElements,
    perturbed_site: GroundSite,
    t_s,
    consts: LinkConstants,
    *,
    los_offset_km: float = 0.0,
) -> GeometrySample:
    """UE-side open-loop prior computed from perturbed orbit and site knowledge.

    ``site`` is the true station; it is only used to define the line of sight
    along which ``los_offset_km`` displaces the predicted satellite position.
    """
    eph = propagate(perturbed_elems, t_s)
    if los_offset_km:
        los, _ = line_of_sight(site, eph)
        eph = replace(eph, r_s=eph.r_s + los_offset_km * los)
    return geometry_at(perturbed_site, eph, consts)


def elevation_deg(site: GroundSite, elems: OrbitElements, t_s):
    eph = propagate(elems, t_s)
    r_u, _ = site_state(site, t_s)
    dr = eph.r_s - r_u
    up = r_u / np.linalg.norm(r_u, axis=-1, keepdims=True)
    sin_el = np.sum(dr * up, axis=-1) / np.linalg.norm(dr, axis=-1)
    return np.degrees(np.arcsin(np.clip(sin_el, -1.0, 1.0)))


def _refine(site, elems, lo, hi, min_elev_deg, rising, tol=1e-3):
    # bisection on the visibility edge; [lo, hi] brackets the crossing
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        above = elevation_deg(site, elems, mid) >= min_elev_deg
        if above == rising:
            hi = mid
        else:
            lo = mid
    return hi if rising else lo


def pass_window(
    site: GroundSite, elems: OrbitElements, t0: float, t1: float, min_elev_deg: float
) -> list[tuple[float, float]]:
    """Maximal visibility intervals in [t0, t1] (1 s scan, 1 ms refinement)."""
    if not t1 > t0:
        raise GeometryError("pass_window requires t1 > t0")
    n = int(math.floor(t1 - t0)) + 1
    t = t0 + np.arange(n, dtype=float)
    if t[-1] < t1:
        t = np.append(t, t1)
    vis = elevation_deg(site, elems, t) >= min_elev_deg
    windows = []
    start = t0 if vis[0] else None
    for k in np.flatnonzero(np.diff(vis.astype(np.int8))):
        if vis[k + 1]:
            start = _refine(site, elems, t[k], t[k + 1], min_elev_deg, rising=True)
        else:
            end = _refine(site, elems, t[k], t[k + 1], min_elev_deg, rising=False)
            windows.append((float(start), float(end)))
            start = None
    if start is not None:
        windows.append((float(start), float(t1)))
    return windows

"""Single-point positioning and the ECEF / ENU helpers it needs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2 - WGS84_F)


class SPPError(RuntimeError):
    pass


class InsufficientSatellites(SPPError):
    pass


class SingularGeometry(SPPError):
    pass


class NonConvergence(SPPError):
    pass


@dataclass
class ReceiverSolution:
    position: np.ndarray      # ECEF m
    clock_bias: float         # m
    residuals: np.ndarray     # measured minus modelled pseudorange, m
    iterations: int
    converged: bool
    last_step: float = 0.0


def solve_spp(sat_pos, pseudorange, x0=None, max_iter: int = 20, tol: float = 1e-6,
              max_cond: float = 1e8) -> ReceiverSolution:
    """Unweighted Gauss-Newton for receiver position and clock bias.

    ``sat_pos`` is ``(n, 3)`` ECEF metres, ``pseudorange`` ``(n,)`` metres.
    ``x0`` is an optional initial ``[x, y, z, clock]``; the default starts at the
    Earth's centre. Converged means the final step norm fell below ``tol``.
    """
    sat_pos = np.asarray(sat_pos, dtype=np.float64)
    pr = np.asarray(pseudorange, dtype=np.float64)
    n = len(pr)
    if n < 4:
        raise InsufficientSatellites(f"need at least 4 satellites, got {n}")
    x = np.zeros(4) if x0 is None else np.array(x0, dtype=np.float64)
    step = np.inf
    for it in range(1, max_iter + 1):
        diff = sat_pos - x[:3]
        rng = np.linalg.norm(diff, axis=1)
        H = np.empty((n, 4))
        H[:, :3] = -diff / rng[:, None]
        H[:, 3] = 1.0
        cond = np.linalg.cond(H)
        if not np.isfinite(cond) or cond > max_cond:
            raise SingularGeometry(f"design matrix condition number {cond:.3g}")
        dy = pr - (rng + x[3])
        dx, *_ = np.linalg.lstsq(H, dy, rcond=None)
        x += dx
        step = float(np.linalg.norm(dx))
        if step < tol:
            res = pr - (np.linalg.norm(sat_pos - x[:3], axis=1) + x[3])
            return ReceiverSolution(x[:3].copy(), float(x[3]), res, it, True, step)
    raise NonConvergence(f"no convergence after {max_iter} iterations (last step {step:.3g} m)")


def solve_epoch(epoch, x0=None, **kw) -> ReceiverSolution:
    return solve_spp(epoch.sat_pos, epoch.pseudorange, x0=x0, **kw)


def compute_ls_error(epoch, sol: ReceiverSolution) -> np.ndarray:
    """Measured pseudorange minus geometric range at the SPP fix, clock removed."""
    if not sol.converged:
        raise SPPError("solution did not converge")
    geo = np.linalg.norm(epoch.sat_pos - sol.position, axis=1)
    return epoch.pseudorange - geo - sol.clock_bias


def compute_rss(ls_errors) -> float:
    e = np.asarray(ls_errors, dtype=np.float64)
    if e.size < 1:
        raise ValueError("RSS needs at least one value")
    return float(np.sqrt(np.sum(e * e)))


# ---------------------------------------------------------------- geodesy

def lla_to_ecef(lat_deg, lon_deg, h):
    lat, lon = np.radians(lat_deg), np.radians(lon_deg)
    N = WGS84_A / np.sqrt(1 - WGS84_E2 * np.sin(lat) ** 2)
    return np.array([
        (N + h) * np.cos(lat) * np.cos(lon),
        (N + h) * np.cos(lat) * np.sin(lon),
        (N * (1 - WGS84_E2) + h) * np.sin(lat),
    ])


def ecef_to_lla(xyz):
    x, y, z = np.asarray(xyz, dtype=np.float64)
    lon = np.arctan2(y, x)
    p = np.hypot(x, y)
    lat = np.arctan2(z, p * (1 - WGS84_E2))
    for _ in range(10):
        N = WGS84_A / np.sqrt(1 - WGS84_E2 * np.sin(lat) ** 2)
        h = p / np.cos(lat) - N
        lat = np.arctan2(z, p * (1 - WGS84_E2 * N / (N + h)))
    N = WGS84_A / np.sqrt(1 - WGS84_E2 * np.sin(lat) ** 2)
    h = p / np.cos(lat) - N
    return np.degrees(lat), np.degrees(lon), h


def enu_rotation(lat_deg, lon_deg):
    """Rows are the E, N, U unit vectors expressed in ECEF."""
    lat, lon = np.radians(lat_deg), np.radians(lon_deg)
    sl, cl = np.sin(lat), np.cos(lat)
    so, co = np.sin(lon), np.cos(lon)
    return np.array([
        [-so, co, 0.0],
        [-sl * co, -sl * so, cl],
        [cl * co, cl * so, sl],
    ])


def ecef_to_enu(delta_ecef, ref_ecef):
    lat, lon, _ = ecef_to_lla(ref_ecef)
    return enu_rotation(lat, lon) @ np.asarray(delta_ecef, dtype=np.float64)


def az_el(rx_ecef, sat_ecef):
    """Azimuth [0, 360) and elevation in degrees of satellites seen from ``rx_ecef``."""
    d = np.atleast_2d(sat_ecef) - rx_ecef
    lat, lon, _ = ecef_to_lla(rx_ecef)
    enu = d @ enu_rotation(lat, lon).T
    el = np.degrees(np.arctan2(enu[:, 2], np.hypot(enu[:, 0], enu[:, 1])))
    az = np.degrees(np.arctan2(enu[:, 0], enu[:, 1])) % 360.0
    az[az >= 360.0] = 0.0
    return az, el

"""Dry air mass diagnostics: surface pressure, total water path, column dry mass, global sum.

Everything here works in physical units (Pa, K, kg/kg, m^2/s^2).  Each quantity
also has a hand-written derivative so the DAM forward operator can provide
exact Jacobian-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError


@dataclass(frozen=True)
class PhysicalConstants:
    R_d: float = 287.05
    g: float = 9.80665
    p_top: float | None = None  # None: use the lowest-pressure model level

    def __post_init__(self):
        if self.R_d <= 0 or self.g <= 0 or (self.p_top is not None and self.p_top <= 0):
            raise ValueError("physical constants must be positive")


@dataclass(frozen=True, eq=False)
class VerticalProfile:
    """Specific humidity ``q`` on pressure levels ordered top (low p) to bottom (high p).

    ``q`` has the level axis first; trailing axes are spatial.
    """

    levels: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        if levels.ndim != 1 or levels.size < 1:
            raise DataError("pressure levels must be a non-empty vector", "levels")
        if np.any(np.diff(levels) <= 0):
            raise DataError("pressure levels must be strictly increasing", "levels")
        if q.shape[0] != levels.size:
            raise DataError("q must have the level axis first", "q")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "q", q)


def surface_pressure(mslp, phi_sfc, t2m, c: PhysicalConstants = PhysicalConstants()):
    """``p_sfc = p_mslp * exp(-phi_sfc / (R_d * T_2m))``."""
    t2m = np.asarray(t2m, dtype=np.float64)
    if np.any(t2m <= 0):
        raise DataError("2 m temperature must be positive", "t2m")
    return np.asarray(mslp, dtype=np.float64) * np.exp(-np.asarray(phi_sfc) / (c.R_d * t2m))


def _p_top(levels: np.ndarray, c: PhysicalConstants) -> float:
    return float(levels[0]) if c.p_top is None else float(c.p_top)


def water_path_weights(levels, p_sfc, c: PhysicalConstants = PhysicalConstants()):
    """Quadrature weights ``w_l`` (Pa) with ``int_{p_top}^{p_sfc} Q dp = sum_l w_l q_l``.

    ``Q`` is the piecewise-linear interpolant of the level values, held
    constant above the top level and below the lowest level.  The result has
    the level axis first and broadcasts ``p_sfc``'s shape behind it.
    """
    levels = np.asarray(levels, dtype=np.float64)
    p_sfc = np.asarray(p_sfc, dtype=np.float64)
    p_top = _p_top(levels, c)
    if np.any(p_sfc <= p_top):
        raise DataError("surface pressure must exceed the integration top", "p_sfc")
    L = levels.size
    w = np.zeros((L,) + p_sfc.shape)
    # constant cap above the first level
    if p_top < levels[0]:
        w[0] += np.clip(p_sfc, None, levels[0]) - p_top
    for l in range(L - 1):
        lo, hi = levels[l], levels[l + 1]
        a = np.maximum(lo, p_top)
        b = np.minimum(hi, p_sfc)
        span = np.clip(b - a, 0.0, None)
        # linear interpolant on [lo, hi]; trapezoid over [a, b] is exact
        wa_hi = (a - lo) / (hi - lo)
        wb_hi = (np.maximum(b, a) - lo) / (hi - lo)
        frac_hi = 0.5 * (wa_hi + wb_hi)
        w[l] += span * (1.0 - frac_hi)
        w[l + 1] += span * frac_hi
    # constant extension of the lowest level down to the surface
    w[L - 1] += np.clip(p_sfc - max(levels[-1], p_top), 0.0, None)
    return w


def humidity_at(levels, q, p):
    """``Q(p)`` under the same interpolation/extrapolation rule as the quadrature."""
    levels = np.asarray(levels, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    L = levels.size
    out = np.where(p <= levels[0], q[0], q[L - 1])
    for l in range(L - 1):
        lo, hi = levels[l], levels[l + 1]
        inside = (p > lo) & (p <= hi)
        f = (p - lo) / (hi - lo)
        out = np.where(inside, (1 - f) * q[l] + f * q[l + 1], out)
    return out


def total_water_path(profile: VerticalProfile, p_sfc, c: PhysicalConstants = PhysicalConstants()):
    """``TWP = (1/g) int_{p_top}^{p_sfc} Q(p) dp`` in kg/m^2."""
    w = water_path_weights(profile.levels, p_sfc, c)
    return np.sum(w * profile.q, axis=0) / c.g


def dry_air_mass_field(mslp, phi_sfc, t2m, profile: VerticalProfile, c: PhysicalConstants = PhysicalConstants()):
    """Column dry air mass ``p_sfc/g - TWP`` in kg/m^2."""
    p_sfc = surface_pressure(mslp, phi_sfc, t2m, c)
    return p_sfc / c.g - total_water_path(profile, p_sfc, c)


def global_dam(m_dry, area: np.ndarray):
    """Area-weighted sum over the last two (lat, lon) axes."""
    return np.sum(np.asarray(m_dry) * area, axis=(-2, -1))


def dry_air_mass_partials(mslp, phi_sfc, t2m, profile: VerticalProfile, c: PhysicalConstants = PhysicalConstants()):
    """Pointwise partial derivatives of ``m_dry``.

    Returns ``(dm/dmslp, dm/dt2m, dm/dq)`` where ``dm/dq`` has the level axis
    first.  ``d/dp_sfc int^{p_sfc} Q dp = Q(p_sfc)`` closes the chain rule.
    """
    mslp = np.asarray(mslp, dtype=np.float64)
    t2m = np.asarray(t2m, dtype=np.float64)
    phi_sfc = np.asarray(phi_sfc, dtype=np.float64)
    p_sfc = surface_pressure(mslp, phi_sfc, t2m, c)
    q_sfc = humidity_at(profile.levels, profile.q, p_sfc)
    dm_dpsfc = (1.0 - q_sfc) / c.g
    dpsfc_dmslp = np.exp(-phi_sfc / (c.R_d * t2m))
    dpsfc_dt = p_sfc * phi_sfc / (c.R_d * t2m * t2m)
    dm_dq = -water_path_weights(profile.levels, p_sfc, c) / c.g
    return dm_dpsfc * dpsfc_dmslp, dm_dpsfc * dpsfc_dt, dm_dq

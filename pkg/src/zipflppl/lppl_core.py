"""LPPL model augmented with the integrated Zipf factor.

Expected log-price up to the critical time ``tc``::

    E[ln p(t)] = gamma * zeta(t) + A + B (tc - t)^m + C (tc - t)^m cos(omega ln(tc - t) - phi)

All times are trading-day indices (floats allowed for ``tc``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

PARAM_KEYS = ("tc", "m", "omega", "phi", "gamma", "A", "B", "C")


@dataclass(frozen=True)
class NonlinearParams:
    tc: float
    m: float
    omega: float
    phi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tc, self.m, self.omega, self.phi], dtype=float)

    @classmethod
    def from_array(cls, x) -> "NonlinearParams":
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


@dataclass(frozen=True)
class LinearParams:
    gamma: float
    A: float
    B: float
    C: float

    def as_array(self) -> np.ndarray:
        return np.array([self.gamma, self.A, self.B, self.C], dtype=float)

    @classmethod
    def from_array(cls, x) -> "LinearParams":
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


@dataclass(frozen=True)
class QualificationFlags:
    m_in_range: bool
    B_negative: bool
    hazard_nonneg: bool
    omega_ok: bool

    @property
    def is_bubble(self) -> bool:
        return self.m_in_range and self.B_negative and self.hazard_nonneg and self.omega_ok

    def as_dict(self) -> dict:
        return {
            "m_in_range": self.m_in_range,
            "B_negative": self.B_negative,
            "hazard_nonneg": self.hazard_nonneg,
            "omega_ok": self.omega_ok,
        }


def _time_to_critical(t, tc):
    dt = tc - np.asarray(t, dtype=float)
    if np.any(dt <= 0) or np.any(~np.isfinite(dt)):
        raise DomainError(f"LPPL evaluated at t >= tc (tc={tc})")
    return dt


def basis_functions(t, nl: NonlinearParams):
    """Return ``(f, g)``, the power-law and log-periodic regressors at ``t``.

    ``t`` may be a scalar or an array; the outputs have the same shape.
    """
    dt = _time_to_critical(t, nl.tc)
    log_dt = np.log(dt)
    f = np.exp(nl.m * log_dt)
    g = f * np.cos(nl.omega * log_dt - nl.phi)
    if np.ndim(f) == 0:
        return float(f), float(g)
    return f, g


def lppl_log_price(t, nl: NonlinearParams, lin: LinearParams, zeta_t=0.0):
    """Model expectation of ln p(t) given the integrated Zipf factor ``zeta_t``."""
    f, g = basis_functions(t, nl)
    out = lin.gamma * np.asarray(zeta_t, dtype=float) + lin.A + lin.B * np.asarray(f) + lin.C * np.asarray(g)
    return float(out) if np.ndim(out) == 0 else out


def hazard_proxy(t, nl: NonlinearParams, lin: LinearParams):
    """kappa * h(t): time derivative of the deterministic LPPL part.

    Only the product with the (unknown) crash size is identifiable from prices.
    """
    dt = _time_to_critical(t, nl.tc)
    log_dt = np.log(dt)
    arg = nl.omega * log_dt - nl.phi
    out = np.exp((nl.m - 1.0) * log_dt) * (
        -lin.B * nl.m - lin.C * nl.m * np.cos(arg) + lin.C * nl.omega * np.sin(arg)
    )
    return float(out) if np.ndim(out) == 0 else out


def hazard_floor(nl: NonlinearParams, lin: LinearParams) -> float:
    """``b = -B m - |C| sqrt(m^2 + omega^2)``, the lower envelope of the hazard bracket."""
    return -lin.B * nl.m - abs(lin.C) * math.hypot(nl.m, nl.omega)


def qualify(nl: NonlinearParams, lin: LinearParams, omega_max: float = 20.0) -> QualificationFlags:
    return QualificationFlags(
        m_in_range=bool(0.0 < nl.m < 1.0),
        B_negative=bool(lin.B < 0.0),
        hazard_nonneg=bool(hazard_floor(nl, lin) >= 0.0),
        omega_ok=bool(nl.omega <= omega_max),
    )


def params_to_dict(nl: NonlinearParams, lin: LinearParams) -> dict:
    """Flat record with keys ``tc, m, omega, phi, gamma, A, B, C``.

    Python floats serialize with shortest round-trip repr, so 17 significant
    digits are always preserved through JSON.
    """
    return {
        "tc": nl.tc, "m": nl.m, "omega": nl.omega, "phi": nl.phi,
        "gamma": lin.gamma, "A": lin.A, "B": lin.B, "C": lin.C,
    }


def params_from_dict(d: dict):
    missing = [k for k in PARAM_KEYS if k not in d]
    if missing:
        raise KeyError(f"missing parameter keys: {', '.join(missing)}")
    nl = NonlinearParams(float(d["tc"]), float(d["m"]), float(d["omega"]), float(d["phi"]))
    lin = LinearParams(float(d["gamma"]), float(d["A"]), float(d["B"]), float(d["C"]))
    return nl, lin

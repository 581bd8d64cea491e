"""Ground-truth generators: LPPL + Zipf log-price series and constituent panels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .lppl_core import LinearParams, NonlinearParams, lppl_log_price, params_from_dict, params_to_dict
from .market_data import ACTIVE, DELISTED, SUSPENDED, UNLISTED, ConstituentPanel, FactorSeries

ZETA_MODELS = ("zero", "linear-drift", "supplied")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic window.

    ``zeta_model`` is ``"zero"``, ``"linear-drift"`` (``zeta = drift_rate * (t - t0)``)
    or ``"supplied"`` (``zeta_values`` on t1..t2).
    """

    nl: NonlinearParams
    lin: LinearParams
    t1: int
    t2: int
    noise_sigma: float = 0.0
    zeta_model: str = "zero"
    drift_rate: float = 0.0
    zeta_values: tuple = ()
    seed: int = 0

    def validate(self) -> None:
        if not self.t2 > self.t1:
            raise InputError("synthetic spec needs t2 > t1")
        if not self.t2 < self.nl.tc:
            raise InputError("synthetic spec needs t2 < tc")
        if not self.noise_sigma >= 0:
            raise InputError("noise_sigma must be non-negative")
        if self.zeta_model not in ZETA_MODELS:
            raise InputError(f"zeta_model must be one of {', '.join(ZETA_MODELS)}")
        if self.zeta_model == "supplied" and len(self.zeta_values) != self.t2 - self.t1 + 1:
            raise InputError("supplied zeta must have one value per day in [t1, t2]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        nl, lin = params_from_dict(d["params"])
        return cls(
            nl=nl, lin=lin, t1=int(d["t1"]), t2=int(d["t2"]),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            zeta_model=d.get("zeta_model", "zero"),
            drift_rate=float(d.get("drift_rate", 0.0)),
            zeta_values=tuple(float(v) for v in d.get("zeta_values", ())),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        d = {
            "params": params_to_dict(self.nl, self.lin),
            "t1": self.t1, "t2": self.t2, "noise_sigma": self.noise_sigma,
            "zeta_model": self.zeta_model, "drift_rate": self.drift_rate, "seed": self.seed,
        }
        if self.zeta_values:
            d["zeta_values"] = list(self.zeta_values)
        return d


def business_dates(n, start="2006-01-02"):
    """``n`` consecutive weekday dates as ISO strings."""
    first = np.busday_offset(np.datetime64(start), 0, roll="forward")
    return tuple(str(d) for d in np.busday_offset(first, np.arange(n)))


def generate_series(spec: SynthSpec) -> FactorSeries:
    spec.validate()
    t = np.arange(spec.t1, spec.t2 + 1, dtype=float)
    t0 = spec.t1 - 1
    if spec.zeta_model == "zero":
        zeta = np.zeros_like(t)
    elif spec.zeta_model == "linear-drift":
        zeta = spec.drift_rate * (t - t0)
    else:
        zeta = np.asarray(spec.zeta_values, dtype=float)
    rng = np.random.default_rng(spec.seed)
    noise = spec.noise_sigma * rng.standard_normal(t.size) if spec.noise_sigma > 0 else 0.0
    ln_p = lppl_log_price(t, spec.nl, spec.lin, zeta) + noise
    dates = business_dates(spec.t2 + 1)[spec.t1:]
    return FactorSeries(t0=t0, t=t, ln_p=ln_p, ln_pe=ln_p - zeta, zeta=zeta, dates=dates)


def generate_panel(n_firms, t0, t2, tail_exponent=1.5, seed=0, *, volatility=0.02, drift=0.0,
                   equal_caps=False, common_returns=False, suspensions=(), delistings=(),
                   listings=(), scale=1e9) -> ConstituentPanel:
    """Synthetic capitalization panel on days 0..t2.

    Initial sizes are Pareto with tail exponent ``tail_exponent`` (equal when
    ``equal_caps``); each firm then follows a geometric random walk (one shared
    path when ``common_returns``). ``t0`` is the first day on which the
    generated firms are guaranteed active. Scripted events:

    * ``suspensions``: ``(firm, first_day, last_day)`` halted days;
    * ``delistings``: ``(firm, day)``, delisted from ``day`` on;
    * ``listings``: ``(firm, day)``, unlisted before ``day``.
    """
    if n_firms < 2:
        raise InputError("a panel needs at least two firms")
    if not 0 <= t0 < t2:
        raise InputError("panel needs 0 <= t0 < t2")
    if not tail_exponent > 0:
        raise InputError("tail exponent must be positive")
    rng = np.random.default_rng(seed)
    n_days = t2 + 1
    if equal_caps:
        k0 = np.full(n_firms, scale)
    else:
        k0 = scale * (1.0 + rng.pareto(tail_exponent, n_firms))
    shocks = drift + volatility * rng.standard_normal((1 if common_returns else n_firms, n_days - 1))
    paths = np.concatenate([np.zeros((shocks.shape[0], 1)), np.cumsum(shocks, axis=1)], axis=1)
    cap = k0[:, None] * np.exp(np.broadcast_to(paths, (n_firms, n_days)))
    status = np.full((n_firms, n_days), ACTIVE, dtype="<U1")
    for j, day in listings:
        status[j, :day] = UNLISTED
    for j, a, b in suspensions:
        status[j, a:b + 1] = SUSPENDED
    for j, day in delistings:
        status[j, day:] = DELISTED
    cap = np.where(np.isin(status, [ACTIVE, SUSPENDED]), cap, np.nan)
    firms = tuple(f"F{j:04d}" for j in range(n_firms))
    return ConstituentPanel(business_dates(n_days), firms, cap, status)


def load_synth_spec(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)

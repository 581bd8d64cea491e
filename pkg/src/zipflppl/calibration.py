"""Calibration of the Zipf-augmented LPPL model and its plain JLS restriction.

The four linear parameters ``(gamma, A, B, C)`` are slaved to the nonlinear
ones ``(tc, m, omega, phi)`` by least squares, so every search below runs in
four dimensions. Search is a taboo-flavoured multi-start sampler followed by
Levenberg-Marquardt refinement; both are vectorized over candidate points
because a single window needs thousands of cost evaluations.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .errors import DomainError, FitError, InputError, RankDeficiencyError
from .lppl_core import (
    LinearParams, NonlinearParams, QualificationFlags, lppl_log_price, params_to_dict, qualify,
)
from .market_data import FactorSeries

ZIPF, JLS = "zipf", "jls"
MODEL_KINDS = (JLS, ZIPF)
TWO_PI = 2.0 * math.pi
# smallest |R_kk| of the column-normalized design accepted as full rank
RANK_RTOL = 1e-5


@dataclass(frozen=True)
class FitConfig:
    n_starts: int = 200
    local_moves: int = 20
    local_step: float = 0.05
    taboo_radius: float = 0.02
    lm_max_iter: int = 500
    lm_tol: float = 1e-10
    seed: int = 0
    keep_best: int = 10
    min_window: int = 30
    n_refine: int = 40
    omega_max: float = 20.0

    @property
    def search_budget(self) -> int:
        # half of the budget goes to the n_starts exploration runs
        return 2 * self.n_starts * (self.local_moves + 1)

    def with_overrides(self, **kw) -> "FitConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> FitConfig:
    """Read a config file: JSON object, or ``key = value`` lines (``#`` comments)."""
    text = Path(path).read_text(encoding="utf-8")
    if Path(path).suffix.lower() == ".json":
        raw = json.loads(text)
    else:
        raw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            raw[k] = v
    types = {f.name: f.type for f in fields(FitConfig)}
    kw = {}
    for k, v in raw.items():
        if k not in types:
            raise InputError(f"unknown config key {k!r}")
        cast = int if types[k] in ("int", int) else float
        try:
            kw[k] = cast(v)
        except (TypeError, ValueError):
            raise InputError(f"config key {k!r}: cannot parse {v!r}") from None
    return FitConfig(**kw)


@dataclass(frozen=True)
class SearchBounds:
    lower: np.ndarray
    upper: np.ndarray

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def to_unit(self, x):
        return (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)

    def from_unit(self, u):
        return self.lower + np.asarray(u, dtype=float) * (self.upper - self.lower)


def search_bounds(t1, t2) -> SearchBounds:
    """Box for ``(tc, m, omega, phi)``; the tc horizon is 0.375 window lengths past t2."""
    if not t2 > t1:
        raise InputError("search bounds need t2 > t1")
    lower = np.array([t2, 1e-5, 0.01, 0.0], dtype=float)
    upper = np.array([t2 + 0.375 * (t2 - t1), 1 - 1e-5, 40.0, TWO_PI - 1e-5], dtype=float)
    return SearchBounds(lower, upper)


@dataclass(frozen=True, eq=False)
class FitWindow:
    t1: int
    t2: int
    series: FactorSeries

    @classmethod
    def from_series(cls, series: FactorSeries, t1=None, t2=None, min_window: int = 30) -> "FitWindow":
        t1 = series.t1 if t1 is None else int(t1)
        t2 = series.t2 if t2 is None else int(t2)
        if t2 - t1 < min_window:
            raise InputError(f"window [{t1}, {t2}] shorter than the minimum of {min_window} trading days")
        sub = series if (t1 == series.t1 and t2 == series.t2) else series.window(t1, t2)
        return cls(t1, t2, sub)


@dataclass(frozen=True, eq=False)
class FitResult:
    nl: NonlinearParams
    lin: LinearParams
    rss: float
    residuals: np.ndarray
    flags: QualificationFlags
    model_kind: str
    converged: bool = True
    n_iter: int = 0

    def to_dict(self) -> dict:
        d = params_to_dict(self.nl, self.lin)
        d.update(
            rss=self.rss,
            model=self.model_kind,
            converged=self.converged,
            n_iter=self.n_iter,
            qualified=self.flags.is_bubble,
            flags=self.flags.as_dict(),
        )
        return d


@dataclass(frozen=True, eq=False)
class FitEnsemble:
    """Kept fits of one window, sorted by RSS.

    The starting guesses are pairwise distinct; after refinement several may
    land in the same basin. ``n_distinct`` counts the distinct basins under
    the separation rule of :func:`select_best`.
    """

    window: FitWindow
    results: tuple
    model_kind: str
    n_distinct: int | None = None

    def __post_init__(self):
        if self.n_distinct is None:
            object.__setattr__(self, "n_distinct", len(self.results))

    def __len__(self):
        return len(self.results)

    @property
    def best(self) -> FitResult:
        return self.results[0]

    def to_records(self) -> list:
        out = []
        for rank, r in enumerate(self.results, 1):
            d = r.to_dict()
            d.update(t1=self.window.t1, t2=self.window.t2, rank=rank)
            out.append(d)
        return out


# --------------------------------------------------------------------------
# batched linear slaving

def _design(t, zeta, X, model_kind):
    """Design matrices ``(N, T, k)`` for nonlinear points ``X`` of shape (N, 4)."""
    dt = X[:, 0, None] - t[None, :]
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        ldt = np.log(dt)
        f = np.exp(X[:, 1, None] * ldt)
        g = f * np.cos(X[:, 2, None] * ldt - X[:, 3, None])
    ones = np.ones_like(f)
    if model_kind == ZIPF:
        cols = (np.broadcast_to(zeta, f.shape), ones, f, g)
    elif model_kind == JLS:
        cols = (ones, f, g)
    else:
        raise InputError(f"unknown model kind {model_kind!r}")
    return np.stack(cols, axis=-1)


def _solve_batch(D, y):
    """Least squares for each stacked design; returns (coef, residuals, ok).

    Modified Gram-Schmidt on the column-normalized design augmented with
    ``y``: the same solution as the normal equations without squaring their
    conditioning, and the leftover ``y`` column is the residual vector.
    """
    N, T, k = D.shape
    coef = np.full((N, k), np.nan)
    resid = np.full((N, T), np.nan)
    with np.errstate(invalid="ignore", over="ignore"):
        finite = np.all(np.isfinite(D), axis=(1, 2))
    idx = np.flatnonzero(finite)
    if idx.size == 0:
        return coef, resid, finite
    Q = np.moveaxis(D[idx], 2, 0).copy()  # (k, n, T)
    norms = np.sqrt(np.einsum("knt,knt->kn", Q, Q))
    good = np.all(norms > 0, axis=0)
    Q /= np.where(norms > 0, norms, 1.0)[:, :, None]
    r = np.broadcast_to(y, (idx.size, T)).copy()
    R = np.zeros((idx.size, k, k))
    rhs = np.zeros((idx.size, k))
    for j in range(k):
        rjj = np.sqrt(np.einsum("nt,nt->n", Q[j], Q[j]))
        good &= rjj > RANK_RTOL
        Q[j] /= np.where(rjj > 0, rjj, 1.0)[:, None]
        R[:, j, j] = rjj
        for l in range(j + 1, k):
            rjl = np.einsum("nt,nt->n", Q[j], Q[l])
            R[:, j, l] = rjl
            Q[l] -= rjl[:, None] * Q[j]
        rhs[:, j] = np.einsum("nt,nt->n", Q[j], r)
        r -= rhs[:, j, None] * Q[j]
    ys = np.zeros_like(rhs)
    safe = np.where(good[:, None], np.diagonal(R, axis1=1, axis2=2), 1.0)
    for j in range(k - 1, -1, -1):
        ys[:, j] = (rhs[:, j] - np.einsum("nl,nl->n", R[:, j, j + 1:], ys[:, j + 1:])) / safe[:, j]
    ok = np.zeros(N, dtype=bool)
    ok[idx[good]] = True
    coef[idx[good]] = (ys / norms.T)[good]
    resid[idx[good]] = r[good]
    return coef, resid, ok


def _pad_gamma(coef, model_kind):
    if model_kind == JLS:
        return np.concatenate([np.zeros((coef.shape[0], 1)), coef], axis=1)
    return coef


def _solve_one(D, y):
    """Single-design version of :func:`_solve_batch` (much lower call overhead)."""
    N, T, k = D.shape
    A = D[0]
    if not np.all(np.isfinite(A)):
        return np.full((1, k), np.nan), np.full((1, T), np.nan), np.zeros(1, dtype=bool)
    norms = np.sqrt((A * A).sum(axis=0))
    if not np.all(norms > 0):
        return np.full((1, k), np.nan), np.full((1, T), np.nan), np.zeros(1, dtype=bool)
    Q, R = np.linalg.qr(A / norms)
    if np.abs(np.diagonal(R)).min() <= RANK_RTOL:
        return np.full((1, k), np.nan), np.full((1, T), np.nan), np.zeros(1, dtype=bool)
    c = np.linalg.solve(R, Q.T @ y) / norms
    return c[None, :], (y - A @ c)[None, :], np.ones(1, dtype=bool)


def _batch_cost(series, X, model_kind):
    X = np.atleast_2d(X)
    D = _design(series.t, series.zeta, X, model_kind)
    solver = _solve_one if X.shape[0] == 1 else _solve_batch
    coef, resid, ok = solver(D, series.ln_p)
    rss = np.where(ok, np.sum(resid * resid, axis=1), np.inf)
    return rss, _pad_gamma(coef, model_kind), resid, ok


def _check_series(series, model_kind, nl):
    if model_kind not in MODEL_KINDS:
        raise InputError(f"unknown model kind {model_kind!r}")
    k = 4 if model_kind == ZIPF else 3
    if len(series) < k:
        raise InputError("series shorter than the number of linear parameters")
    if not nl.tc > series.t[-1]:
        raise DomainError(f"tc={nl.tc} must exceed the last window day {series.t[-1]}")


def slave_linear(series: FactorSeries, nl: NonlinearParams, model_kind: str = ZIPF) -> LinearParams:
    """Least-squares linear parameters for fixed nonlinear ones.

    ``jls`` fits ``(A, B, C)`` with ``gamma`` pinned at zero.
    """
    _check_series(series, model_kind, nl)
    _, coef, _, ok = _batch_cost(series, nl.as_array()[None, :], model_kind)
    if not ok[0]:
        raise RankDeficiencyError(f"linear system is rank deficient at {nl}")
    return LinearParams.from_array(coef[0])


def cost(series: FactorSeries, nl: NonlinearParams, model_kind: str = ZIPF):
    """Return ``(rss, lin)`` with the linear parameters slaved at ``nl``."""
    _check_series(series, model_kind, nl)
    rss, coef, _, ok = _batch_cost(series, nl.as_array()[None, :], model_kind)
    if not ok[0]:
        raise RankDeficiencyError(f"linear system is rank deficient at {nl}")
    return float(rss[0]), LinearParams.from_array(coef[0])


def model_residuals(series: FactorSeries, nl: NonlinearParams, lin: LinearParams) -> np.ndarray:
    return series.ln_p - lppl_log_price(series.t, nl, lin, series.zeta)


# --------------------------------------------------------------------------
# taboo-flavoured multi-start search

def _reflect(u):
    u = np.abs(u)
    u = np.where(u > 1.0, 2.0 - u, u)
    return np.clip(u, 0.0, 1.0)


def _in_taboo(U, centers, radius):
    if centers.shape[0] == 0:
        return np.zeros(U.shape[0], dtype=bool)
    d = np.max(np.abs(U[:, None, :] - centers[None, :, :]), axis=2)
    return np.any(d < radius, axis=1)


def _simplex_polish(f, u, max_evals, step):
    """Bounded Nelder-Mead from ``u`` in unit coordinates; returns (u, cost, evals)."""
    simplex = [u]
    for k in range(u.size):
        e = np.zeros_like(u)
        e[k] = step if u[k] + step <= 1.0 else -step
        simplex.append(u + e)
    count = [0]

    def counted(v):
        count[0] += 1
        return f(np.clip(v, 0.0, 1.0))

    res = minimize(
        counted, u, method="Nelder-Mead",
        options=dict(maxfev=max_evals, xatol=1e-14, fatol=1e-24, adaptive=True,
                     initial_simplex=np.array(simplex)),
    )
    return np.clip(res.x, 0.0, 1.0), float(res.fun), count[0]


def heuristic_search(series, bounds, budget, seed, model_kind=ZIPF, *, local_moves=20,
                     local_step=0.05, taboo_radius=0.02, n_candidates=10, return_costs=False):
    """Low-cost starting points for Levenberg-Marquardt, sorted by cost.

    Works in box-normalized coordinates. Half of ``budget`` (cost
    evaluations) goes to exploration: blocks of uniform random starts, each
    followed by ``local_moves`` Gaussian moves of size ``local_step``. When a
    block finishes its end points become taboo, so later starts and moves may
    not land within ``taboo_radius`` (L-inf) of them. The other half
    intensifies the best distinct minima by successive halving: 16 of them
    get a short Nelder-Mead polish, the better half a longer one, and so on
    down to two.
    """
    if budget < 100:
        raise InputError("search budget must be at least 100 evaluations")
    rng = np.random.default_rng(seed)
    dim = bounds.lower.size
    per_start = local_moves + 1
    n_starts = max((budget // 2) // per_start, n_candidates, 16)
    block = 16

    def evaluate(U):
        return _batch_cost(series, bounds.from_unit(U), model_kind)[0]

    centers = np.empty((0, dim))
    minima_u, minima_c = [], []
    used = 0
    done = 0
    while done < n_starts:
        nb = min(block, n_starts - done)
        U = rng.random((nb, dim))
        for _ in range(10):
            bad = _in_taboo(U, centers, taboo_radius)
            if not bad.any():
                break
            U[bad] = rng.random((int(bad.sum()), dim))
        c = evaluate(U)
        for _ in range(local_moves):
            prop = _reflect(U + local_step * rng.standard_normal(U.shape))
            pc = evaluate(prop)
            better = (pc < c) & ~_in_taboo(prop, centers, taboo_radius)
            U[better] = prop[better]
            c[better] = pc[better]
        used += nb * per_start
        done += nb
        centers = np.vstack([centers, U])
        minima_u.append(U)
        minima_c.append(c)

    U_all = np.vstack(minima_u)
    c_all = np.concatenate(minima_c)
    order = np.argsort(c_all, kind="stable")
    chosen = []
    for i in order:
        if not np.isfinite(c_all[i]):
            break
        if not chosen or np.max(np.abs(U_all[chosen] - U_all[i]), axis=1).min() >= taboo_radius:
            chosen.append(i)
    if len(chosen) < n_candidates:
        rest = [i for i in order if i not in set(chosen)]
        chosen += rest[:n_candidates - len(chosen)]
    U = U_all[chosen].copy()
    c = c_all[chosen].copy()

    span = bounds.upper - bounds.lower
    t, y = series.t, series.ln_p
    cols = np.empty((t.size, 4 if model_kind == ZIPF else 3))
    cols[:, 0] = series.zeta if model_kind == ZIPF else 1.0
    if model_kind == ZIPF:
        cols[:, 1] = 1.0

    def scalar(u):
        tc, m, om, ph = bounds.lower + u * span
        dt = tc - t
        if dt[-1] <= 0:
            return np.inf
        ldt = np.log(dt)
        f = np.exp(m * ldt)
        cols[:, -2] = f
        cols[:, -1] = f * np.cos(om * ldt - ph)
        norms = np.sqrt((cols * cols).sum(axis=0))
        if not norms.all():
            return np.inf
        q, r = np.linalg.qr(cols / norms)
        d = np.abs(r.diagonal())
        if d.min() <= RANK_RTOL:
            return np.inf
        res = y - cols @ (np.linalg.solve(r, q.T @ y) / norms)
        return float(res @ res)

    # intensification: successive halving 16 -> 8 -> 4 -> 2
    remaining = budget - used
    stages = [(16, 0.05), (8, 0.03), (4, 0.02), (2, 0.01)]
    per_stage = remaining // len(stages)
    for k, step in stages:
        k = min(k, U.shape[0])
        fev = per_stage // k
        if fev < 2 * dim + 2:
            continue
        top = np.argsort(c, kind="stable")[:k]
        for i in top:
            if np.isfinite(c[i]):
                U[i], c[i], _ = _simplex_polish(scalar, U[i], fev, step)

    order = np.argsort(c, kind="stable")[:max(n_candidates, 1)]
    X = np.clip(bounds.from_unit(U[order]), bounds.lower, bounds.upper)
    cands = [NonlinearParams.from_array(x) for x in X]
    if return_costs:
        return cands, c[order]
    return cands


# --------------------------------------------------------------------------
# Levenberg-Marquardt in unconstrained coordinates

_U_EPS = 1e-9
_PHASE = 3
# a bounded coordinate this deep in the logistic tail is treated as an active bound
_Z_PIN = math.log((1 - 1e-7) / 1e-7)


def _to_z(bounds, X):
    """Logistic coordinates for (tc, m, omega); the phase stays as is.

    The phase lives on a circle, so it is left unbounded during refinement
    and wrapped back into [0, 2 pi) afterwards instead of being squeezed
    against an artificial edge at 0 / 2 pi.
    """
    u = np.clip(bounds.to_unit(X), _U_EPS, 1 - _U_EPS)
    Z = np.log(u) - np.log1p(-u)
    Z[..., _PHASE] = X[..., _PHASE]
    return Z


def _from_z(bounds, Z):
    """Inverse of :func:`_to_z`; also returns the unwrapped unit coordinates used for step sizes."""
    u = 0.5 * (1.0 + np.tanh(0.5 * Z))
    X = bounds.from_unit(u)
    X[..., _PHASE] = np.minimum(np.mod(Z[..., _PHASE], TWO_PI), bounds.upper[_PHASE])
    u[..., _PHASE] = Z[..., _PHASE] / (bounds.upper[_PHASE] - bounds.lower[_PHASE])
    return X, u


def _lm_batch(series, bounds, X0, model_kind, max_iter, tol):
    """Levenberg-Marquardt for a stack of starts; linear parameters re-slaved at every iterate.

    Returns (X, rss, converged, n_iter). One trial step per iteration: accepted
    steps divide the damping by 10, rejected ones multiply it by 10 and reuse
    the Jacobian. A box coordinate that reaches the logistic tail is frozen
    there (its Jacobian column is zeroed); otherwise LM crawls towards the
    bound at infinity for hundreds of iterations.
    """
    N = X0.shape[0]
    Z = _to_z(bounds, X0)
    X, U = _from_z(bounds, Z)
    rss, _, R, ok = _batch_cost(series, X, model_kind)
    if not ok.all():
        raise RankDeficiencyError("rank-deficient linear system at a refinement start")
    lam = np.full(N, 1e-3)
    active = np.ones(N, dtype=bool)
    converged = np.zeros(N, dtype=bool)
    n_iter = np.zeros(N, dtype=int)
    need_jac = np.ones(N, dtype=bool)
    J = np.zeros((N, series.t.size, 4))

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        jdx = idx[need_jac[idx]]
        if jdx.size:
            h = 1e-6 * np.maximum(1.0, np.abs(Z[jdx]))
            pts = []
            for k in range(4):
                e = np.zeros_like(Z[jdx])
                e[:, k] = h[:, k]
                pts.append(Z[jdx] + e)
                pts.append(Z[jdx] - e)
            P = np.vstack(pts)
            _, _, RP, okp = _batch_cost(series, _from_z(bounds, P)[0], model_kind)
            RP = RP.reshape(8, jdx.size, -1)
            for k in range(4):
                # residuals r = y - model, so J = d r / d z
                J[jdx, :, k] = (RP[2 * k] - RP[2 * k + 1]) / (2 * h[:, k, None])
            bad = ~np.all(okp.reshape(8, jdx.size), axis=0)
            J[jdx[bad]] = 0.0
            pinned = np.abs(Z[jdx, :_PHASE]) > _Z_PIN
            J[jdx, :, :_PHASE] *= ~pinned[:, None, :]
            need_jac[jdx] = False

        Ji, Ri = J[idx], R[idx]
        A = np.einsum("ntk,ntl->nkl", Ji, Ji)
        g = np.einsum("ntk,nt->nk", Ji, Ri)
        d = np.diagonal(A, axis1=1, axis2=2)
        d = np.maximum(d, 1e-12 * np.maximum(d.max(axis=1, keepdims=True), 1e-300))
        M = A + lam[idx, None, None] * (d[:, :, None] * np.eye(4)[None])
        try:
            step = -np.linalg.solve(M, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.zeros_like(g)
            for n in range(idx.size):
                step[n] = -np.linalg.lstsq(M[n], g[n], rcond=None)[0]
        Zt = Z[idx] + step
        Xt, Ut = _from_z(bounds, Zt)
        rt, _, Rt, okt = _batch_cost(series, Xt, model_kind)
        rt = np.where(okt & np.isfinite(rt), rt, np.inf)
        du = np.max(np.abs(Ut - U[idx]), axis=1)
        acc = rt < rss[idx]
        n_iter[idx] += 1

        a_idx = idx[acc]
        rel = (rss[a_idx] - rt[acc]) / np.maximum(rss[a_idx], 1e-300)
        Z[a_idx], X[a_idx], U[a_idx] = Zt[acc], Xt[acc], Ut[acc]
        rss[a_idx], R[a_idx] = rt[acc], Rt[acc]
        lam[a_idx] = np.maximum(lam[a_idx] / 10.0, 1e-15)
        need_jac[a_idx] = True

        r_idx = idx[~acc]
        lam[r_idx] *= 10.0

        stop = du < tol
        stop[acc] |= rel < tol
        stop |= lam[idx] > 1e16
        converged[idx[stop]] = True
        active[idx[stop]] = False
    return X, rss, converged, n_iter


def _finish(series, x, model_kind, converged, n_iter, omega_max):
    nl = NonlinearParams.from_array(x)
    lin = slave_linear(series, nl, model_kind)
    if lin.C < 0:
        phi = (nl.phi + math.pi) % TWO_PI
        flipped = NonlinearParams(nl.tc, nl.m, nl.omega, min(phi, TWO_PI - 1e-5))
        try:
            lin2 = slave_linear(series, flipped, model_kind)
            nl, lin = flipped, lin2
        except RankDeficiencyError:
            pass
    resid = model_residuals(series, nl, lin)
    resid.setflags(write=False)
    return FitResult(
        nl=nl, lin=lin, rss=float(np.dot(resid, resid)), residuals=resid,
        flags=qualify(nl, lin, omega_max), model_kind=model_kind,
        converged=bool(converged), n_iter=int(n_iter),
    )


def refine_many(series, starts, bounds, model_kind=ZIPF, config: FitConfig | None = None):
    """Refine several starting points at once; rank-deficient starts are skipped."""
    config = config or FitConfig()
    X0 = np.array([s.as_array() for s in starts], dtype=float).reshape(-1, 4)
    if X0.shape[0] == 0:
        return []
    rss0, _, _, ok = _batch_cost(series, X0, model_kind)
    X0 = X0[ok]
    if X0.shape[0] == 0:
        return []
    X, rss, conv, nit = _lm_batch(series, bounds, X0, model_kind, config.lm_max_iter, config.lm_tol)
    return [_finish(series, X[n], model_kind, conv[n], nit[n], config.omega_max) for n in range(X.shape[0])]


def refine(series, start: NonlinearParams, bounds, model_kind=ZIPF, config: FitConfig | None = None) -> FitResult:
    """Levenberg-Marquardt refinement of one start inside ``bounds``.

    Raises :class:`RankDeficiencyError` when the start itself is degenerate.
    A fit that hits ``lm_max_iter`` comes back with ``converged=False``.
    """
    if not bounds.contains(start.as_array()):
        raise InputError(f"refinement start {start} outside the search box")
    _check_series(series, model_kind, start)
    out = refine_many(series, [start], bounds, model_kind, config)
    if not out:
        raise RankDeficiencyError(f"linear system is rank deficient at {start}")
    return out[0]


def _is_duplicate(a: NonlinearParams, b: NonlinearParams) -> bool:
    return abs(a.tc - b.tc) < 1.0 and abs(a.m - b.m) < 0.01 and abs(a.omega - b.omega) < 0.1


def _ordered(results, omega_max):
    return sorted(
        (r for r in results if r.nl.omega <= omega_max and np.isfinite(r.rss)),
        key=lambda r: (r.rss, r.nl.tc, r.nl.m, r.nl.omega, r.nl.phi),
    )


def select_best(results, keep_best, omega_max=20.0):
    """Drop omega > omega_max fits, collapse duplicates onto the lower RSS, keep the best."""
    kept = []
    for r in _ordered(results, omega_max):
        if not any(_is_duplicate(r.nl, k.nl) for k in kept):
            kept.append(r)
        if len(kept) == keep_best:
            break
    return kept


def model_seed(seed: int, model_kind: str) -> int:
    """Search seed for one model, derived from the master seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, MODEL_KINDS.index(model_kind)])
    return int(ss.generate_state(1)[0])


def keep_lowest(results, keep_best, omega_max=20.0):
    """The ``keep_best`` lowest-RSS fits with omega <= omega_max, and their distinct-basin count."""
    kept = _ordered(results, omega_max)[:keep_best]
    return kept, len(select_best(kept, keep_best, omega_max))


def fit_window(window: FitWindow, config: FitConfig | None = None, model_kind: str = ZIPF,
               extra_starts=()) -> FitEnsemble:
    """Search, refine and keep the ``keep_best`` lowest-RSS fits of one window.

    Every heuristic candidate (mutually distinct starting guesses) is refined
    by Levenberg-Marquardt; fits with omega above ``config.omega_max`` are
    dropped and the rest ranked by RSS.
    """
    config = config or FitConfig()
    if window.t2 - window.t1 < config.min_window:
        raise InputError(f"window [{window.t1}, {window.t2}] shorter than the minimum of {config.min_window} days")
    series = window.series
    bounds = search_bounds(window.t1, window.t2)
    cands = heuristic_search(
        series, bounds, config.search_budget, model_seed(config.seed, model_kind), model_kind,
        local_moves=config.local_moves, local_step=config.local_step,
        taboo_radius=config.taboo_radius, n_candidates=max(config.n_refine, config.keep_best),
    )
    starts = list(cands) + [s for s in extra_starts if bounds.contains(s.as_array())]
    results = refine_many(series, starts, bounds, model_kind, config)
    if not any(r.converged for r in results):
        raise FitError(f"no convergent fit in window [{window.t1}, {window.t2}] ({model_kind})")
    kept, n_distinct = keep_lowest(results, config.keep_best, config.omega_max)
    if not kept:
        raise FitError(f"every fit in window [{window.t1}, {window.t2}] has omega > {config.omega_max}")
    return FitEnsemble(window=window, results=tuple(kept), model_kind=model_kind, n_distinct=n_distinct)


def _as_zipf(series, res: FitResult, omega_max) -> FitResult:
    """A JLS fit re-expressed in the Zipf model with gamma re-slaved (gamma = 0 if degenerate)."""
    try:
        return _finish(series, res.nl.as_array(), ZIPF, res.converged, 0, omega_max)
    except RankDeficiencyError:
        lin = LinearParams(0.0, res.lin.A, res.lin.B, res.lin.C)
        return FitResult(res.nl, lin, res.rss, res.residuals, res.flags, ZIPF, res.converged, 0)


def fit_nested(window: FitWindow, config: FitConfig | None = None):
    """Fit both models on one window as nested pairs.

    The JLS ensemble holds the ``keep_best`` best JLS fits, searched directly
    and also refined from the optima of an independent Zipf search so no basin
    either model finds is missed. Member ``k`` of the Zipf ensemble is the
    Zipf refinement started from JLS member ``k`` (gamma released), so every
    pair satisfies RSS(zipf) <= RSS(jls). This makes both the single-fit and
    the pooled likelihood ratio non-negative by construction.
    """
    config = config or FitConfig()
    jls = fit_window(window, config, JLS)
    zipf = fit_window(window, config, ZIPF)
    bounds = search_bounds(window.t1, window.t2)
    series = window.series
    j_more = refine_many(series, [r.nl for r in zipf.results], bounds, JLS, config)
    j_kept, j_nd = keep_lowest(list(jls.results) + j_more, config.keep_best, config.omega_max)
    z_kept = []
    for start in (_as_zipf(series, r, config.omega_max) for r in j_kept):
        best = start
        if start.lin.gamma != 0.0:
            refined = refine_many(series, [start.nl], bounds, ZIPF, config)
            if refined and refined[0].nl.omega <= config.omega_max and refined[0].rss <= start.rss:
                best = refined[0]
        z_kept.append(best)
    z_kept.sort(key=lambda r: r.rss)
    z_nd = len(select_best(z_kept, config.keep_best, config.omega_max))
    return (FitEnsemble(window, tuple(j_kept), JLS, j_nd),
            FitEnsemble(window, tuple(z_kept), ZIPF, z_nd))


def ensemble_to_json(ensemble: FitEnsemble) -> str:
    return json.dumps(ensemble.to_records(), indent=2, sort_keys=True)

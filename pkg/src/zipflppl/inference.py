"""Nested-model testing and window-scan aggregation.

With Gaussian residuals and maximum-likelihood variances ``RSS / T`` the
likelihood ratio of the Zipf-augmented model against plain JLS reduces to::

    W = T * ln(RSS_jls / RSS_zipf)

which is referred to a chi-square law with one degree of freedom (the extra
factor loading). The pooled variant concatenates the residuals of the kept
fits of each model and still uses one degree of freedom; this treats
overlapping, strongly dependent fits as independent samples and should be
read as a descriptive strength-of-evidence score.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .calibration import JLS, ZIPF, FitConfig, FitEnsemble, FitWindow, fit_nested
from .errors import DomainError, FitError, InputError, RankDeficiencyError
from .market_data import FactorSeries

log = logging.getLogger(__name__)

SCAN_HEADER = ["t1", "t2", "model", "rank", "tc", "tc_date", "m", "omega", "phi",
               "gamma", "A", "B", "C", "rss", "qualified"]


def sf_chi2_1(w: float) -> float:
    """Survival function of the chi-square law with one degree of freedom.

    ``P(X > w) = erfc(sqrt(w / 2))``.
    """
    if not w >= 0:
        raise DomainError(f"chi-square argument must be non-negative, got {w}")
    if math.isinf(w):
        return 0.0
    return math.erfc(math.sqrt(0.5 * w))


@dataclass(frozen=True)
class WilksReport:
    W: float
    dof: int
    p_value: float
    T: int
    reject_at_5pct: bool
    clamped: bool = False
    exact_fit: bool = False

    def to_dict(self) -> dict:
        return {"W": self.W, "dof": self.dof, "p_value": self.p_value, "T": self.T,
                "reject_at_5pct": self.reject_at_5pct}

    @property
    def warning(self) -> bool:
        return self.clamped or self.exact_fit


def wilks_from_rss(rss_jls: float, rss_zipf: float, T: int) -> WilksReport:
    if T < 10:
        raise InputError(f"Wilks test needs at least 10 residuals, got {T}")
    clamped = exact = False
    if rss_zipf == 0.0:
        if rss_jls == 0.0:
            W = 0.0
        else:
            warnings.warn("Zipf model fits exactly; W is infinite and p = 0", RuntimeWarning)
            W, exact = math.inf, True
    elif rss_zipf > rss_jls:
        warnings.warn(
            f"RSS_zipf ({rss_zipf:.6g}) exceeds RSS_jls ({rss_jls:.6g}); the nested optimum was "
            "missed, W clamped to 0", RuntimeWarning,
        )
        W, clamped = 0.0, True
    else:
        W = T * math.log(rss_jls / rss_zipf)
    p = sf_chi2_1(W)
    return WilksReport(W=W, dof=1, p_value=p, T=T, reject_at_5pct=p < 0.05, clamped=clamped, exact_fit=exact)


def wilks_statistic(res_jls, res_zipf) -> WilksReport:
    """Likelihood-ratio test of the best Zipf fit against the best JLS fit."""
    res_jls = np.asarray(res_jls, dtype=float)
    res_zipf = np.asarray(res_zipf, dtype=float)
    if res_jls.shape != res_zipf.shape or res_jls.ndim != 1:
        raise InputError("residual vectors must be 1-D and of equal length")
    return wilks_from_rss(float(res_jls @ res_jls), float(res_zipf @ res_zipf), res_jls.size)


def pooled_wilks(ensemble_jls: FitEnsemble, ensemble_zipf: FitEnsemble) -> WilksReport:
    """Wilks test on the concatenated residuals of all kept fits of each model."""
    wj, wz = ensemble_jls.window, ensemble_zipf.window
    if (wj.t1, wj.t2) != (wz.t1, wz.t2):
        raise InputError("pooled Wilks test needs both ensembles on the same window")
    if len(ensemble_jls) != len(ensemble_zipf):
        raise InputError(
            f"pooled Wilks test needs equal fit counts, got {len(ensemble_jls)} and {len(ensemble_zipf)}"
        )
    rj = np.concatenate([r.residuals for r in ensemble_jls.results])
    rz = np.concatenate([r.residuals for r in ensemble_zipf.results])
    return wilks_statistic(rj, rz)


def aggregate_stats(values):
    """Mean, median and sample standard deviation (n - 1 divisor; NaN for one value)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise InputError("cannot aggregate an empty sample")
    std = float(np.std(v, ddof=1)) if v.size > 1 else math.nan
    return float(np.mean(v)), float(np.median(v)), std


def window_seed(master_seed: int, t1: int, t2: int) -> int:
    """Per-window seed: first 32-bit word of ``SeedSequence([seed, t1, t2])``."""
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, int(t1), int(t2)])
    return int(ss.generate_state(1)[0])


def day_to_date(day: float, dates, t_first: int) -> str:
    """Calendar date of a (possibly fractional, possibly future) trading day.

    ``dates[k]`` is the date of day ``t_first + k``; days past the end are
    extrapolated on the weekday calendar.
    """
    k = int(math.floor(day + 0.5)) - t_first
    if not dates or not dates[0]:
        return ""
    if 0 <= k < len(dates):
        return dates[k]
    if k < 0:
        return str(np.busday_offset(np.datetime64(dates[0]), k, roll="backward"))
    return str(np.busday_offset(np.datetime64(dates[-1]), k - len(dates) + 1, roll="forward"))


@dataclass
class ScanResult:
    windows: list
    ensembles: dict
    failures: list = field(default_factory=list)
    config: FitConfig = field(default_factory=FitConfig)
    dates: tuple = ()
    t_first: int = 0

    def values(self, model_kind, attr, qualified_only=False):
        out = []
        for w in self.windows:
            ens = self.ensembles.get(w, {}).get(model_kind)
            if ens is None:
                continue
            for r in ens.results:
                if qualified_only and not r.flags.is_bubble:
                    continue
                out.append(getattr(r.nl, attr) if hasattr(r.nl, attr) else getattr(r.lin, attr))
        return np.array(out, dtype=float)

    def tc_stats(self, model_kind, qualified_only=False):
        mean, _, std = aggregate_stats(self.values(model_kind, "tc", qualified_only))
        return mean, std

    def gamma_stats(self, qualified_only=False):
        return aggregate_stats(self.values(ZIPF, "gamma", qualified_only))

    def n_fits(self, model_kind) -> int:
        return sum(len(self.ensembles[w][model_kind]) for w in self.windows if w in self.ensembles)

    def rows(self):
        """Per-fit rows in canonical ``(t1, t2, model, rank)`` order."""
        out = []
        for w in sorted(self.windows):
            if w not in self.ensembles:
                continue
            for model in (JLS, ZIPF):
                ens = self.ensembles[w][model]
                for rank, r in enumerate(ens.results, 1):
                    out.append({
                        "t1": w[0], "t2": w[1], "model": model, "rank": rank,
                        "tc": r.nl.tc, "tc_date": day_to_date(r.nl.tc, self.dates, self.t_first),
                        "m": r.nl.m, "omega": r.nl.omega, "phi": r.nl.phi,
                        "gamma": r.lin.gamma, "A": r.lin.A, "B": r.lin.B, "C": r.lin.C,
                        "rss": r.rss, "qualified": int(r.flags.is_bubble),
                    })
        return out

    def summary(self, qualified_only=False):
        """Table-style aggregate rows: t_c mean/std per model, gamma mean/median/std."""
        rows = []
        for model in (JLS, ZIPF):
            tc = self.values(model, "tc", qualified_only)
            if tc.size == 0:
                continue
            mean, median, std = aggregate_stats(tc)
            rows.append({"quantity": "tc", "model": model, "n": int(tc.size), "mean": mean,
                         "median": median, "std": std,
                         "mean_date": day_to_date(mean, self.dates, self.t_first)})
        g = self.values(ZIPF, "gamma", qualified_only)
        if g.size:
            mean, median, std = aggregate_stats(g)
            rows.append({"quantity": "gamma", "model": ZIPF, "n": int(g.size), "mean": mean,
                         "median": median, "std": std, "mean_date": ""})
        return rows


def scan_grid(base_t1, base_t2, n_t1=15, n_t2=15, step=3):
    return [(base_t1 + i * step, base_t2 + j * step) for i in range(n_t1) for j in range(n_t2)]


def _fit_one_window(args):
    series, t1, t2, config = args
    cfg = config.with_overrides(seed=window_seed(config.seed, t1, t2))
    try:
        window = FitWindow.from_series(series, t1, t2, min_window=cfg.min_window)
        jls, zipf = fit_nested(window, cfg)
    except (FitError, RankDeficiencyError) as exc:
        return (t1, t2), None, str(exc)
    return (t1, t2), {JLS: jls, ZIPF: zipf}, None


def scan_windows(series: FactorSeries, base_t1: int, base_t2: int, n_t1: int = 15, n_t2: int = 15,
                 step: int = 3, config: FitConfig | None = None, jobs: int = 1) -> ScanResult:
    """Fit both models on every window ``(base_t1 + i*step, base_t2 + j*step)``.

    Each window is fitted with its own seed derived from ``config.seed`` and
    the window bounds, so results do not depend on ``jobs`` or scheduling.
    Windows whose fit fails are listed in ``failures`` and left out of the
    aggregates.
    """
    config = config or FitConfig()
    if n_t1 < 1 or n_t2 < 1 or step < 1:
        raise InputError("scan needs n_t1, n_t2, step >= 1")
    windows = scan_grid(base_t1, base_t2, n_t1, n_t2, step)
    for t1, t2 in windows:
        if t2 - t1 < config.min_window:
            raise InputError(f"scan window [{t1}, {t2}] shorter than the minimum of {config.min_window} days")
        if t1 < series.t1 or t2 > series.t2:
            raise InputError(f"scan window [{t1}, {t2}] outside series [{series.t1}, {series.t2}]")
    tasks = [(series, t1, t2, config) for t1, t2 in windows]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_fit_one_window, tasks, chunksize=1))
    else:
        outcomes = [_fit_one_window(t) for t in tasks]
    ensembles, failures = {}, []
    for w, ens, err in outcomes:
        if ens is None:
            log.warning("window %s failed: %s", w, err)
            failures.append((w, err))
        else:
            ensembles[w] = ens
    return ScanResult(windows=windows, ensembles=ensembles, failures=failures, config=config,
                      dates=series.dates, t_first=series.t1)


def write_scan_csv(result: ScanResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SCAN_HEADER, lineterminator="\n")
        w.writeheader()
        for row in result.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_summary_csv(result: ScanResult, path, qualified_only=False) -> None:
    fields = ["quantity", "model", "n", "mean", "median", "std", "mean_date"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in result.summary(qualified_only):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def report_json(report: WilksReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)

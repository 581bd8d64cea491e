import json
import math

import numpy as np
import pytest

import oracles
from conftest import TRUE_LIN, TRUE_NL, synth_series
from zipflppl.calibration import (
    JLS, ZIPF, FitConfig, FitEnsemble, FitResult, FitWindow, cost, ensemble_to_json, fit_nested, fit_window,
    heuristic_search, keep_lowest, load_config, model_residuals, refine, refine_many, search_bounds,
    select_best, slave_linear,
)
from zipflppl.errors import DomainError, FitError, InputError, RankDeficiencyError
from zipflppl.lppl_core import LinearParams, NonlinearParams, qualify
from zipflppl.market_data import FactorSeries

LIGHT = FitConfig(n_starts=30, n_refine=10)


def _series(t, ln_p, zeta):
    t = np.asarray(t, dtype=float)
    return FactorSeries(t0=int(t[0]) - 1, t=t, ln_p=np.asarray(ln_p, dtype=float),
                        ln_pe=np.asarray(ln_p, dtype=float) - zeta, zeta=np.asarray(zeta, dtype=float))


def test_slave_linear_exact_interpolation():
    nl = NonlinearParams(120.0, 0.6, 7.0, 2.0)
    lin = LinearParams(0.3, 2.0, -1.0, 0.05)
    s = synth_series(nl, lin, t1=1, t2=100, zeta="linear-drift", rate=0.01)
    got = slave_linear(s, nl, ZIPF)
    assert np.allclose(got.as_array(), lin.as_array(), rtol=0, atol=1e-8)


def test_slave_linear_zero_zeta_is_rank_deficient():
    s = synth_series(zeta="zero")
    with pytest.raises(RankDeficiencyError):
        slave_linear(s, TRUE_NL, ZIPF)
    with pytest.raises(RankDeficiencyError):
        cost(s, TRUE_NL, ZIPF)
    # the jls system is fine on the same data
    lin = slave_linear(s, TRUE_NL, JLS)
    assert lin.gamma == 0.0


def test_slave_linear_matches_normal_equations(rng):
    for k in range(100):
        t = np.arange(1, 51, dtype=float)
        zeta = np.cumsum(rng.normal(0, 0.01, t.size))
        y = rng.normal(0, 1, t.size).cumsum() * 0.05 + 5.0
        nl = NonlinearParams(rng.uniform(51, 70), rng.uniform(0.05, 0.95), rng.uniform(1, 20),
                             rng.uniform(0, 2 * math.pi))
        s = _series(t, y, zeta)
        kind = ZIPF if k % 2 == 0 else JLS
        got = slave_linear(s, nl, kind).as_array()
        want = np.array(oracles.normal_equation_solve(t, y, zeta, *nl.as_array(), with_gamma=kind == ZIPF))
        assert np.all(np.abs(got - want) < 1e-8), (k, got, want)


def test_slave_linear_domain_checks():
    s = synth_series()
    with pytest.raises(DomainError):
        slave_linear(s, NonlinearParams(200.0, 0.5, 8.0, 1.0))
    with pytest.raises(InputError):
        slave_linear(s, TRUE_NL, "garch")


def test_slaving_is_optimal(rng):
    s = synth_series(sigma=0.01, seed=4)
    nl = NonlinearParams(215.0, 0.4, 9.0, 0.5)
    rss, lin = cost(s, nl, ZIPF)
    base = lin.as_array()
    for _ in range(50):
        k = rng.integers(0, 4)
        d = np.zeros(4)
        d[k] = rng.choice([-1, 1]) * 10.0 ** rng.uniform(-6, -1)
        r = model_residuals(s, nl, LinearParams.from_array(base + d))
        assert r @ r > rss


def test_cost_at_truth_and_off_truth(noiseless):
    rss, lin = cost(noiseless, TRUE_NL, ZIPF)
    assert rss < 1e-18
    assert np.allclose(lin.as_array(), TRUE_LIN.as_array(), atol=1e-8)
    moved = NonlinearParams(TRUE_NL.tc + 10, TRUE_NL.m, TRUE_NL.omega, TRUE_NL.phi)
    assert cost(noiseless, moved, ZIPF)[0] > rss


def test_cost_matches_residuals(rng):
    s = synth_series(sigma=0.02, seed=9)
    for _ in range(20):
        nl = NonlinearParams(rng.uniform(201, 270), rng.uniform(0.1, 0.9), rng.uniform(2, 15), rng.uniform(0, 6))
        for kind in (JLS, ZIPF):
            rss, lin = cost(s, nl, kind)
            r = model_residuals(s, nl, lin)
            assert rss == pytest.approx(r @ r, rel=1e-9)


def test_jls_cost_not_below_zipf(rng):
    s = synth_series(sigma=0.01, seed=2)
    for _ in range(30):
        nl = NonlinearParams(rng.uniform(201, 270), rng.uniform(0.1, 0.9), rng.uniform(2, 15), rng.uniform(0, 6))
        assert cost(s, nl, JLS)[0] >= cost(s, nl, ZIPF)[0] * (1 - 1e-12)


@pytest.mark.parametrize("t1,t2,hi", [(0, 80, 110.0), (0, 100, 137.5)])
def test_search_bounds_tc(t1, t2, hi):
    b = search_bounds(t1, t2)
    assert b.lower[0] == t2 and b.upper[0] == hi


def test_search_bounds_other_coordinates():
    for t1, t2 in [(0, 40), (100, 400)]:
        b = search_bounds(t1, t2)
        assert b.lower[1:].tolist() == [1e-5, 0.01, 0.0]
        assert b.upper[1:].tolist() == [1 - 1e-5, 40.0, 2 * math.pi - 1e-5]
    with pytest.raises(InputError):
        search_bounds(5, 5)


def test_heuristic_search_budget_5000(noiseless):
    b = search_bounds(1, 200)
    cands, costs = heuristic_search(noiseless, b, 5000, 7, ZIPF, return_costs=True)
    assert len(cands) >= 10
    assert costs[0] < 1e-6
    assert all(b.contains(c.as_array()) for c in cands)
    assert list(costs) == sorted(costs)


def test_heuristic_search_deterministic():
    s = synth_series(sigma=0.01, seed=1)
    b = search_bounds(1, 200)
    a = heuristic_search(s, b, 800, 3, ZIPF)
    c = heuristic_search(s, b, 800, 3, ZIPF)
    assert [x.as_array().tolist() for x in a] == [x.as_array().tolist() for x in c]
    with pytest.raises(InputError):
        heuristic_search(s, b, 99, 3, ZIPF)


def test_refine_from_truth(noiseless):
    r = refine(noiseless, TRUE_NL, search_bounds(1, 200), ZIPF)
    assert r.converged
    assert r.rss < 1e-18
    assert r.rss == pytest.approx(float(r.residuals @ r.residuals), rel=1e-9, abs=1e-30)


def test_refine_recovers_from_perturbed_start():
    s = synth_series(sigma=1e-4, seed=11)
    b = search_bounds(1, 200)
    start = NonlinearParams(TRUE_NL.tc * 1.02, TRUE_NL.m * 1.02, TRUE_NL.omega * 1.02, TRUE_NL.phi * 1.02)
    r = refine(s, start, b, ZIPF)
    assert abs(r.nl.tc - TRUE_NL.tc) <= 0.5
    assert abs(r.nl.m - TRUE_NL.m) <= 0.01
    assert r.rss <= cost(s, start, ZIPF)[0]


def test_refine_never_increases_rss(rng):
    s = synth_series(sigma=0.01, seed=5)
    b = search_bounds(1, 200)
    starts = [NonlinearParams(*b.from_unit(rng.uniform(0.05, 0.95, 4))) for _ in range(12)]
    out = refine_many(s, starts, b, JLS, FitConfig(lm_max_iter=80))
    for st, r in zip(starts, out):
        assert r.rss <= cost(s, st, JLS)[0] * (1 + 1e-12)
        assert b.contains(r.nl.as_array())


def test_refine_rejects_start_outside_box(noiseless):
    with pytest.raises(InputError):
        refine(noiseless, NonlinearParams(300.0, 0.5, 8.0, 1.0), search_bounds(1, 200))


def test_fit_window_recovers_truth(noiseless):
    ens = fit_window(FitWindow.from_series(noiseless), LIGHT, ZIPF)
    best = ens.best
    assert abs(best.nl.tc - TRUE_NL.tc) <= 0.5
    assert abs(best.nl.m - TRUE_NL.m) <= 0.01
    assert abs(best.nl.omega - TRUE_NL.omega) <= 0.05
    assert abs(best.lin.gamma - TRUE_LIN.gamma) <= 1e-3
    rss = [r.rss for r in ens.results]
    assert rss == sorted(rss)
    assert len(ens) == LIGHT.keep_best
    b = search_bounds(1, 200)
    assert all(b.contains(r.nl.as_array()) and r.nl.omega <= 20 for r in ens.results)


def test_fit_window_deterministic():
    s = synth_series(sigma=0.005, seed=8)
    w1, w2 = FitWindow.from_series(s), FitWindow.from_series(s)
    a = ensemble_to_json(fit_window(w1, LIGHT, JLS))
    b = ensemble_to_json(fit_window(w2, LIGHT, JLS))
    assert a == b
    recs = json.loads(a)
    assert len(recs) == 10 and {"tc", "m", "omega", "phi", "gamma", "A", "B", "C", "rss"} <= set(recs[0])


def test_window_minimum_length():
    s = synth_series()
    with pytest.raises(InputError):
        FitWindow.from_series(s, 1, 30)
    FitWindow.from_series(s, 1, 31)


def test_nesting_on_windows():
    s = synth_series(sigma=0.01, seed=3)
    for t1, t2 in [(1, 120), (40, 200)]:
        j, z = fit_nested(FitWindow.from_series(s, t1, t2), LIGHT)
        assert z.best.rss <= j.best.rss
        assert len(j) == len(z) == 10
        assert sum(r.rss for r in z.results) <= sum(r.rss for r in j.results)
        assert all(r.lin.gamma == 0.0 for r in j.results)


def test_scale_equivariance(noiseless):
    c = 3.7
    shifted = FactorSeries(noiseless.t0, noiseless.t, noiseless.ln_p + math.log(c),
                           noiseless.ln_pe + math.log(c), noiseless.zeta, noiseless.dates)
    a = fit_window(FitWindow.from_series(noiseless), LIGHT, ZIPF).best
    b = fit_window(FitWindow.from_series(shifted), LIGHT, ZIPF).best
    assert b.lin.A - a.lin.A == pytest.approx(math.log(c), abs=1e-6)
    for x, y in [(a.nl.tc, b.nl.tc), (a.nl.m, b.nl.m), (a.nl.omega, b.nl.omega),
                 (a.lin.gamma, b.lin.gamma), (a.lin.B, b.lin.B), (a.lin.C, b.lin.C)]:
        assert x == pytest.approx(y, rel=1e-6, abs=1e-8)


def _fake(rss, tc, m=0.5, omega=8.0):
    nl = NonlinearParams(tc, m, omega, 1.0)
    lin = LinearParams(0.0, 1.0, -1.0, 0.0)
    return FitResult(nl, lin, rss, np.zeros(3), qualify(nl, lin), JLS)


def test_select_best_collapses_duplicates():
    res = [_fake(1.0, 100.0), _fake(1.1, 100.5), _fake(1.2, 102.0), _fake(0.9, 105.0, omega=25.0)]
    kept = select_best(res, 10)
    assert [r.rss for r in kept] == [1.0, 1.2]
    kept, n = keep_lowest(res, 10)
    assert [r.rss for r in kept] == [1.0, 1.1, 1.2] and n == 2


def test_ensemble_defaults_distinct_count():
    e = FitEnsemble(None, (_fake(1.0, 100.0),), JLS)
    assert e.n_distinct == 1 and len(e) == 1


def test_fit_window_error_when_nothing_fits():
    s = synth_series(sigma=0.01, seed=3)
    with pytest.raises(FitError):
        fit_window(FitWindow.from_series(s), LIGHT.with_overrides(omega_max=0.001), JLS)


def test_load_config(tmp_path):
    p = tmp_path / "fit.cfg"
    p.write_text("# light\nn_starts = 40\nlm_tol = 1e-8  # looser\nseed=7\n")
    cfg = load_config(p)
    assert (cfg.n_starts, cfg.lm_tol, cfg.seed, cfg.keep_best) == (40, 1e-8, 7, 10)
    j = tmp_path / "fit.json"
    j.write_text(json.dumps({"keep_best": 5, "taboo_radius": 0.03}))
    cfg = load_config(j)
    assert (cfg.keep_best, cfg.taboo_radius) == (5, 0.03)
    p.write_text("bogus = 1\n")
    with pytest.raises(InputError):
        load_config(p)
    p.write_text("n_starts 40\n")
    with pytest.raises(InputError):
        load_config(p)

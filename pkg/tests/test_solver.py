import io
import math
import warnings

import numpy as np
import pytest

from hestonvi.affine import european_price_fourier
from hestonvi.fem import Grid
from hestonvi.model import ConfigError, HestonParams, Payoff, default_weights
from hestonvi.solver import (SolveConfig, SolverError, comparison_check, extract_boundary,
                             penalty_operator, penalty_violation, picard_lambda_iterate, solve_vi)

T = 0.5
Y0 = 0.04


def _grid(p, n, K=100.0):
    return Grid.default(p, K, T, n, n)


@pytest.fixture(scope="module")
def american(bench, put):
    cfg = SolveConfig(maturity=T, n_t=20)
    return solve_vi(bench, default_weights(bench, put), put, _grid(bench, 41), cfg)


def test_zero_payoff_gives_zero(bench):
    z = Payoff.zero()
    s = solve_vi(bench, default_weights(bench), z, _grid(bench, 21), SolveConfig(maturity=T, n_t=5))
    assert np.all(s.values == 0.0)
    assert s.price(100.0, Y0) == 0.0


def test_terminal_condition_and_bounds(american):
    assert np.array_equal(american.values[-1], american.psi[-1])
    # discounted put value never exceeds the strike
    assert np.all(american.values <= 100.0 + 1e-9)
    assert penalty_violation(american) < 1e-3 * 100.0
    assert np.all(american.values >= american.psi - penalty_violation(american) - 1e-15)


def test_lumped_mass_keeps_positivity(bench, put):
    g = _grid(bench, 41)
    cfg = SolveConfig(maturity=T, n_t=20, epsilon=0.01)
    w = default_weights(bench, put)
    lumped = solve_vi(bench, w, put, g, SolveConfig(maturity=T, n_t=20, epsilon=0.01, lumped_mass=True))
    assert lumped.values.min() >= 0.0
    # the consistent mass matrix is not monotone and undershoots far from the money
    assert solve_vi(bench, w, put, g, cfg).values.min() < 0.0


def test_deep_itm_lower_bound(american):
    assert american.price(60.0, Y0) >= 40.0 - 1e-3 * 100
    assert american.price(100.0, Y0) > 0.0


def test_penalty_operator_sign():
    psi = np.array([1.0, 0.0, 2.0])
    u = np.array([0.5, 1.0, 2.0])
    assert np.array_equal(penalty_operator(psi, u, 0.1), [-5.0, 0.0, 0.0])


def test_violation_halves_with_epsilon(bench, put):
    w = default_weights(bench, put)
    g = _grid(bench, 31)
    v = [penalty_violation(solve_vi(bench, w, put, g, SolveConfig(maturity=T, n_t=10, epsilon=e)))
         for e in (0.02, 0.01)]
    assert 1.5 <= v[0] / v[1] <= 2.5


def test_american_dominates_european(bench, put):
    w = default_weights(bench, put)
    g = _grid(bench, 61)
    am = solve_vi(bench, w, put, g, SolveConfig(maturity=T, n_t=20, lumped_mass=True))
    eu = solve_vi(bench, w, put, g, SolveConfig(maturity=T, n_t=20, lumped_mass=True, penalty=False))
    assert np.all(am.values >= eu.values - 1e-10)
    # the European value dips below the intrinsic value deep in the money
    assert penalty_violation(eu) > 1.0


def test_european_vs_fourier(bench, put):
    eu = solve_vi(bench, default_weights(bench, put), put, _grid(bench, 81),
                  SolveConfig(maturity=T, n_t=40, penalty=False))
    ref = european_price_fourier(bench, put, 100.0, T, Y0)
    assert eu.price(100.0, Y0) == pytest.approx(ref, rel=5e-3)


def test_call_has_no_early_exercise(bench):
    call = Payoff.call(100.0)
    w = default_weights(bench, call)
    g = _grid(bench, 61)
    am = solve_vi(bench, w, call, g, SolveConfig(maturity=T, n_t=20))
    ref = european_price_fourier(bench, call, 100.0, T, Y0)
    assert am.price(100.0, Y0) == pytest.approx(ref, rel=1e-2)
    interior = ~g.boundary_mask()
    assert not am.exercise_mask[:-1, interior].any()


def test_crank_nicolson_rannacher_close_to_euler(bench, put, american):
    cn = solve_vi(bench, default_weights(bench, put), put, _grid(bench, 41),
                  SolveConfig(maturity=T, n_t=20, scheme="crank_nicolson_rannacher"))
    assert cn.price(100.0, Y0) == pytest.approx(american.price(100.0, Y0), rel=5e-3)


def test_extract_boundary(bench, american):
    th = extract_boundary(american)
    assert len(th) == len(american.times)
    # at maturity the put is exercised left of the shifted strike log K - cbar T
    k_T = math.log(100.0) - bench.cbar * T
    h = american.grid.x[1] - american.grid.x[0]
    assert np.nanmax(np.abs(th[-1] - k_T)) <= h
    # at t = 0 the boundary sits left of the strike at low variance
    assert th[0][1] < math.log(100.0)


def test_no_early_exercise_without_rates(put):
    p = HestonParams(kappa=2.0, theta=0.04, sigma=0.3, rho=-0.5, r=0.0)
    g = _grid(p, 41)
    w = default_weights(p, put)
    am = solve_vi(p, w, put, g, SolveConfig(maturity=T, n_t=20, lumped_mass=True))
    eu = solve_vi(p, w, put, g, SolveConfig(maturity=T, n_t=20, lumped_mass=True, penalty=False))
    # S is a martingale, so the European put already dominates the payoff
    assert am.price(100.0, Y0) == pytest.approx(eu.price(100.0, Y0), rel=1e-4)


def test_comparison_identical_payoffs(bench, put):
    rep = comparison_check(bench, default_weights(bench, put), put, put, _grid(bench, 21),
                           SolveConfig(maturity=T, n_t=5))
    assert rep.sup_diff == 0.0 and rep.ok


def test_picard_matches_direct(bench, put):
    w = default_weights(bench, put)
    g = _grid(bench, 21)
    cfg = SolveConfig(maturity=T, n_t=10, lumped_mass=True)
    direct = solve_vi(bench, w, put, g, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pic = picard_lambda_iterate(bench, w, put, g, cfg)
    assert pic.meta["picard_iterations"] > 1
    assert pic.price(100.0, Y0) == pytest.approx(direct.price(100.0, Y0), rel=1e-3)


@pytest.mark.xfail(strict=True, reason="discrete lambda-shift iterates are not monotone: the "
                   "shifted system matrix is not an M-matrix")
def test_picard_monotone(bench, put):
    w = default_weights(bench, put)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pic = picard_lambda_iterate(bench, w, put, _grid(bench, 21),
                                    SolveConfig(maturity=T, n_t=10, lumped_mass=True))
    assert pic.meta["monotone"]


@pytest.mark.parametrize("field,kw", [("solve.maturity", {"maturity": 0.0}),
                                      ("solve.n_t", {"n_t": 0}),
                                      ("solve.epsilon", {"epsilon": -1.0}),
                                      ("solve.lambda", {"lam": -1.0}),
                                      ("solve.scheme", {"scheme": "rk4"}),
                                      ("solve.outer_mode", {"outer_mode": "other"})])
def test_config_validation(field, kw):
    args = {"maturity": T, **kw}
    with pytest.raises(ConfigError) as e:
        SolveConfig(**args)
    assert e.value.field == field


def test_newton_failure_carries_trace(bench, put):
    cfg = SolveConfig(maturity=T, n_t=2, newton_max_iter=1, newton_tol=1e-300)
    with pytest.raises(SolverError) as e:
        solve_vi(bench, default_weights(bench, put), put, _grid(bench, 31), cfg)
    assert e.value.trace and len(e.value.trace[0]) == 3


def test_csv_layout(american):
    buf = io.StringIO()
    american.to_csv(buf, stride=10)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,x,y,u,exercise"
    assert len(lines) == 1 + 3 * american.grid.n_nodes

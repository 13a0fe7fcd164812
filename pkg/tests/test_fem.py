import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.integrate import dblquad

from hestonvi.fem import (Bump, Constant, Grid, assemble, continuity_probe, coercivity_probe,
                          energy_constants, export_coo, garding_probe, verify_ibp, weighted_norms)
from hestonvi.model import (ConfigError, HestonParams, MeasureWeights, box_mass, measure_density,
                            operator_coefficients, x_mass, y_mass)

GRID = Grid(-1.0, 1.0, 0.4, 21, 17)


@pytest.fixture(scope="module")
def system(bench, weights):
    return assemble(bench, weights, GRID)


def test_energy_constants_match_eigvalsh(bench, weights):
    c = energy_constants(bench, weights)
    ev = np.linalg.eigvalsh([[1.0, -0.15], [-0.15, 0.09]]) / 2
    assert c.delta1 == pytest.approx(ev[0], rel=1e-12)
    assert c.delta0 == pytest.approx(ev[1], rel=1e-12)
    assert c.K1 == pytest.approx(math.hypot(2.65, 1.61), rel=1e-12)
    assert c.lambda_min == pytest.approx(0.5 * c.delta1 + c.K1**2 / (2 * c.delta1), rel=1e-12)


def test_energy_constants_uncorrelated_unit_vol():
    p = HestonParams(kappa=2.0, theta=0.5, sigma=1.0, rho=0.0)
    c = energy_constants(p, MeasureWeights(gamma=1.0, mu=1.0))
    assert (c.delta0, c.delta1) == pytest.approx((0.5, 0.5), abs=1e-15)
    # s = -1 branch: j = 1, k = 2 - 1/2
    assert c.K1 == pytest.approx(math.hypot(1.0, 1.5), rel=1e-12)


def test_K1_reference_value(bench):
    c = energy_constants(bench, MeasureWeights(gamma=1.0, mu=1.0))
    assert c.K1 == pytest.approx(2.1657, abs=1e-4)


def test_mass_matches_box_measure(system, bench, weights):
    one = np.ones(GRID.n_nodes)
    for power, M in ((0, system.mass), (1, system.mass_y)):
        ref = box_mass(bench, weights, GRID.x_min, GRID.x_max, GRID.y_max, power)
        assert one @ (M @ one) == pytest.approx(ref, rel=1e-8)


def test_forms_on_constants(system, bench, weights):
    one = np.ones(GRID.n_nodes)
    assert abs(one @ (system.stiff_sym @ one)) < 1e-13
    assert abs(one @ (system.convect @ one)) < 1e-13
    ref = system.lam * (system.box_measure(0) + system.box_measure(1))
    assert one @ (system.a_lambda() @ one) == pytest.approx(ref, rel=1e-8)


def test_forms_on_linear_x(system, bench, weights):
    X, _ = GRID.mesh()
    one = np.ones(GRID.n_nodes)
    ym1 = y_mass(bench.beta, weights.mu, GRID.y_max, 1)
    # abar(x, x) = 1/2 int y dm
    assert X @ (system.stiff_sym @ X) == pytest.approx(0.5 * x_mass(weights.gamma, -1, 1) * ym1,
                                                       rel=1e-8)
    # atilde with trial x, test 1: int j(x) y dm
    jp, _ = operator_coefficients(bench, weights, 1.0)
    jm, _ = operator_coefficients(bench, weights, -1.0)
    ref = (jp * x_mass(weights.gamma, 0, 1) + jm * x_mass(weights.gamma, -1, 0)) * ym1
    assert one @ (system.convect @ X) == pytest.approx(ref, rel=1e-8)


def test_convection_against_dblquad(system, bench, weights):
    # trial u = y, test v = x: int k(x) y x dm
    X, Y = GRID.mesh()
    got = X @ (system.convect @ Y)

    def f(y, x):
        return operator_coefficients(bench, weights, x)[1] * y * x * measure_density(bench, weights, x, y)

    ref = sum(dblquad(f, a, b, 0.0, GRID.y_max, epsabs=1e-13, epsrel=1e-11)[0]
              for a, b in ((-1.0, 0.0), (0.0, 1.0)))
    assert got == pytest.approx(ref, rel=1e-7)


def test_symmetric_part_is_symmetric(system):
    d = system.stiff_sym - system.stiff_sym.T
    assert abs(d).max() < 1e-14


def test_weighted_norms(bench):
    p = HestonParams(kappa=1.0, theta=0.3**2 / 2, sigma=0.3, rho=0.0)
    assert p.beta == 1.0
    w = MeasureWeights(gamma=4.0, mu=2.0)
    s = assemble(p, w, GRID)
    assert weighted_norms(s, np.zeros(GRID.n_nodes)) == (0.0, 0.0)
    h, v = weighted_norms(s, np.ones(GRID.n_nodes))
    box = x_mass(4.0, -1, 1) * (1 - math.exp(-2.0 * GRID.y_max)) / 2.0
    assert h**2 == pytest.approx(box, rel=1e-8)
    assert v**2 == pytest.approx(box + box_mass(p, w, -1, 1, GRID.y_max, 1), rel=1e-8)
    u = np.random.default_rng(0).standard_normal(GRID.n_nodes)
    h, v = weighted_norms(s, u)
    assert v >= h
    with pytest.raises(ValueError):
        weighted_norms(s, np.ones(5))


def test_probes(system):
    consts = system.constants
    assert coercivity_probe(system, n_trials=50) > 0
    assert continuity_probe(system, n_trials=50) <= consts.continuity_constant(system.lam)
    assert garding_probe(system, n_trials=50) >= -1e-12


def test_truncated_convection_caps_y(bench, weights):
    s = assemble(bench, weights, GRID, truncation_M=0.1)
    X, _ = GRID.mesh()
    one = np.ones(GRID.n_nodes)
    # int j min(y, M) dm  <  int j y dm in the same sign pattern
    full = one @ (assemble(bench, weights, GRID).convect @ X)
    cut = one @ (s.convect @ X)
    assert abs(cut) < abs(full)


BUMP = Bump(0.1, 0.15, 0.4, 0.1)


def test_ibp_constant_against_bump(system):
    assert verify_ibp(system, Constant(1.0), BUMP) <= 1e-10


def test_ibp_zero_test_function(system):
    assert verify_ibp(system, BUMP, Bump(0.1, 0.15, 0.4, 0.1, scale=0.0)) == 0.0


def test_ibp_residual_small_on_fine_grid(bench, weights):
    s = assemble(bench, weights, Grid(-1.0, 1.0, 0.4, 161, 161))
    uh = s.interpolate(BUMP.value)
    scale = abs(uh @ (s.stiff_sym @ uh))
    assert verify_ibp(s, BUMP, BUMP) < 1e-2 * scale


def test_ibp_support_must_be_interior(system):
    with pytest.raises(ValueError):
        verify_ibp(system, Bump(0.9, 0.15, 0.2, 0.1), Constant(1.0))
    with pytest.raises(ValueError):
        verify_ibp(system, Constant(1.0), Constant(1.0))


def test_export_coo_roundtrip(system, tmp_path):
    path = tmp_path / "a.coo"
    export_coo(system.a_matrix(), path)
    rows, cols, vals = np.loadtxt(path, unpack=True)
    back = sp.coo_matrix((vals, (rows.astype(int), cols.astype(int))), shape=system.mass.shape)
    assert abs(back - system.a_matrix()).max() == 0.0


def test_grid_validation(bench):
    with pytest.raises(ConfigError):
        Grid(1.0, 0.0, 1.0, 10, 10)
    with pytest.raises(ConfigError):
        Grid(0.0, 1.0, 1.0, 2, 10)
    with pytest.raises(ConfigError):
        Grid(0.0, 1.0, -1.0, 10, 10)
    g = Grid.default(bench, 100.0, 0.5, 11, 11)
    assert g.x_max - g.x_min == pytest.approx(16 * math.sqrt(0.02))
    assert g.y[0] == 0.0 and g.y[-1] == g.y_max == pytest.approx(0.4)
    assert g.refine().n_x == 21
    assert g.boundary_mask().sum() == 11 + 11 + 9

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import ncx2

from hestonvi.affine import (DomainError, char_fn_field, char_fn_joint, cir_context, cir_density,
                             cir_density_bound, cir_density_integral, cir_mean,
                             european_price_fourier, laplace_transform, martingale_moment,
                             neg_moment, riccati_closed_form, riccati_solve, riccati_trace)
from hestonvi.mc import european_mc_price, mc_expectation
from hestonvi.model import HestonParams, Payoff

from conftest import X0

Y0 = 0.04


def test_zero_pair_is_trivial(bench):
    s = riccati_solve(bench, 0.0, 0.0, 1.0)
    assert s.psi == 0 and s.phi == 0


def test_logistic_solution_without_w(bench):
    # psi' = sigma^2 psi^2 / 2 - kappa psi, psi(0) = z
    k, s2, z = bench.kappa, bench.sigma**2, -0.7
    ts = np.linspace(0.0, 2.0, 9)
    e = np.exp(-k * ts)
    exact = z * k * e / (k - 0.5 * s2 * z * (1 - e))
    num = np.array([s.psi for s in riccati_solve(bench, z, 0.0, ts)])
    closed, _ = riccati_closed_form(bench, z, 0.0, ts)
    assert np.allclose(num, exact, rtol=1e-10, atol=0)
    assert np.allclose(closed, exact, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("z,w", [(-0.5, -1.0), (-0.3 + 0.8j, -0.2 - 1.1j), (1j, -2.0 + 0.5j)])
def test_closed_form_matches_ode(bench, z, w):
    ts = np.linspace(0.0, 3.0, 7)
    num = riccati_solve(bench, z, w, ts)
    psi, phi = riccati_closed_form(bench, z, w, ts)
    assert np.allclose([s.psi for s in num], psi, rtol=1e-9, atol=1e-12)
    assert np.allclose([s.phi for s in num], phi, rtol=1e-9, atol=1e-12)


def test_restart_property(bench):
    z, w, s, t = -0.4 + 0.3j, -0.8 + 0.2j, 0.3, 0.5
    a = riccati_solve(bench, z, w, s)
    b = riccati_solve(bench, a.psi, w, t)
    full = riccati_solve(bench, z, w, s + t)
    assert full.psi == pytest.approx(b.psi, rel=1e-10)
    assert full.phi == pytest.approx(a.phi + b.phi, rel=1e-10)


def test_laplace_transform_vs_mc(bench):
    ref = laplace_transform(bench, -1.0, -1.0, 1.0, Y0)
    est = mc_expectation(bench, lambda x, y, I: np.exp(-y - I), 1.0, X0, Y0, 200_000, seed=3,
                         n_steps=200)
    assert est.within(ref.real, 4.0, slack=2e-5)


def test_char_fn_properties(bench):
    assert char_fn_joint(bench, 0.0, 0.0, 0.0, 0.7, X0, Y0) == pytest.approx(1.0, abs=1e-14)
    lam, t = 0.6, 0.7
    for u, v in [(1.0, 0.0), (-2.0, 3.0), (5.0, -1.0)]:
        assert abs(char_fn_joint(bench, u, v, lam, t, X0, Y0)) <= math.exp(-lam * t) + 1e-14
        # killing at rate lam Y only differs by exp(-lam t)
        assert char_fn_joint(bench, u, v, lam, t, X0, Y0, kill="y") * math.exp(-lam * t) == \
            pytest.approx(char_fn_joint(bench, u, v, lam, t, X0, Y0), rel=1e-12)


def test_char_fn_vs_mc(bench):
    t = 0.5
    ref = char_fn_joint(bench, 1.0, 0.0, 0.0, t, X0, Y0)
    est = mc_expectation(bench, lambda x, y, I: np.exp(1j * x), t, X0, Y0, 200_000, seed=5,
                         n_steps=100)
    assert abs(est.mean - ref) <= 4 * est.std_error + 1e-4


def test_char_fn_field_matches_joint(bench):
    u = np.array([0.5, -1.0, 2.0])
    v = np.array([0.0, 1.5, -0.5])
    times = np.array([0.1, 0.9])
    X = np.array([4.5, 4.7])
    Y = np.array([0.01, 0.2])
    f = char_fn_field(bench, u, v, 0.3, times, X, Y)
    for it, t in enumerate(times):
        for ix in range(2):
            for k in range(3):
                ref = char_fn_joint(bench, u[k], v[k], 0.3, t, X[ix], Y[ix])
                assert f[it, ix, k] == pytest.approx(ref, rel=1e-9, abs=1e-14)


def test_martingale_moment(bench):
    # S e^{-(r - delta) t} is a martingale; in shifted coordinates this is
    # E[exp(X_t)] = exp(x0 + rho kappa theta t / sigma)
    t = 0.5
    ref = math.exp(X0 + bench.rho * bench.kappa * bench.theta * t / bench.sigma)
    assert martingale_moment(bench, 1.0, 0.0, t, X0, Y0) == pytest.approx(ref, rel=1e-10)
    cf = char_fn_joint(bench, -1j, 0.0, 0.0, t, X0, Y0)
    assert cf.real == pytest.approx(ref, rel=1e-10)


def test_domain_errors(bench):
    with pytest.raises(DomainError):
        riccati_solve(bench, 0.5 + 1j, 0.0, 1.0)
    # real pair above the explosion boundary
    with pytest.raises(DomainError):
        riccati_solve(bench, 100.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        riccati_solve(bench, -1.0, -1.0, -0.1)


def test_trace_monotone_decreasing(bench):
    # psi'(0) = sigma^2 z^2/2 - kappa z + w < 0; the sign persists along the flow
    _, psi, dpsi = riccati_trace(bench, -0.5, -2.0, 1.0)
    assert np.all(dpsi.real <= 1e-12)
    assert np.all(np.diff(psi.real) <= 1e-12)


@pytest.mark.parametrize("t,y0", [(0.1, 0.04), (1.0, 0.01), (2.0, 0.0)])
def test_density_matches_ncx2(bench, t, y0):
    ctx = cir_context(bench, t, y0)
    ys = np.linspace(0.005, 0.3, 40)
    ref = ncx2.pdf(ys / ctx.L_t, 2 * bench.beta, ctx.y_t / ctx.L_t) / ctx.L_t if y0 > 0 else None
    got = cir_density(bench, t, y0, ys)
    if ref is not None:
        assert np.allclose(got, ref, rtol=1e-9)
    assert cir_density_integral(bench, t, y0) == pytest.approx(1.0, abs=1e-9)
    assert cir_density_integral(bench, t, y0, power=1) == pytest.approx(cir_mean(bench, t, y0), rel=1e-9)
    assert np.all(got <= cir_density_bound(bench, t, y0, ys) * (1 + 1e-12))


def test_neg_moment_limits(bench):
    assert neg_moment(bench, 1e-6, 1.0, Y0) == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(ValueError):
        neg_moment(bench, 0.0, 1.0, Y0)


def test_neg_moment_vs_mc(bench):
    ref = neg_moment(bench, 1.0, 1.0, Y0)
    est = mc_expectation(bench, lambda x, y, I: 1.0 / I, 1.0, X0, Y0, 200_000, seed=7, n_steps=200)
    assert est.within(ref, 4.0, slack=1e-3 * ref)


# ---------------------------------------------------------------------------
# Fourier pricing

def _heston_p12(params, S, K, T, v0):
    """Classical two-probability Heston formula with the rotation-free log branch."""
    k, th, s, rho, r, q = (params.kappa, params.theta, params.sigma, params.rho, params.r,
                           params.delta)
    x = math.log(S)

    def cf(phi, j):
        u = 0.5 if j == 1 else -0.5
        b = k - rho * s if j == 1 else k
        d = np.sqrt((rho * s * 1j * phi - b) ** 2 - s**2 * (2 * u * 1j * phi - phi**2))
        g = (b - rho * s * 1j * phi - d) / (b - rho * s * 1j * phi + d)
        C = ((r - q) * 1j * phi * T + k * th / s**2
             * ((b - rho * s * 1j * phi - d) * T - 2 * np.log((1 - g * np.exp(-d * T)) / (1 - g))))
        D = (b - rho * s * 1j * phi - d) / s**2 * (1 - np.exp(-d * T)) / (1 - g * np.exp(-d * T))
        return np.exp(C + D * v0 + 1j * phi * x)

    def P(j):
        f = lambda phi: (np.exp(-1j * phi * math.log(K)) * cf(phi, j) / (1j * phi)).real
        return 0.5 + quad(f, 1e-10, 200, limit=500, epsabs=1e-12)[0] / math.pi

    call = S * math.exp(-q * T) * P(1) - K * math.exp(-r * T) * P(2)
    return call, call - S * math.exp(-q * T) + K * math.exp(-r * T)


@pytest.mark.parametrize("K", [80.0, 100.0, 125.0])
def test_fourier_matches_two_probability_formula(bench, K):
    call_ref, put_ref = _heston_p12(bench, 100.0, K, 0.5, Y0)
    assert european_price_fourier(bench, Payoff.call(K), 100.0, 0.5, Y0) == pytest.approx(call_ref, abs=1e-7)
    assert european_price_fourier(bench, Payoff.put(K), 100.0, 0.5, Y0) == pytest.approx(put_ref, abs=1e-7)


def test_parity_and_small_strike():
    p = HestonParams(kappa=2.0, theta=0.04, sigma=0.3, rho=-0.5, r=0.05, delta=0.01)
    T = 0.5
    c = european_price_fourier(p, Payoff.call(100.0), 100.0, T, Y0)
    q = european_price_fourier(p, Payoff.put(100.0), 100.0, T, Y0)
    assert c - q == pytest.approx(100 * math.exp(-0.01 * T) - 100 * math.exp(-0.05 * T), abs=1e-9)
    small = european_price_fourier(p, Payoff.call(0.1), 100.0, T, Y0)
    assert small == pytest.approx(100 * math.exp(-0.01 * T) - 0.1 * math.exp(-0.05 * T), abs=1e-8)


def test_fourier_put_vs_mc(bench, put):
    ref = european_price_fourier(bench, put, 100.0, 0.5, Y0)
    est = european_mc_price(bench, put, 100.0, 0.5, Y0, 200_000, seed=11, n_steps=50)
    assert est.within(ref, 4.0, slack=2e-3)


def test_fourier_rejects_custom(bench):
    with pytest.raises(ValueError):
        european_price_fourier(bench, Payoff.zero(), 100.0, 0.5, Y0)

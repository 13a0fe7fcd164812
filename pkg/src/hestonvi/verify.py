"""Invariant batteries behind ``hestonvi verify`` and the acceptance tests.

Each battery returns a :class:`SuiteReport` whose checks carry the measured
value, the tolerance it was held to and a short statement of the property.
Sizes (paths, vectors, grid ladders) are arguments so the same code serves
the quick CLI run and the full acceptance run.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import affine, mc
from .fem import Bump, Grid, assemble, coercivity_probe, continuity_probe, verify_ibp
from .model import HestonParams, MeasureWeights, Payoff, box_mass
from .solver import SolveConfig, comparison_check, penalty_operator, propagate, solve_vi

SUITES = ("forms", "riccati", "semigroup", "density", "comparison", "flow")

# two-sided Kolmogorov-Smirnov critical value at the 1% level, large-sample form
KS_1PCT = 1.6276


@dataclass
class Check:
    name: str
    prop: str
    value: float
    tolerance: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["property"] = d.pop("prop")
        d["value"] = _jsonable(self.value)
        d["tolerance"] = _jsonable(self.tolerance)
        d["detail"] = _jsonable(self.detail)
        return d


@dataclass
class SuiteReport:
    suite: str
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def get(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"suite": self.suite, "passed": self.passed,
                "checks": [c.to_dict() for c in self.checks]}


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (complex, np.complexfloating)):
        return [float(np.real(v)), float(np.imag(v))]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else repr(f)
    return v


def _check(name, prop, value, tol, passed, **detail) -> Check:
    return Check(name, prop, value, tol, bool(passed), detail)


# ---------------------------------------------------------------------------
# forms

IBP_BUMPS = (Bump(0.1, 0.05, 0.4, 0.035), Bump(0.2, 0.06, 0.4, 0.03))


def ibp_ladder(params: HestonParams, weights: MeasureWeights, sizes=(41, 81, 161, 321),
               grading: float = 2.0, box=(-1.0, 1.0, 0.2)):
    """Residual of (L u, v) + a(u, v) over a refinement ladder and observed orders."""
    u, v = IBP_BUMPS
    res = []
    for n in sizes:
        g = Grid(box[0], box[1], box[2], n, n, grading=grading)
        res.append(verify_ibp(assemble(params, weights, g), u, v))
    orders = [math.log2(a / b) for a, b in zip(res[:-1], res[1:])]
    return res, orders


def forms_battery(params: HestonParams, weights: MeasureWeights, grid: Grid,
                  n_vectors: int = 1000, truncations: Optional[Sequence[float]] = None,
                  ibp_sizes=(41, 81, 161, 321), min_order: float = 1.8, seed: int = 0) -> SuiteReport:
    checks = []
    if truncations is None:
        truncations = (params.theta / 4, params.theta, 4 * params.theta)
    sys0 = assemble(params, weights, grid)
    c = sys0.constants
    lo, hi = c.delta1 / 2 - 1e-9, c.continuity_constant(sys0.lam) + 1e-9
    one = np.ones(grid.n_nodes)
    mass_err = abs(one @ sys0.mass @ one / sys0.box_measure() - 1.0)
    checks.append(_check("measure_mass", "quadrature reproduces the weighted box mass",
                         mass_err, 1e-8, mass_err <= 1e-8))
    for M in [None, *truncations]:
        s = sys0 if M is None else assemble(params, weights, grid, truncation_M=M)
        tag = "full" if M is None else f"M={M:.6g}"
        r = coercivity_probe(s, n_vectors, seed)
        checks.append(_check(f"coercivity[{tag}]",
                             "a_lambda(u,u) / |u|_V^2 >= delta1/2 at lambda = lambda_min",
                             r, lo, r >= lo, n_vectors=n_vectors, lam=s.lam))
        r = continuity_probe(s, n_vectors, seed + 1)
        checks.append(_check(f"continuity[{tag}]",
                             "|a_lambda(u,v)| / (|u|_V |v|_V) <= delta0 + K1 + lambda",
                             r, hi, r <= hi, n_vectors=n_vectors))
    if ibp_sizes:
        res, orders = ibp_ladder(params, weights, ibp_sizes)
        worst = min(orders) if orders else float("nan")
        checks.append(_check("ibp_order", "(L u, v)_H + a(u, v) -> 0 at second order for bumps",
                             worst, min_order, bool(orders) and worst >= min_order,
                             sizes=list(ibp_sizes), residuals=res, orders=orders))
    return SuiteReport("forms", checks)


# ---------------------------------------------------------------------------
# riccati / affine

RICCATI_Z = (0, -1, -2 + 1j, -0.5 - 2j, 3j)
RICCATI_W = (0, -1, -0.5 + 1j, -2 - 3j, -5j)
RICCATI_T = (0.1, 1.0, 5.0)
NEG_MOMENT_TIMES = (0.05, 0.1, 0.2, 0.4, 0.8)


def riccati_agreement(params: HestonParams) -> float:
    """Worst relative gap between the ODE integration and the explicit solution."""
    worst = 0.0
    for z in RICCATI_Z:
        for w in RICCATI_W:
            num = affine.riccati_solve(params, z, w, list(RICCATI_T))
            psi, phi = affine.riccati_closed_form(params, z, w, list(RICCATI_T))
            for i, s in enumerate(num):
                worst = max(worst, abs(s.psi - psi[i]) / max(1.0, abs(s.psi)),
                            abs(s.phi - phi[i]) / max(1.0, abs(s.phi)))
    return float(worst)


def riccati_battery(params: HestonParams, x0: float, y0: float, t: float = 0.5,
                    n_paths: int = 200_000, seed: int = 0, n_steps: Optional[int] = None) -> SuiteReport:
    checks = []
    worst = riccati_agreement(params)
    checks.append(_check("riccati_closed_form", "numeric Riccati pair equals the explicit solution",
                         worst, 1e-10, worst <= 1e-10, grid="5x5x3 (z, w, t)"))

    # psi' <= 0 along the trace for real pairs with psi'(0) <= 0
    decr, n_pairs = [], 0
    for z in (-2.0, -1.0, 0.0, 0.5, 1.0):
        for w in (-3.0, -1.0, -0.1, 0.0):
            if 0.5 * params.sigma**2 * z * z - params.kappa * z + w > 0:
                continue
            _, _, dps = affine.riccati_trace(params, z, w, 2.0)
            decr.append(float(np.max(np.real(dps))))
            n_pairs += 1
    checks.append(_check("riccati_monotone", "psi' stays <= 0 when psi'(0) <= 0 (real z, w)",
                         max(decr), 1e-12, max(decr) <= 1e-12, n_pairs=n_pairs))

    exact = math.exp(x0 + params.x_drift * t)
    est = mc.mc_expectation(params, lambda x, y, I: np.exp(x), t, x0, y0, n_paths, seed, n_steps)
    z = abs(est.mean - exact) / est.std_error
    checks.append(_check("martingale", "E[exp X_t] = exp(x0 + rho kappa theta t / sigma)",
                         z, 3.0, z <= 3.0, mc=est.to_dict(), exact=exact))

    nm = affine.neg_moment(params, 1.0, t, y0)
    est = mc.mc_expectation(params, lambda x, y, I: 1.0 / I, t, x0, y0, n_paths, seed + 1,
                            n_steps or max(50, int(500 * t)))
    z = abs(est.mean - nm) / est.std_error
    checks.append(_check("neg_moment_mc", "E[(int_0^t Y)^-1] quadrature matches Monte Carlo",
                         z, 3.0, z <= 3.0, mc=est.to_dict(), quadrature=nm))

    scaled = [affine.neg_moment(params, 1.0, s, 0.0) * s**2 for s in NEG_MOMENT_TIMES]
    spread = max(scaled) / min(scaled)
    checks.append(_check("neg_moment_rate", "t^2 E[(int_0^t Y)^-1] stays bounded as t -> 0 (y0 = 0)",
                         spread, 2.0, spread <= 2.0, times=list(NEG_MOMENT_TIMES), scaled=scaled))
    return SuiteReport("riccati", checks)


# ---------------------------------------------------------------------------
# semigroup

UV_GRID = tuple((u, v) for u in (0, 1, 2) for v in (0, 1, 2))


def semigroup_mc_table(params: HestonParams, lam: float, times, x0: float, y0: float,
                       n_paths: int, seed: int, n_steps: Optional[int] = None) -> list:
    """Transform vs Monte Carlo for every (u, v) in UV_GRID; one path set per t."""
    U = np.array([u for u, _ in UV_GRID], dtype=float)[:, None]
    V = np.array([v for _, v in UV_GRID], dtype=float)[:, None]
    rows = []
    for i, t in enumerate(times):
        fn = lambda x, y, I: np.exp(-lam * (t + I))[None, :] * np.exp(1j * (U * x[None, :] + V * y[None, :]))
        ests = mc.mc_expectation_many(params, fn, t, x0, y0, n_paths, seed + i, n_steps)
        for (u, v), est in zip(UV_GRID, ests):
            cf = affine.char_fn_joint(params, u, v, lam, t, x0, y0)
            n_se = abs(est.mean - cf) / est.std_error
            rows.append({"t": t, "u": u, "v": v, "char_fn": cf, "mc": est.to_dict(), "n_se": n_se})
    return rows


def semigroup_fem_errors(params: HestonParams, weights: MeasureWeights, lam: float, t: float,
                         x0: float, sizes=(41, 81), half_width: float = 1.5, y_max: float = 0.3,
                         steps_per_year: int = 400):
    """Max relative error of the discrete killed evolution of exp(iux + ivy) on interior nodes."""
    U = np.array([u for u, _ in UV_GRID], dtype=float)
    V = np.array([v for _, v in UV_GRID], dtype=float)
    errs = []
    for n in sizes:
        g = Grid(x0 - half_width, x0 + half_width, y_max, n, n)
        s = assemble(params, weights, g, lam)
        X, Y = g.mesh()
        B = g.boundary_mask()
        f0 = affine.char_fn_field(params, U, V, lam, [0.0], X, Y)[0]
        bnd = lambda tt: affine.char_fn_field(params, U, V, lam, [tt], X[B], Y[B])[0]
        out = propagate(s, f0, t, int(steps_per_year * t) + 20, boundary=bnd, shift=lam)
        ex = affine.char_fn_field(params, U, V, lam, [t], X, Y)[0]
        sel = (np.abs(X - x0) < half_width / 3) & (Y > 0.005) & (Y < 0.4 * y_max)
        errs.append(float(np.max(np.abs(out[sel] - ex[sel]) / np.abs(ex[sel]))))
    return errs


def transition_exponent_values(params: HestonParams, weights: MeasureWeights, lam: float,
                               times=(0.02, 0.04, 0.08, 0.16), n_paths: int = 200_000, seed: int = 0):
    """t^(beta/2 + 3/4) P_t 1_B(0, 0) / |1_B|_{L^2(m)} for a box B scaled with t."""
    out = []
    for i, t in enumerate(times):
        EI = params.theta * (t + math.expm1(-params.kappa * t) / params.kappa)
        mx = params.x_drift * t - 0.5 * EI
        hx = math.sqrt(EI)
        yh = 2.0 * float(affine.cir_mean(params, t, 0.0))
        xl, xh = mx - hx, mx + hx
        f = lambda x, y, I: np.exp(-lam * (t + I)) * ((x > xl) & (x < xh) & (y < yh))
        est = mc.mc_expectation(params, f, t, 0.0, 0.0, n_paths, seed + i, max(20, int(1000 * t)))
        norm = math.sqrt(box_mass(params, weights, xl, xh, yh))
        out.append(est.mean / norm * t ** (params.beta / 2 + 0.75))
    return out


def semigroup_battery(params: HestonParams, weights: MeasureWeights, x0: float, y0: float,
                      lam: Optional[float] = None, times=(0.1, 0.5), n_paths: int = 100_000,
                      seed: int = 0, fem_sizes=(41, 81), fem_tol: float = 0.01,
                      exponent_paths: int = 100_000, n_steps: Optional[int] = None) -> SuiteReport:
    from .fem import energy_constants
    lam = energy_constants(params, weights).lambda_min if lam is None else lam
    checks = []
    rows = semigroup_mc_table(params, lam, times, x0, y0, n_paths, seed, n_steps)
    worst = max(r["n_se"] for r in rows)
    checks.append(_check("char_fn_vs_mc", "killed semigroup of exp(iux+ivy) equals the affine transform",
                         worst, 3.0, worst <= 3.0, table=rows, lam=lam))
    if fem_sizes:
        for t in times:
            errs = semigroup_fem_errors(params, weights, lam, t, x0, fem_sizes)
            ok = errs[-1] <= fem_tol and (len(errs) < 2 or errs[-1] < errs[-2])
            checks.append(_check(f"fem_evolution[t={t}]",
                                 "discrete evolution under a_lambda converges to the transform",
                                 errs[-1], fem_tol, ok, sizes=list(fem_sizes), errors=errs))
    if exponent_paths:
        lam_t = 1.05 * affine.transition_lambda_threshold(params, weights, 2.0)
        vals = transition_exponent_values(params, weights, lam_t, n_paths=exponent_paths, seed=seed + 7)
        ratio = max(vals) / min(vals)
        checks.append(_check("transition_exponent",
                             "t^(beta/2+3/4) P_t 1_B / |1_B|_L2 varies by < 3x over t in 0.02..0.16",
                             ratio, 3.0, ratio < 3.0, values=vals, lam=lam_t))
    return SuiteReport("semigroup", checks)


# ---------------------------------------------------------------------------
# density

def ks_statistic(samples: np.ndarray, edges: np.ndarray, cdf: np.ndarray) -> float:
    s = np.sort(samples)
    n = len(s)
    F = np.interp(s, edges, cdf, right=1.0)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def density_battery(params: HestonParams, y0: float, times=(0.1, 0.5, 2.0), n_points: int = 10_000,
                    n_ks: int = 100_000, seed: int = 0) -> SuiteReport:
    checks = []
    worst = 0.0
    for t in times:
        for y_start in (0.0, y0):
            worst = max(worst, abs(affine.cir_density_integral(params, t, y_start) - 1.0))
    checks.append(_check("density_mass", "int p_t(y0, y) dy = 1", worst, 1e-6, worst <= 1e-6,
                         times=list(times)))

    rng = np.random.default_rng(seed)
    t = rng.uniform(0.01, 3.0, n_points)
    ys = rng.exponential(0.05, n_points) * (rng.uniform(size=n_points) > 0.1)
    y = rng.exponential(2 * params.theta, n_points) + 1e-12
    ratio = float(np.max(affine.cir_density(params, t, ys, y) / affine.cir_density_bound(params, t, ys, y)))
    checks.append(_check("density_bound", "p_t(y0, y) <= explicit Bessel-envelope bound",
                         ratio, 1.0, ratio <= 1.0, n_points=n_points))

    tk = times[len(times) // 2]
    edges, cdf = affine.cir_cdf_table(params, tk, y0)
    samp = mc.sample_cir_exact(params, tk, y0, seed + 1, n_ks)
    ks = ks_statistic(samp, edges, cdf)
    crit = KS_1PCT / math.sqrt(n_ks)
    checks.append(_check("sampler_ks", "exact CIR sampler matches the density CDF (KS, 1% level)",
                         ks, crit, ks < crit, t=tk, n=n_ks))
    return SuiteReport("density", checks)


# ---------------------------------------------------------------------------
# comparison

def comparison_battery(params: HestonParams, weights: MeasureWeights, grid: Grid, maturity: float,
                       n_t: int = 20, strikes=(90.0, 100.0), tol: float = 1e-8,
                       seed: int = 0) -> SuiteReport:
    checks = []
    cfg = SolveConfig(maturity, n_t, lumped_mass=True)
    p1, p2 = Payoff.put(strikes[0]), Payoff.put(strikes[1])
    r = comparison_check(params, weights, p1, p2, grid, cfg, tol=tol, check_order=True)
    checks.append(_check("order_strikes", f"put K={strikes[0]:g} value <= put K={strikes[1]:g} value",
                         r.max_order_violation, tol, r.order_ok))
    shifted = Payoff.custom(lambda t, x, y: p2(params, t, x, y) + 1.0, discounted=False,
                            strike=p2.strike)
    r = comparison_check(params, weights, p2, shifted, grid, cfg, tol=tol, check_order=True)
    checks.append(_check("contraction_shift", "sup|u1 - u2| <= sup|psi1 - psi2| for psi2 = psi1 + 1",
                         r.sup_diff, 1.0 + tol, r.contraction_ok and r.order_ok,
                         sup_psi_diff=r.sup_psi_diff))

    s = solve_vi(params, weights, p2, grid, SolveConfig(maturity, n_t, lumped_mass=True))
    X, Y = grid.mesh()
    phi = s.dominating(params, s.times[:, None], X[None, :], Y[None, :])
    excess = float(max(-s.values.min(), np.max(s.values - phi)))
    checks.append(_check("bounds", "0 <= u <= Phi at all nodes and times", excess, tol, excess <= tol))

    # monotone penalty: (zeta(u) - zeta(v))^T D (u - v) >= 0 on random pairs
    rng = np.random.default_rng(seed)
    D = assemble(params, weights, grid).lumped_mass
    psi = s.psi[0]
    worst = math.inf
    for _ in range(200):
        u = psi + rng.normal(0, 5, psi.size)
        v = psi + rng.normal(0, 5, psi.size)
        worst = min(worst, float((penalty_operator(psi, u, 1.0) - penalty_operator(psi, v, 1.0))
                                 @ (D * (u - v))))
    checks.append(_check("penalty_monotone", "(zeta(u) - zeta(v))^T D (u - v) >= 0 on random pairs",
                         worst, 0.0, worst >= 0.0))
    return SuiteReport("comparison", checks)


# ---------------------------------------------------------------------------
# flow

FLOW_PAIRS = (((0.0, 0.04), (0.0, 0.04)), ((0.0, 0.04), (0.0, 0.05)), ((0.0, 0.04), (0.1, 0.04)),
              ((0.0, 0.02), (0.05, 0.06)), ((0.2, 0.1), (0.0, 0.01)))


def flow_battery(params: HestonParams, pairs=FLOW_PAIRS, t: float = 1.0, n_paths: int = 100_000,
                 seed: int = 0, n_steps: Optional[int] = 1000) -> SuiteReport:
    rows = mc.flow_continuity_probe(params, pairs, t, n_paths, seed, n_steps)
    checks = []
    for r in rows:
        tag = f"{tuple(r['start'])}->{tuple(r['start2'])}"
        checks.append(_check(f"flow_y{tag}", "E|Y' - Y| <= |y' - y| (plus 3 SE)",
                             r["mean_abs_dy"], r["bound_dy"] + 3 * r["se_dy"], r["pass_y"]))
        checks.append(_check(f"flow_x{tag}",
                             "E|X' - X| <= |x' - x| + t|y' - y|/2 + sqrt(t|y' - y|) (plus 3 SE)",
                             r["mean_abs_dx"], r["bound_dx"] + 3 * r["se_dx"], r["pass_x"]))
    return SuiteReport("flow", checks)

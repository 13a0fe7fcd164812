"""Backward penalized solver for the obstacle problem u >= psi.

Each time step solves

    M (u_n - u_{n+1}) / dt + K u_n - (1/eps) D (psi_n - u_n)_+ = g_n

on interior nodes, with u = psi on the artificial boundaries.  D is the
lumped (row-sum) mass, which makes the discrete penalty monotone.  In the
default ``direct_shifted`` mode K = A_lambda - lambda Mw, which is the
unshifted form; ``picard_lambda`` keeps K = A_lambda and moves lambda Mw u
of the previous outer iterate to the right-hand side, starting from the
dominating function.  The nonlinear step is a semismooth Newton iteration
on the active set {psi > u}.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import splu

from .fem import DiscreteSystem, Grid, assemble, energy_constants
from .model import ConfigError, DominatingFunction, HestonParams, MeasureWeights, Payoff

SCHEMES = ("implicit_euler", "crank_nicolson_rannacher")
OUTER_MODES = ("direct_shifted", "picard_lambda")
PICARD_START = "evolved"
MONOTONE_TOL = 1e-8


class SolverError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class SolveConfig:
    maturity: float
    n_t: int = 100
    epsilon: Optional[float] = None
    lam: Optional[float] = None
    scheme: str = "implicit_euler"
    newton_tol: float = 1e-8
    newton_max_iter: int = 50
    outer_mode: str = "direct_shifted"
    lumped_mass: bool = False
    penalty: bool = True
    rannacher_steps: int = 4
    picard_tol: float = 1e-11
    picard_max_iter: int = 2000
    exercise_tol: Optional[float] = None

    def __post_init__(self):
        if not self.maturity > 0:
            raise ConfigError("solve.maturity", "must be > 0")
        if not (isinstance(self.n_t, (int, np.integer)) and self.n_t >= 1):
            raise ConfigError("solve.n_t", "must be an integer >= 1")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError("solve.epsilon", "must be > 0")
        if self.lam is not None and not self.lam >= 0:
            raise ConfigError("solve.lambda", "must be >= 0")
        if self.scheme not in SCHEMES:
            raise ConfigError("solve.scheme", f"must be one of {SCHEMES}")
        if not self.newton_tol > 0:
            raise ConfigError("solve.newton_tol", "must be > 0")
        if self.outer_mode not in OUTER_MODES:
            raise ConfigError("solve.outer_mode", f"must be one of {OUTER_MODES}")

    def resolved(self, payoff: Payoff, lambda_min: float) -> "SolveConfig":
        """Copy with the data-dependent defaults filled in."""
        d = asdict(self)
        if d["epsilon"] is None:
            d["epsilon"] = 1e-6 * payoff.strike
        if d["lam"] is None:
            d["lam"] = lambda_min
        if d["exercise_tol"] is None:
            d["exercise_tol"] = 1e-6 * payoff.strike
        return SolveConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class PriceSurface:
    grid: Grid
    times: np.ndarray
    values: np.ndarray
    psi: np.ndarray
    exercise_mask: np.ndarray
    params: HestonParams
    payoff: Payoff
    config: SolveConfig
    dominating: Optional[DominatingFunction] = None
    meta: dict = field(default_factory=dict)

    def _interp(self, k: int):
        g = self.grid
        return RegularGridInterpolator((g.x, g.y), self.values[k].reshape(g.n_x, g.n_y),
                                       method="linear", bounds_error=True)

    def value_at(self, x: float, y: float, k: int = 0) -> float:
        """Shifted-coordinate value u(t_k, x, y) (discount absorbed)."""
        return float(self._interp(k)([[x, y]])[0])

    def price(self, spot: float, y0: float, k: int = 0) -> float:
        """Spot-convention price at time t_k: exp(r t) u(t, log S - cbar t, y)."""
        t = self.times[k]
        val = self.value_at(math.log(spot) - self.params.cbar * t, y0, k)
        if self.payoff.discounted:
            val *= math.exp(self.params.r * t)
        return val

    def to_csv(self, path_or_buf, stride: int = 1) -> None:
        X, Y = self.grid.mesh()
        own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
        fh = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            fh.write("t,x,y,u,exercise\n")
            for k in range(0, len(self.times), stride):
                ex = self.exercise_mask[k].astype(int)
                t = repr(float(self.times[k]))
                lines = [f"{t},{x!r},{y!r},{u!r},{e}" for x, y, u, e in
                         zip(X.tolist(), Y.tolist(), self.values[k].tolist(), ex.tolist())]
                fh.write("\n".join(lines) + "\n")
        finally:
            if own:
                fh.close()


def _nodal_payoff(params, payoff, grid, times):
    X, Y = grid.mesh()
    return np.stack([payoff(params, t, X, Y) for t in times])


def _substeps(config: SolveConfig, times: np.ndarray):
    """(t_from, t_to, theta) triples marching from T down to 0."""
    out = []
    n = len(times) - 1
    rann = config.rannacher_steps if config.scheme == "crank_nicolson_rannacher" else 0
    n_startup = min(n, (rann + 1) // 2)
    for k in range(n - 1, -1, -1):
        t_hi, t_lo = times[k + 1], times[k]
        if config.scheme == "implicit_euler":
            out.append([(t_hi, t_lo, 1.0)])
        elif (n - 1 - k) < n_startup:
            mid = 0.5 * (t_hi + t_lo)
            out.append([(t_hi, mid, 1.0), (mid, t_lo, 1.0)])
        else:
            out.append([(t_hi, t_lo, 0.5)])
    return out


class _StepSolver:
    """Caches the interior blocks of one (dt, theta) combination."""

    def __init__(self, Mt, K, interior, boundary):
        self.Mt = Mt
        self.K = K
        self.I = interior
        self.B = boundary
        self._cache = {}

    def blocks(self, dt, theta):
        key = (round(dt, 15), theta)
        if key not in self._cache:
            S = (self.Mt / dt + theta * self.K).tocsr()
            R = (self.Mt / dt - (1.0 - theta) * self.K).tocsr()
            S_II = S[self.I][:, self.I].tocsc()
            S_IB = S[self.I][:, self.B].tocsr()
            self._cache = {key: {"R": R, "S_II": S_II, "S_IB": S_IB, "lu": None}}
        return self._cache[key]


def _march(system: DiscreteSystem, K: sp.spmatrix, psi: np.ndarray, times: np.ndarray,
           config: SolveConfig, penalty: bool, source: Optional[np.ndarray] = None):
    """Backward march; returns (values, stats)."""
    grid = system.grid
    bmask = grid.boundary_mask()
    I = np.flatnonzero(~bmask)
    B = np.flatnonzero(bmask)
    D = system.lumped_mass
    Mt = sp.diags(D).tocsr() if config.lumped_mass else system.mass
    eps = config.epsilon
    step = _StepSolver(Mt, K, I, B)
    n = len(times) - 1
    U = np.empty_like(psi)
    U[n] = psi[n]
    idx_of = {float(t): i for i, t in enumerate(times)}
    D_I = D[I]
    active = np.zeros(len(I), dtype=bool)
    newton_counts = []
    max_res = 0.0

    def psi_at(t):
        k = idx_of.get(float(t))
        if k is not None:
            return psi[k]
        # Rannacher midpoints: linear in time between the bracketing levels
        j = int(np.searchsorted(times, t)) - 1
        a = (t - times[j]) / (times[j + 1] - times[j])
        return (1 - a) * psi[j] + a * psi[j + 1]

    def src_at(t):
        if source is None:
            return None
        k = idx_of.get(float(t))
        if k is not None:
            return source[k]
        j = int(np.searchsorted(times, t)) - 1
        a = (t - times[j]) / (times[j + 1] - times[j])
        return (1 - a) * source[j] + a * source[j + 1]

    for k, subs in zip(range(n - 1, -1, -1), _substeps(config, times)):
        u = U[k + 1].copy()
        for t_hi, t_lo, theta in subs:
            dt = t_hi - t_lo
            blk = step.blocks(dt, theta)
            R, S_II, S_IB = blk["R"], blk["S_II"], blk["S_IB"]
            p_lo = psi_at(t_lo)
            rhs = R @ u
            g_lo, g_hi = src_at(t_lo), src_at(t_hi)
            if g_lo is not None:
                rhs = rhs + theta * g_lo + (1.0 - theta) * g_hi
            u_B = p_lo[B]
            b_I = rhs[I] - S_IB @ u_B
            p_I = p_lo[I]
            if not penalty:
                if blk["lu"] is None:
                    blk["lu"] = splu(S_II)
                u_I = blk["lu"].solve(b_I)
                its = 1
            else:
                u_I, active, its, res = _newton(S_II, b_I, p_I, D_I, eps, active, u[I],
                                                config, t_lo)
                max_res = max(max_res, res)
            if not np.all(np.isfinite(u_I)):
                raise SolverError(f"non-finite values at t={t_lo:.6g}")
            u = np.empty_like(u)
            u[I] = u_I
            u[B] = u_B
            newton_counts.append(its)
        U[k] = u
    return U, {"newton_iterations": int(np.sum(newton_counts)),
               "max_newton_per_step": int(np.max(newton_counts)) if newton_counts else 0,
               "max_newton_residual": max_res}


def _newton(S_II, b, p, D, eps, active, u0, config, t):
    """Semismooth Newton for S u - b - (1/eps) D (p - u)_+ = 0."""
    trace = []
    diagS = S_II.diagonal()
    pen = D / eps
    act = active.copy() if active.any() else (p - u0 > 0)
    for it in range(1, config.newton_max_iter + 1):
        A = (S_II + sp.diags(pen * act)).tocsc()
        u = splu(A).solve(b + pen * act * p)
        new_act = p - u > 0
        F = S_II @ u - b - pen * np.maximum(p - u, 0.0)
        res = float(np.max(np.abs(F) / (diagS + pen * new_act)))
        trace.append((it, res, int(np.sum(new_act != act))))
        # an unchanged active set means u solves the piecewise-linear system exactly
        if res <= config.newton_tol or np.array_equal(new_act, act):
            return u, new_act, it, res
        act = new_act
    raise SolverError(f"semismooth Newton did not converge at t={t:.6g} in "
                      f"{config.newton_max_iter} iterations", trace)


def _setup(params, weights, payoff, grid, config):
    consts = energy_constants(params, weights)
    cfg = config.resolved(payoff, consts.lambda_min)
    system = assemble(params, weights, grid, cfg.lam)
    times = np.linspace(0.0, cfg.maturity, cfg.n_t + 1)
    psi = _nodal_payoff(params, payoff, grid, times)
    dom = DominatingFunction.fit(payoff, params, cfg.maturity, grid.x_min, grid.x_max, grid.y_max)
    return cfg, system, times, psi, dom


def _surface(system, times, U, psi, params, payoff, cfg, dom, meta):
    mask = (U <= psi + cfg.exercise_tol) & (psi > 0)
    return PriceSurface(system.grid, times, U, psi, mask, params, payoff, cfg, dom, meta)


def solve_vi(params: HestonParams, weights: MeasureWeights, payoff: Payoff, grid: Grid,
             config: SolveConfig, system: Optional[DiscreteSystem] = None) -> PriceSurface:
    """American (or, with ``penalty=False``, European) value surface."""
    if config.outer_mode == "picard_lambda":
        return picard_lambda_iterate(params, weights, payoff, grid, config)
    cfg, sys_, times, psi, dom = _setup(params, weights, payoff, grid, config)
    if system is not None:
        sys_ = system
    if payoff.is_zero:
        U = np.zeros_like(psi)
        return _surface(sys_, times, U, psi, params, payoff, cfg, dom, {"newton_iterations": 0})
    K = (sys_.a_lambda() - sys_.lam * sys_.mass_weighted).tocsr()
    U, stats = _march(sys_, K, psi, times, cfg, cfg.penalty)
    return _surface(sys_, times, U, psi, params, payoff, cfg, dom, stats)


def picard_lambda_iterate(params: HestonParams, weights: MeasureWeights, payoff: Payoff,
                          grid: Grid, config: SolveConfig) -> PriceSurface:
    """Outer iteration u_n = coercive VI with source lambda (1+y) u_{n-1}, from u_0 = Phi."""
    cfg, system, times, psi, dom = _setup(params, weights, payoff, grid, config)
    X, Y = grid.mesh()
    phi_nodal = np.stack([dom(params, t, X, Y) for t in times])
    Mw = system.mass_weighted
    if cfg.lumped_mass:
        Mw = sp.diags(system.lumped_mass_weighted).tocsr()
    K = (system.a_matrix() + system.lam * Mw).tocsr()
    if PICARD_START == "evolved":
        # the scheme's own image of Phi: same march, no obstacle, boundary and terminal data Phi
        prev, _ = _march(system, system.a_matrix(), phi_nodal, times, cfg, penalty=False)
    else:
        prev = phi_nodal
    Mass = system.mass
    lam = system.lam
    diffs, excess = [], []
    U = prev
    for it in range(1, cfg.picard_max_iter + 1):
        src = lam * (Mw @ prev.T).T
        U, stats = _march(system, K, psi, times, cfg, cfg.penalty, source=src)
        dU = U - prev
        hn = float(np.sqrt(np.max(np.einsum("ki,ki->k", dU, (Mass @ dU.T).T))))
        diffs.append(hn)
        excess.append(float(np.max(dU)))
        prev = U
        if hn <= cfg.picard_tol:
            break
    else:
        raise SolverError(f"lambda-shift iteration did not converge in {cfg.picard_max_iter} sweeps",
                          list(zip(diffs, excess)))
    worst_rise = max(excess[1:], default=0.0)
    monotone = bool(worst_rise <= MONOTONE_TOL)
    if not monotone:
        warnings.warn(f"lambda-shift iterates not monotone: max increase {worst_rise:.3g} "
                      "(discrete comparison principle violated)", RuntimeWarning)
    meta = {"picard_iterations": it, "picard_increments": diffs, "picard_max_increase": excess,
            "monotone": monotone}
    return _surface(system, times, U, psi, params, payoff, cfg, dom, meta)


def penalty_violation(surface: PriceSurface, payoff: Optional[Payoff] = None) -> float:
    """max over times and nodes of (psi - u)_+."""
    psi = surface.psi if payoff is None else _nodal_payoff(surface.params, payoff, surface.grid,
                                                          surface.times)
    return float(np.max(np.maximum(psi - surface.values, 0.0)))


def penalty_operator(psi: np.ndarray, u: np.ndarray, eps: float) -> np.ndarray:
    """zeta_eps(u) = -(1/eps) (psi - u)_+ nodewise."""
    return -np.maximum(psi - u, 0.0) / eps


def extract_boundary(surface: PriceSurface, payoff: Optional[Payoff] = None,
                     tol: Optional[float] = None, side: Optional[str] = None) -> list:
    """Per time, an array over y-lines of the x-threshold between exercise and continuation.

    For a put (``side='below'``) the exercise set is to the left; the
    threshold is the midpoint between its last node and the next one.
    Boundary nodes of the grid are ignored; NaN marks lines with no
    exercise node.
    """
    payoff = surface.payoff if payoff is None else payoff
    tol = surface.config.exercise_tol if tol is None else tol
    side = side or ("above" if payoff.kind == "call" else "below")
    g = surface.grid
    x = g.x
    out = []
    for k in range(len(surface.times)):
        u = surface.values[k].reshape(g.n_x, g.n_y)
        p = surface.psi[k].reshape(g.n_x, g.n_y)
        ex = (u - p <= tol) & (p > 0)
        ex[0, :] = ex[-1, :] = False
        th = np.full(g.n_y, np.nan)
        for j in range(g.n_y - 1):
            idx = np.flatnonzero(ex[:, j])
            if idx.size == 0:
                continue
            if side == "below":
                i = idx.max()
                th[j] = 0.5 * (x[i] + x[i + 1])
            else:
                i = idx.min()
                th[j] = 0.5 * (x[i] + x[i - 1])
        out.append(th)
    return out


@dataclass
class ComparisonReport:
    order_ok: bool
    max_order_violation: float
    sup_diff: float
    sup_psi_diff: float
    contraction_ok: bool
    tol: float

    @property
    def ok(self) -> bool:
        return self.order_ok and self.contraction_ok


def comparison_check(params: HestonParams, weights: MeasureWeights, payoff1: Payoff, payoff2: Payoff,
                     grid: Grid, config: SolveConfig, tol: float = 1e-8,
                     check_order: Optional[bool] = None) -> ComparisonReport:
    """Solve both obstacle problems and test u1 <= u2 and sup|u1-u2| <= sup|psi1-psi2|."""
    s1 = solve_vi(params, weights, payoff1, grid, config)
    s2 = s1 if payoff2 == payoff1 and payoff2.func is payoff1.func else \
        solve_vi(params, weights, payoff2, grid, config)
    dpsi = s1.psi - s2.psi
    if check_order is None:
        check_order = bool(np.all(dpsi <= 0))
    du = s1.values - s2.values
    viol = float(np.max(du))
    sup_d = float(np.max(np.abs(du)))
    sup_p = float(np.max(np.abs(dpsi)))
    return ComparisonReport(order_ok=(viol <= tol) if check_order else True,
                            max_order_violation=viol, sup_diff=sup_d, sup_psi_diff=sup_p,
                            contraction_ok=sup_d <= sup_p + tol, tol=tol)


def propagate(system: DiscreteSystem, f0: np.ndarray, t_final: float, n_steps: int,
              boundary: Optional[Callable] = None, shift: float = 0.0,
              rannacher_steps: int = 4) -> np.ndarray:
    """Nodal approximation of the killed semigroup applied to f0 at time t_final.

    ``f0`` may hold several right-hand sides as columns.

    Solves M v' + A_lambda v = 0 forward in time by Crank-Nicolson with
    implicit-Euler startup half-steps.  The constant part ``shift`` of the
    killing is factored out exactly: v = exp(-shift t) w with
    M w' + (A_lambda - shift M) w = 0.  ``boundary(t)`` returns the values
    of v on the essential-boundary nodes; without it the boundary is held
    at zero.
    """
    grid = system.grid
    bmask = grid.boundary_mask()
    I = np.flatnonzero(~bmask)
    B = np.flatnonzero(bmask)
    M = system.mass
    K = (system.a_lambda() - shift * M).tocsr()
    times = np.linspace(0.0, t_final, n_steps + 1)
    plan = []
    n_start = min(n_steps, (rannacher_steps + 1) // 2)
    for k in range(n_steps):
        a, b = times[k], times[k + 1]
        if k < n_start:
            m = 0.5 * (a + b)
            plan += [(a, m, 1.0), (m, b, 1.0)]
        else:
            plan.append((a, b, 0.5))
    facs = {}
    w = np.asarray(f0, dtype=complex).copy()
    for a, b, theta in plan:
        dt = b - a
        key = (round(dt, 15), theta)
        if key not in facs:
            S = (M / dt + theta * K).tocsr()
            R = (M / dt - (1 - theta) * K).tocsr()
            facs = {key: (splu(S[I][:, I].tocsc()), R, S[I][:, B].tocsr())}
        lu, R, S_IB = facs[key]
        wb = np.zeros((len(B),) + w.shape[1:], dtype=complex) if boundary is None else \
            np.asarray(boundary(b), dtype=complex) * math.exp(shift * b)
        rhs = (R @ w)[I] - S_IB @ wb
        w_new = np.empty_like(w)
        w_new[I] = lu.solve(np.ascontiguousarray(rhs.real)) + 1j * lu.solve(np.ascontiguousarray(rhs.imag))
        w_new[B] = wb
        w = w_new
    return w * math.exp(-shift * t_final)

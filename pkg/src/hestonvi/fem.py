"""Weighted bilinear Galerkin discretization on a truncated tensor grid.

Every integrand in the mass and form matrices factors into an x-part and a
y-part: the measure is exp(-gamma|x|) dx times y^(beta-1) exp(-mu y) dy,
the first-order coefficients depend on x only through sgn(x), and the
y-dependence is polynomial.  Each matrix is therefore a sum of Kronecker
products of 1-D matrices built with the same 1-D rules, so the whole
system is integrated with one positive-weight tensor quadrature.  Pointwise
inequalities between integrands (coercivity, continuity) survive the
discretization exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi, roots_legendre

from .model import (ConfigError, HestonParams, MeasureWeights, box_mass,
                    operator_coefficients)


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    x_min: float
    x_max: float
    y_max: float
    n_x: int
    n_y: int
    grading: float = 2.0

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ConfigError("grid.x_min", "need x_min < x_max")
        if not (self.n_x >= 3 and self.n_y >= 3):
            raise ConfigError("grid.n_x", "need n_x, n_y >= 3")
        if not self.y_max > 0:
            raise ConfigError("grid.y_max", "must be > 0")
        if not self.grading >= 1:
            raise ConfigError("grid.grading", "grading exponent must be >= 1")

    @classmethod
    def default(cls, params: HestonParams, strike: float, T: float, n_x: int, n_y: int,
                grading: float = 2.0, x_halfwidth: Optional[float] = None) -> "Grid":
        """x in log K +- 8 sqrt(theta T), y in [0, max(10 theta, 5 sigma^2/kappa)]."""
        hw = 8.0 * math.sqrt(params.theta * T) if x_halfwidth is None else x_halfwidth
        c = math.log(strike)
        y_max = max(10.0 * params.theta, 5.0 * params.sigma**2 / params.kappa)
        return cls(c - hw, c + hw, y_max, int(n_x), int(n_y), grading)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def y(self) -> np.ndarray:
        s = np.linspace(0.0, 1.0, self.n_y)
        y = self.y_max * s**self.grading
        y[-1] = self.y_max
        return y

    @property
    def n_nodes(self) -> int:
        return self.n_x * self.n_y

    def mesh(self):
        """Nodal coordinates flattened with index ix * n_y + iy."""
        X, Y = np.meshgrid(self.x, self.y, indexing="ij")
        return X.ravel(), Y.ravel()

    def boundary_mask(self) -> np.ndarray:
        """Nodes carrying the essential condition u = psi (x ends and y = y_max)."""
        m = np.zeros((self.n_x, self.n_y), dtype=bool)
        m[0, :] = True
        m[-1, :] = True
        m[:, -1] = True
        return m.ravel()

    def refine(self) -> "Grid":
        return Grid(self.x_min, self.x_max, self.y_max, 2 * self.n_x - 1, 2 * self.n_y - 1,
                    self.grading)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_max": self.y_max,
                "n_x": self.n_x, "n_y": self.n_y, "grading": self.grading}


@dataclass(frozen=True)
class EnergyConstants:
    delta0: float
    delta1: float
    K1: float
    lambda_min: float

    @property
    def C2(self) -> float:
        return 0.5 * self.delta1

    @property
    def C3(self) -> float:
        return self.lambda_min

    def continuity_constant(self, lam: float) -> float:
        return self.delta0 + self.K1 + lam

    def to_dict(self) -> dict:
        return {"delta0": self.delta0, "delta1": self.delta1, "K1": self.K1,
                "lambda_min": self.lambda_min}


def energy_constants(params: HestonParams, weights: MeasureWeights) -> EnergyConstants:
    rs = params.rho * params.sigma
    s2 = params.sigma**2
    # eigenvalues of [[1, rs], [rs, s2]] in a cancellation-free form
    tr = 1.0 + s2
    disc = math.hypot(1.0 - s2, 2.0 * rs)
    lam_max = 0.5 * (tr + disc)
    lam_min = (s2 - rs**2) / lam_max
    delta1 = 0.5 * lam_min
    delta0 = 0.5 * lam_max
    K1 = 0.0
    for s in (1.0, -1.0):
        j, k = operator_coefficients(params, weights, s)
        K1 = max(K1, math.hypot(j, k))
    return EnergyConstants(delta0, delta1, K1, 0.5 * delta1 + K1**2 / (2.0 * delta1))


# ---------------------------------------------------------------------------
# 1-D quadrature and element matrices

N_QX = 3
N_QY = 4
Y_SPLIT_RATIO = 1.25


def _x_rule(nodes: np.ndarray, gamma: float, n_q: int = N_QX):
    """Gauss-Legendre per cell, cells containing 0 split there.  Weights carry exp(-gamma|x|)."""
    t, w = roots_legendre(n_q)
    cells, pts, wts = [], [], []
    for c in range(len(nodes) - 1):
        a, b = nodes[c], nodes[c + 1]
        pieces = [(a, 0.0), (0.0, b)] if a < 0.0 < b else [(a, b)]
        for lo, hi in pieces:
            h = hi - lo
            p = lo + 0.5 * h * (t + 1.0)
            cells.append(np.full(n_q, c))
            pts.append(p)
            wts.append(0.5 * h * w * np.exp(-gamma * np.abs(p)))
    return np.concatenate(cells), np.concatenate(pts), np.concatenate(wts)


def _y_rule(nodes: np.ndarray, beta: float, mu: float, n_q: int = N_QY):
    """First cell: Gauss-Jacobi for y^(beta-1); elsewhere Gauss-Legendre.  Weights carry the density."""
    cells, pts, wts = [], [], []
    h0 = nodes[1] - nodes[0]
    tj, wj = roots_jacobi(n_q, 0.0, beta - 1.0)
    p = nodes[0] + 0.5 * h0 * (tj + 1.0)
    cells.append(np.zeros(n_q, dtype=int))
    pts.append(p)
    # int_0^h y^(beta-1) f dy = (h/2)^beta sum w_j f(h (1+t_j)/2)
    wts.append((0.5 * h0) ** beta * wj * np.exp(-mu * p))
    t, w = roots_legendre(n_q)
    for c in range(1, len(nodes) - 1):
        a, b = nodes[c], nodes[c + 1]
        # y^(beta-1) is far from polynomial when b/a is large: split geometrically
        m = max(1, int(math.ceil(math.log(b / a) / math.log(Y_SPLIT_RATIO))))
        edges = a * (b / a) ** (np.arange(m + 1) / m)
        edges[-1] = b
        for lo, hi in zip(edges[:-1], edges[1:]):
            h = hi - lo
            p = lo + 0.5 * h * (t + 1.0)
            cells.append(np.full(n_q, c))
            pts.append(p)
            wts.append(0.5 * h * w * np.exp((beta - 1.0) * np.log(p) - mu * p))
    return np.concatenate(cells), np.concatenate(pts), np.concatenate(wts)


def _mat1d(nodes, rule, coef, kind: str, label: str) -> np.ndarray:
    """Dense 1-D matrix M[test, trial] of int coef * (basis products) against the rule."""
    cell, p, w = rule
    h = nodes[cell + 1] - nodes[cell]
    N = [(nodes[cell + 1] - p) / h, (p - nodes[cell]) / h]
    dN = [-1.0 / h, 1.0 / h]
    test, trial = {"mm": (N, N), "dd": (dN, dN), "md": (N, dN)}[kind]
    n = len(nodes)
    out = np.zeros((n, n))
    cw = coef * w
    for a in range(2):
        for b in range(2):
            np.add.at(out, (cell + a, cell + b), cw * test[a] * trial[b])
    bad = ~np.isfinite(out)
    if bad.any():
        i = int(np.argwhere(bad)[0][0])
        c = min(i, n - 2)
        raise AssemblyError(f"non-finite {label} entry in cell {c} [{nodes[c]:.6g}, {nodes[c + 1]:.6g}]")
    return out


def _kron(a: np.ndarray, b: np.ndarray) -> sp.csr_matrix:
    return sp.kron(sp.csr_matrix(a), sp.csr_matrix(b), format="csr")


@dataclass
class DiscreteSystem:
    grid: Grid
    params: HestonParams
    weights: MeasureWeights
    mass: sp.csr_matrix
    mass_y: sp.csr_matrix
    grad: sp.csr_matrix
    stiff_sym: sp.csr_matrix
    convect: sp.csr_matrix
    lam: float
    truncation_M: Optional[float] = None
    constants: EnergyConstants = field(default=None)

    @property
    def mass_weighted(self) -> sp.csr_matrix:
        return (self.mass + self.mass_y).tocsr()

    @property
    def lumped_mass(self) -> np.ndarray:
        return np.asarray(self.mass.sum(axis=1)).ravel()

    @property
    def lumped_mass_weighted(self) -> np.ndarray:
        return np.asarray(self.mass_weighted.sum(axis=1)).ravel()

    def a_matrix(self) -> sp.csr_matrix:
        """The unshifted form a = abar + atilde (rows are test functions)."""
        return (self.stiff_sym + self.convect).tocsr()

    def a_lambda(self, lam: Optional[float] = None) -> sp.csr_matrix:
        lam = self.lam if lam is None else lam
        return (self.a_matrix() + lam * self.mass_weighted).tocsr()

    def v_matrix(self) -> sp.csr_matrix:
        """Gram matrix of the V norm: int y|grad u|^2 + (1+y) u^2 dm."""
        return (self.grad + self.mass_weighted).tocsr()

    def interpolate(self, fun) -> np.ndarray:
        X, Y = self.grid.mesh()
        return np.asarray(fun(X, Y))

    def box_measure(self, power: int = 0) -> float:
        g = self.grid
        return box_mass(self.params, self.weights, g.x_min, g.x_max, g.y_max, power)


def assemble(params: HestonParams, weights: MeasureWeights, grid: Grid, lam: Optional[float] = None,
             truncation_M: Optional[float] = None) -> DiscreteSystem:
    """Assemble mass, weighted mass, abar and atilde (optionally with y capped at M)."""
    consts = energy_constants(params, weights)
    lam = consts.lambda_min if lam is None else float(lam)
    if lam < 0:
        raise ConfigError("lambda", "must be >= 0")
    xn, yn = grid.x, grid.y
    rx = _x_rule(xn, weights.gamma)
    ry = _y_rule(yn, params.beta, weights.mu)
    one_x = np.ones_like(rx[1])
    yq = ry[1]
    ycap = yq if truncation_M is None else np.minimum(yq, truncation_M)
    jq, kq = operator_coefficients(params, weights, rx[1])

    Mx = _mat1d(xn, rx, one_x, "mm", "x-mass")
    Kx = _mat1d(xn, rx, one_x, "dd", "x-stiffness")
    Dx = _mat1d(xn, rx, one_x, "md", "x-derivative")
    Jx = _mat1d(xn, rx, jq, "md", "x-convection(j)")
    Gx = _mat1d(xn, rx, kq, "mm", "x-convection(k)")
    My0 = _mat1d(yn, ry, np.ones_like(yq), "mm", "y-mass")
    My1 = _mat1d(yn, ry, yq, "mm", "y-weighted mass")
    Ky1 = _mat1d(yn, ry, yq, "dd", "y-stiffness")
    Dy1 = _mat1d(yn, ry, yq, "md", "y-derivative")
    My1c = _mat1d(yn, ry, ycap, "mm", "y-capped mass")
    Dy1c = _mat1d(yn, ry, ycap, "md", "y-capped derivative")

    rs = params.rho * params.sigma
    mass = _kron(Mx, My0)
    mass_y = _kron(Mx, My1)
    grad = (_kron(Kx, My1) + _kron(Mx, Ky1)).tocsr()
    cross = _kron(Dx, Dy1.T)  # trial d_x, test d_y
    abar = 0.5 * (_kron(Kx, My1) + rs * (cross + cross.T) + params.sigma**2 * _kron(Mx, Ky1))
    abar = (0.5 * (abar + abar.T)).tocsr()
    atil = (_kron(Jx, My1c) + _kron(Gx, Dy1c)).tocsr()
    for name, m in (("mass", mass), ("stiff_sym", abar), ("convect", atil)):
        if not np.all(np.isfinite(m.data)):
            raise AssemblyError(f"non-finite entries in assembled {name}")
    return DiscreteSystem(grid, params, weights, mass, mass_y, grad, abar, atil, lam,
                          truncation_M, consts)


def weighted_norms(system: DiscreteSystem, u: np.ndarray):
    """(||u||_H, ||u||_V) for a nodal vector."""
    u = np.asarray(u)
    if u.shape != (system.grid.n_nodes,):
        raise ValueError(f"vector has shape {u.shape}, grid has {system.grid.n_nodes} nodes")
    h2 = float(np.real(np.vdot(u, system.mass @ u)))
    v2 = float(np.real(np.vdot(u, system.v_matrix() @ u)))
    return math.sqrt(max(h2, 0.0)), math.sqrt(max(v2, 0.0))


def _random_vectors(n: int, n_trials: int, seed: int, grid: Grid):
    """Gaussian vectors, alternating raw white noise with smoothed ones."""
    rng = np.random.default_rng(seed)
    for i in range(n_trials):
        u = rng.standard_normal(n)
        if i % 2 == 1:
            # low-frequency field: random combination of a few tensor modes
            xs = np.linspace(0, 1, grid.n_x)[:, None]
            ys = np.linspace(0, 1, grid.n_y)[None, :]
            c = rng.standard_normal((4, 4))
            f = sum(c[a, b] * np.cos(np.pi * a * xs) * np.cos(np.pi * b * ys)
                    for a in range(4) for b in range(4))
            u = f.ravel()
        yield u


def coercivity_probe(system: DiscreteSystem, n_trials: int = 1000, seed: int = 0) -> float:
    """min over random u of a_lambda(u,u) / ||u||_V^2."""
    A = system.a_lambda()
    V = system.v_matrix()
    best = math.inf
    for u in _random_vectors(system.grid.n_nodes, n_trials, seed, system.grid):
        best = min(best, float(u @ (A @ u)) / float(u @ (V @ u)))
    return best


def continuity_probe(system: DiscreteSystem, n_trials: int = 1000, seed: int = 1) -> float:
    """max over random pairs of |a_lambda(u,v)| / (||u||_V ||v||_V)."""
    A = system.a_lambda()
    V = system.v_matrix()
    vecs = list(_random_vectors(system.grid.n_nodes, 2 * n_trials, seed, system.grid))
    worst = 0.0
    for u, v in zip(vecs[0::2], vecs[1::2]):
        num = abs(float(v @ (A @ u)))
        worst = max(worst, num / math.sqrt(float(u @ (V @ u)) * float(v @ (V @ v))))
    return worst


def garding_probe(system: DiscreteSystem, n_trials: int = 1000, seed: int = 2) -> float:
    """min over random u of a(u,u) - C2||u||_V^2 + C3||(1+y)^{1/2}u||_H^2 (should be >= 0)."""
    A = system.a_matrix()
    V = system.v_matrix()
    W = system.mass_weighted
    c = system.constants
    best = math.inf
    for u in _random_vectors(system.grid.n_nodes, n_trials, seed, system.grid):
        nv = float(u @ (V @ u))
        val = float(u @ (A @ u)) - c.C2 * nv + c.C3 * float(u @ (W @ u))
        best = min(best, val / nv)
    return best


# ---------------------------------------------------------------------------
# integration by parts

@dataclass(frozen=True)
class Bump:
    """Smooth compactly supported (1-s^2)^p (1-t^2)^p on a rectangle, times an optional constant."""

    cx: float
    cy: float
    rx: float
    ry: float
    power: int = 4
    scale: float = 1.0

    @property
    def support(self):
        return (self.cx - self.rx, self.cx + self.rx, self.cy - self.ry, self.cy + self.ry)

    def _parts(self, x, y):
        s = (np.asarray(x, dtype=float) - self.cx) / self.rx
        t = (np.asarray(y, dtype=float) - self.cy) / self.ry
        inside = (np.abs(s) < 1) & (np.abs(t) < 1)
        s = np.where(inside, s, 0.0)
        t = np.where(inside, t, 0.0)
        p = self.power
        fs, ft = (1 - s**2) ** p, (1 - t**2) ** p
        dfs = -2 * p * s * (1 - s**2) ** (p - 1) / self.rx
        dft = -2 * p * t * (1 - t**2) ** (p - 1) / self.ry
        d2fs = (-2 * p * (1 - s**2) ** (p - 1) + 4 * p * (p - 1) * s**2 * (1 - s**2) ** (p - 2)) / self.rx**2
        d2ft = (-2 * p * (1 - t**2) ** (p - 1) + 4 * p * (p - 1) * t**2 * (1 - t**2) ** (p - 2)) / self.ry**2
        z = self.scale * inside
        return z, fs, ft, dfs, dft, d2fs, d2ft

    def value(self, x, y):
        z, fs, ft, *_ = self._parts(x, y)
        return z * fs * ft

    def grad(self, x, y):
        z, fs, ft, dfs, dft, *_ = self._parts(x, y)
        return z * dfs * ft, z * fs * dft

    def hess(self, x, y):
        z, fs, ft, dfs, dft, d2fs, d2ft = self._parts(x, y)
        return z * d2fs * ft, z * dfs * dft, z * fs * d2ft


@dataclass(frozen=True)
class Constant:
    c: float = 1.0
    support = None

    def value(self, x, y):
        return self.c + 0.0 * np.asarray(x) * np.asarray(y)

    def grad(self, x, y):
        z = 0.0 * np.asarray(x) * np.asarray(y)
        return z, z

    def hess(self, x, y):
        z = 0.0 * np.asarray(x) * np.asarray(y)
        return z, z, z


def apply_generator(params: HestonParams, fun, x, y):
    """Analytic L fun from the supplied value/gradient/Hessian."""
    fx, fy = fun.grad(x, y)
    fxx, fxy, fyy = fun.hess(x, y)
    rs = params.rho * params.sigma
    return (0.5 * y * (fxx + 2 * rs * fxy + params.sigma**2 * fyy)
            + (params.x_drift - 0.5 * y) * fx + params.kappa * (params.theta - y) * fy)


def _reference_pairing(params, weights, fa, fb, rect, n: int = 48):
    """int fa * fb dm over rect with a high-order tensor Gauss rule (split at x = 0)."""
    x0, x1, y0, y1 = rect
    t, w = roots_legendre(n)
    xs = [(x0, 0.0), (0.0, x1)] if x0 < 0.0 < x1 else [(x0, x1)]
    total = 0.0
    yp = y0 + 0.5 * (y1 - y0) * (t + 1)
    yw = 0.5 * (y1 - y0) * w
    for a, b in xs:
        xp = a + 0.5 * (b - a) * (t + 1)
        xw = 0.5 * (b - a) * w
        X, Y = np.meshgrid(xp, yp, indexing="ij")
        W = np.outer(xw, yw) * np.exp(-weights.gamma * np.abs(X) + (params.beta - 1) * np.log(Y)
                                      - weights.mu * Y)
        total += float(np.sum(W * fa(X, Y) * fb(X, Y)))
    return total


def verify_ibp(system: DiscreteSystem, u, v) -> float:
    """|(L u, v)_H + a(I_h u, I_h v)| for smooth u, v with a compactly supported factor.

    (L u, v)_H is computed by a high-order reference rule on the joint
    support; the form uses the assembled matrices on nodal interpolants.
    """
    g = system.grid
    supports = [f.support for f in (u, v) if f.support is not None]
    if not supports:
        raise ValueError("at least one of u, v must have compact support")
    rect = (max(s[0] for s in supports), min(s[1] for s in supports),
            max(s[2] for s in supports), min(s[3] for s in supports))
    for s in supports:
        if not (g.x_min < s[0] and s[1] < g.x_max and 0.0 < s[2] and s[3] < g.y_max):
            raise ValueError(f"support {s} must lie strictly inside the grid box")
    if rect[0] >= rect[1] or rect[2] >= rect[3]:
        lhs = 0.0
    else:
        lhs = _reference_pairing(system.params, system.weights,
                                 lambda X, Y: apply_generator(system.params, u, X, Y), v.value, rect)
    uh = system.interpolate(u.value)
    vh = system.interpolate(v.value)
    form = float(vh @ (system.a_matrix() @ uh))
    return abs(lhs + form)


def export_coo(matrix, path) -> None:
    """Write a sparse matrix as 'row col value' lines."""
    m = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        for i, j, v in zip(m.row, m.col, m.data):
            fh.write(f"{i} {j} {v:.17g}\n")

"""Monte Carlo oracle for (X, Y) in shifted coordinates.

Y moves by exact CIR transitions (scaled noncentral chi-square).  Given the
Y path, Xtilde = X - (rho/sigma) Y has Gaussian increments with mean
(rho kappa/sigma - 1/2) dI and variance (1 - rho^2) dI, where dI is the
trapezoidal integral of Y over the step.

Randomness is counter based: paths are split into fixed-size blocks and
block b of stream s draws from Philox keyed by (seed, s, b).  Estimates are
therefore independent of the number of worker threads, which only changes
scheduling.  ``PRICER_THREADS`` caps the pool size.
"""
from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .model import HestonParams, Payoff

BLOCK = 16384
STREAM_PATHS = 0
STREAM_CIR = 1
STREAM_FLOW = 2
STEPS_PER_YEAR = 250


def n_workers() -> int:
    """Thread-pool size: PRICER_THREADS if set, else the CPU count."""
    raw = os.environ.get("PRICER_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def _blocks(n_paths: int):
    return [(b, min(BLOCK, n_paths - b * BLOCK)) for b in range((n_paths + BLOCK - 1) // BLOCK)]


def _map_blocks(fn, n_paths):
    blocks = _blocks(n_paths)
    nw = n_workers()
    if nw == 1 or len(blocks) == 1:
        return [fn(b, n) for b, n in blocks]
    with ThreadPoolExecutor(max_workers=nw) as pool:
        return list(pool.map(lambda bn: fn(*bn), blocks))


@dataclass
class McEstimate:
    mean: complex
    std_error: float
    n_paths: int
    seed: int
    low_biased: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        m = self.mean
        if isinstance(m, complex) or np.iscomplexobj(m):
            d["mean"] = [float(np.real(m)), float(np.imag(m))]
        else:
            d["mean"] = float(m)
        d["std_error"] = float(self.std_error)
        return d

    def to_json(self) -> str:
        d = self.to_dict()
        return json.dumps({k: d[k] for k in ("mean", "std_error", "n_paths", "seed")})

    def within(self, value, n_se: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.mean - value) <= n_se * self.std_error + slack


def _merge_moments(parts):
    """Chan's parallel merge of (n, mean, M2) in fixed block order."""
    n, mean, m2 = 0, 0.0, 0.0
    for nb, mb, m2b in parts:
        if nb == 0:
            continue
        tot = n + nb
        delta = mb - mean
        mean = mean + delta * nb / tot
        m2 = m2 + m2b + abs(delta) ** 2 * n * nb / tot
        n = tot
    return n, mean, m2


def _block_moments(vals: np.ndarray):
    """(n, mean, M2) over the last axis; leading axes hold separate functionals."""
    if vals.ndim == 1:
        m = np.mean(vals)
        return len(vals), m, float(np.sum(np.abs(vals - m) ** 2))
    m = np.mean(vals, axis=-1)
    return vals.shape[-1], m, np.sum(np.abs(vals - m[..., None]) ** 2, axis=-1)


def _estimate(parts, seed, low_biased=False) -> McEstimate:
    n, mean, m2 = _merge_moments(parts)
    var = m2 / (n - 1) if n > 1 else 0.0
    if not np.iscomplexobj(mean):
        mean = float(mean)
    else:
        mean = complex(mean)
    return McEstimate(mean, math.sqrt(var / n), n, seed, low_biased)


# ---------------------------------------------------------------------------
# CIR sampling

def cir_step(rng: np.random.Generator, params: HestonParams, y: np.ndarray, dt: float) -> np.ndarray:
    L = params.sigma**2 * (-math.expm1(-params.kappa * dt)) / (4 * params.kappa)
    nonc = np.asarray(y) * math.exp(-params.kappa * dt) / L
    return L * rng.noncentral_chisquare(2 * params.beta, nonc)


def sample_cir_exact(params: HestonParams, t: float, y0: float, seed: int, n: int) -> np.ndarray:
    """n i.i.d. draws of Y_t given Y_0 = y0."""
    if not t > 0:
        raise ValueError("t must be > 0")

    def run(b, nb):
        return cir_step(block_rng(seed, STREAM_CIR, b), params, np.full(nb, float(y0)), t)
    return np.concatenate(_map_blocks(run, n))


# ---------------------------------------------------------------------------
# path simulation

@dataclass
class PathBatch:
    times: np.ndarray
    x_paths: np.ndarray
    y_paths: np.ndarray
    int_y: np.ndarray
    seed: int

    @property
    def n_paths(self) -> int:
        return self.x_paths.shape[0]

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


def _run_block(params, x0, y0, times, nb, rng, store, scheme):
    rs = params.rho / params.sigma
    kbar = params.rho * params.kappa / params.sigma - 0.5
    rbar = params.rho_bar
    y = np.full(nb, float(y0))
    xt = np.full(nb, float(x0) - rs * float(y0))
    I = np.zeros(nb)
    if store:
        ns = len(times)
        X, Y, J = np.empty((nb, ns)), np.empty((nb, ns)), np.empty((nb, ns))
        X[:, 0], Y[:, 0], J[:, 0] = x0, y0, 0.0
    for k in range(len(times) - 1):
        dt = times[k + 1] - times[k]
        if scheme == "exact":
            y_new = cir_step(rng, params, y, dt)
        else:
            # full-truncation Euler, speed comparisons only
            yp = np.maximum(y, 0.0)
            y_new = y + params.kappa * (params.theta - yp) * dt + params.sigma * np.sqrt(yp * dt) * rng.standard_normal(nb)
            y_new = np.maximum(y_new, 0.0)
        dI = 0.5 * (y + y_new) * dt
        xt = xt + kbar * dI + rbar * np.sqrt(dI) * rng.standard_normal(nb)
        y = y_new
        I = I + dI
        if store:
            X[:, k + 1] = xt + rs * y
            Y[:, k + 1] = y
            J[:, k + 1] = I
    if store:
        return X, Y, J
    return xt + rs * y, y, I


def _time_grid(T: float, n_steps: Optional[int]) -> np.ndarray:
    if n_steps is None:
        n_steps = max(1, int(math.ceil(STEPS_PER_YEAR * T)))
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return np.linspace(0.0, T, n_steps + 1)


def simulate_paths(params: HestonParams, x0: float, y0: float, T: float, n_steps: int,
                   n_paths: int, seed: int, scheme: str = "exact") -> PathBatch:
    """Store full paths of (X, Y, int Y) on a uniform grid."""
    times = _time_grid(T, n_steps)

    def run(b, nb):
        return _run_block(params, x0, y0, times, nb, block_rng(seed, STREAM_PATHS, b), True, scheme)
    parts = _map_blocks(run, n_paths)
    X = np.concatenate([p[0] for p in parts])
    Y = np.concatenate([p[1] for p in parts])
    J = np.concatenate([p[2] for p in parts])
    return PathBatch(times, X, Y, J, seed)


def mc_expectation(params: HestonParams, fn: Callable, t: float, x0: float, y0: float,
                   n_paths: int, seed: int, n_steps: Optional[int] = None,
                   scheme: str = "exact") -> McEstimate:
    """Streaming estimate of E[fn(X_t, Y_t, int_0^t Y)] (no paths are stored)."""
    times = _time_grid(t, n_steps)

    def run(b, nb):
        xT, yT, IT = _run_block(params, x0, y0, times, nb, block_rng(seed, STREAM_PATHS, b), False, scheme)
        return _block_moments(np.asarray(fn(xT, yT, IT)))
    return _estimate(_map_blocks(run, n_paths), seed)


def mc_expectation_many(params: HestonParams, fn: Callable, t: float, x0: float, y0: float,
                        n_paths: int, seed: int, n_steps: Optional[int] = None) -> list:
    """Like mc_expectation for ``fn`` returning shape (k, n): k estimates on shared paths."""
    times = _time_grid(t, n_steps)

    def run(b, nb):
        xT, yT, IT = _run_block(params, x0, y0, times, nb, block_rng(seed, STREAM_PATHS, b), False, "exact")
        return _block_moments(np.atleast_2d(np.asarray(fn(xT, yT, IT))))
    n, mean, m2 = _merge_moments(_map_blocks(run, n_paths))
    out = []
    for mk, m2k in zip(mean, m2):
        mk = complex(mk) if np.iscomplexobj(mk) else float(mk)
        out.append(McEstimate(mk, math.sqrt(float(m2k) / (n - 1) / n), n, seed))
    return out


def killed_semigroup_estimate(params: HestonParams, f: Callable, lam: float, t: float, x0: float,
                              y0: float, n_paths: int, seed: int,
                              n_steps: Optional[int] = None) -> McEstimate:
    """E[exp(-lam (t + int Y)) f(X_t, Y_t)]; f may be complex valued."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return mc_expectation(params, lambda x, y, I: np.exp(-lam * (t + I)) * f(x, y),
                          t, x0, y0, n_paths, seed, n_steps)


def european_mc_price(params: HestonParams, payoff: Payoff, spot: float, T: float, y0: float,
                      n_paths: int, seed: int, n_steps: Optional[int] = None) -> McEstimate:
    """Spot-convention price E[exp(-rT) psi(T, X_T)] of a European claim."""
    x0 = math.log(spot)
    disc = 1.0 if payoff.discounted else math.exp(-params.r * T)
    return mc_expectation(params, lambda x, y, I: disc * payoff(params, T, x, y), T, x0, y0,
                          n_paths, seed, n_steps)


# ---------------------------------------------------------------------------
# Longstaff-Schwartz

def _ls_basis(m: np.ndarray, y: np.ndarray, pay: np.ndarray, degree: int) -> np.ndarray:
    cols = [m**i * y**j for i in range(degree + 1) for j in range(degree + 1 - i)]
    cols.append(pay)
    return np.column_stack(cols)


def _ls_fit(m, yy, pay, target, degree, step):
    """Least squares on the payoff-augmented basis, reducing the degree on genuine rank loss.

    A payoff lying in the polynomial span (a vanilla put or call over its
    in-the-money set is affine in S/K) is dropped silently: that column is
    structurally redundant and carries no information.
    """
    deg = degree
    while True:
        A = _ls_basis(m, yy, pay, deg)
        if A.shape[0] <= A.shape[1]:
            return None, A
        coef, _, rank, _ = np.linalg.lstsq(A, target, rcond=None)
        if rank == A.shape[1]:
            return coef, A
        if rank == A.shape[1] - 1:
            P = A[:, :-1]
            cp, _, rank_p, _ = np.linalg.lstsq(P, target, rcond=None)
            if rank_p == P.shape[1]:
                return cp, P
        if deg == 0:
            return coef, A
        warnings.warn(f"rank-deficient LS regression at step {step}; degree {deg} -> {deg - 1}")
        deg -= 1


def exercise_values(batch: PathBatch, payoff: Payoff, params: HestonParams) -> np.ndarray:
    """Stopping rewards exp(-r t) psi(t, X_t, Y_t) along every path.

    For a discount-absorbed payoff this is psi itself; for an undiscounted
    payoff the factor is applied here, so both conventions give the same
    time-0 price.
    """
    t = batch.times[None, :]
    vals = payoff(params, t, batch.x_paths, batch.y_paths)
    if not payoff.discounted:
        vals = vals * np.exp(-params.r * t)
    return vals


def ls_american_price(batch: PathBatch, payoff: Payoff, params: HestonParams, degree: int = 3,
                      return_rule: bool = False):
    """Longstaff-Schwartz price at t = 0 from a stored batch (low biased).

    Regression of realized continuation values on polynomials in
    (S/K, y/theta) up to total degree ``degree`` plus the payoff, over
    in-the-money paths only.
    """
    vals = exercise_values(batch, payoff, params)
    n, ns = vals.shape
    cash = vals[:, -1].copy()
    stop = np.full(n, ns - 1)
    K = payoff.strike
    for k in range(ns - 2, 0, -1):
        pay = vals[:, k]
        itm = pay > 0
        if not itm.any():
            continue
        m = np.exp(batch.x_paths[itm, k] + params.cbar * batch.times[k]) / K
        yy = batch.y_paths[itm, k] / params.theta
        coef, A = _ls_fit(m, yy, pay[itm], cash[itm], degree, k)
        if coef is None:
            continue
        cont = A @ coef
        ex = pay[itm] > cont
        idx = np.flatnonzero(itm)[ex]
        cash[idx] = pay[idx]
        stop[idx] = k
    v0 = float(vals[0, 0])
    parts = [_block_moments(cash)]
    est = _estimate(parts, batch.seed, low_biased=True)
    if v0 > est.mean:
        est = McEstimate(v0, 0.0, n, batch.seed, True)
    if return_rule:
        return est, stop
    return est


def european_on_batch(batch: PathBatch, payoff: Payoff, params: HestonParams) -> McEstimate:
    vals = exercise_values(batch, payoff, params)[:, -1]
    return _estimate([_block_moments(vals)], batch.seed)


# ---------------------------------------------------------------------------
# flow continuity

def _coupled_euler(params, starts, t, n_steps, n_paths, seed):
    """Full-truncation Euler paths from several starts driven by shared (W, B)."""
    dt = t / n_steps
    rbar = params.rho_bar
    out = []

    def run(b, nb):
        rng = block_rng(seed, STREAM_FLOW, b)
        xs = [np.full(nb, float(x)) for x, _ in starts]
        ys = [np.full(nb, float(y)) for _, y in starts]
        for _ in range(n_steps):
            dW = rng.standard_normal(nb) * math.sqrt(dt)
            dB = rng.standard_normal(nb) * math.sqrt(dt)
            for i in range(len(starts)):
                yp = np.maximum(ys[i], 0.0)
                sq = np.sqrt(yp)
                xs[i] = xs[i] + (params.x_drift - 0.5 * yp) * dt + sq * (params.rho * dW + rbar * dB)
                ys[i] = ys[i] + params.kappa * (params.theta - yp) * dt + params.sigma * sq * dW
        return [(x, np.maximum(y, 0.0)) for x, y in zip(xs, ys)]
    parts = _map_blocks(run, n_paths)
    for i in range(len(starts)):
        out.append((np.concatenate([p[i][0] for p in parts]), np.concatenate([p[i][1] for p in parts])))
    return out


def flow_bound_x(dx: float, dy: float, t: float) -> float:
    return abs(dx) + 0.5 * t * abs(dy) + math.sqrt(t * abs(dy))


def flow_continuity_probe(params: HestonParams, pairs: Sequence, t: float, n_paths: int, seed: int,
                          n_steps: Optional[int] = None) -> list:
    """E|Y'-Y| <= |y'-y| and E|X'-X| <= |x'-x| + t|y'-y|/2 + sqrt(t|y'-y|), each plus 3 SE.

    Exact CIR transitions cannot share Brownian increments between two
    starting points, so the coupled paths use full-truncation Euler with a
    fine step.
    """
    if n_steps is None:
        n_steps = max(50, int(math.ceil(1000 * t)))
    report = []
    for i, ((x, y), (x2, y2)) in enumerate(pairs):
        (X, Y), (X2, Y2) = _coupled_euler(params, [(x, y), (x2, y2)], t, n_steps, n_paths, seed + i)
        ay, ax = np.abs(Y2 - Y), np.abs(X2 - X)
        se_y = float(np.std(ay, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
        se_x = float(np.std(ax, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
        by = abs(y2 - y)
        bx = flow_bound_x(x2 - x, y2 - y, t)
        report.append({
            "start": [x, y], "start2": [x2, y2], "t": t,
            "mean_abs_dy": float(ay.mean()), "se_dy": se_y, "bound_dy": by,
            "mean_abs_dx": float(ax.mean()), "se_dx": se_x, "bound_dx": bx,
            "pass_y": bool(ay.mean() <= by + 3 * se_y + 1e-12),
            "pass_x": bool(ax.mean() <= bx + 3 * se_x + 1e-12),
        })
    return report

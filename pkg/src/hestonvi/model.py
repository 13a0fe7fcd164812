"""Heston parameters, shifted coordinates, payoffs and the weighted measure.

The engine works in the shifted log-price ``x = log S - cbar * t`` where
``cbar = r - delta - rho*kappa*theta/sigma``.  In these coordinates the
generator reads

    L = y/2 (d_xx + 2 rho sigma d_xy + sigma^2 d_yy)
        + (rho kappa theta / sigma - y/2) d_x + kappa (theta - y) d_y

and all function spaces are built on the measure
``m(dx, dy) = y**(beta-1) exp(-gamma |x| - mu y) dx dy``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammainc, gammaln


class ConfigError(ValueError):
    """Invalid user-supplied parameter.  ``field`` names the offender."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


RHO_LIMIT = 0.999


@dataclass(frozen=True)
class HestonParams:
    kappa: float
    theta: float
    sigma: float
    rho: float
    r: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        for name in ("kappa", "theta", "sigma"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ConfigError(name, f"must be > 0, got {val!r}")
        if not (np.isfinite(self.rho) and abs(self.rho) < RHO_LIMIT):
            # the one-factor limit |rho| = 1 is not supported
            raise ConfigError("rho", f"need |rho| < {RHO_LIMIT}, got {self.rho!r}")
        for name in ("r", "delta"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val >= 0):
                raise ConfigError(name, f"must be >= 0, got {val!r}")

    @property
    def beta(self) -> float:
        return 2.0 * self.kappa * self.theta / self.sigma**2

    @property
    def cbar(self) -> float:
        return drift_adjustment(self)

    @property
    def x_drift(self) -> float:
        """Constant part of the x-drift, rho*kappa*theta/sigma."""
        return self.rho * self.kappa * self.theta / self.sigma

    @property
    def rho_bar(self) -> float:
        return math.sqrt(1.0 - self.rho**2)

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "theta": self.theta, "sigma": self.sigma,
                "rho": self.rho, "r": self.r, "delta": self.delta}


def drift_adjustment(params: HestonParams) -> float:
    """The shift rate cbar = r - delta - rho kappa theta / sigma."""
    return params.r - params.delta - params.rho * params.kappa * params.theta / params.sigma


@dataclass(frozen=True)
class MeasureWeights:
    gamma: float
    mu: float

    def __post_init__(self):
        for name in ("gamma", "mu"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ConfigError(name, f"must be > 0, got {val!r}")

    def check_against(self, payoff: "Payoff") -> None:
        """Raise if psi would not be square integrable against m."""
        a, b = payoff.growth_exponents
        if not self.gamma > 2 * a:
            raise ConfigError("gamma", f"need gamma > 2a = {2 * a}, got {self.gamma}")
        if not self.mu > 2 * b:
            raise ConfigError("mu", f"need mu > 2b = {2 * b}, got {self.mu}")

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "mu": self.mu}


def default_weights(params: HestonParams, payoff: Optional["Payoff"] = None) -> MeasureWeights:
    """gamma = max(4, 2a+2), mu = min(2 kappa/sigma^2 - eps_L, 2b+2).

    eps_L is half the gap between 2 kappa/sigma^2 and 2L, which keeps the
    cap strictly above 2L whenever L < kappa/sigma^2.
    """
    a, b = payoff.growth_exponents if payoff is not None else (1.0, 0.0)
    L = payoff.L if payoff is not None else 0.0
    cap_base = 2.0 * params.kappa / params.sigma**2
    eps_L = 0.5 * (cap_base - 2.0 * L)
    gamma = max(4.0, 2.0 * a + 2.0)
    mu = min(cap_base - eps_L, 2.0 * b + 2.0)
    return MeasureWeights(gamma=gamma, mu=mu)


def _sgn(x):
    # sgn(0) = 0 so that the coefficients take the midpoint value on {x = 0}
    return np.sign(x)


def operator_coefficients(params: HestonParams, weights: MeasureWeights, x):
    """First-order coefficients (j, k) of the weighted form at log-price x."""
    s = _sgn(np.asarray(x, dtype=float))
    g, m = weights.gamma, weights.mu
    rho, sig = params.rho, params.sigma
    j = 0.5 * (1.0 - g * s - m * rho * sig)
    k = params.kappa - 0.5 * g * rho * sig * s - 0.5 * m * sig**2
    if np.ndim(j) == 0:
        return float(j), float(k)
    return j, k


def measure_density(params: HestonParams, weights: MeasureWeights, x, y):
    """y^(beta-1) exp(-gamma|x| - mu y); raises for y <= 0."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(y <= 0):
        raise ValueError("measure density is defined for y > 0 only")
    out = np.exp((params.beta - 1.0) * np.log(y) - weights.gamma * np.abs(x) - weights.mu * y)
    return float(out) if out.ndim == 0 else out


def measure_total_mass(params: HestonParams, weights: MeasureWeights) -> float:
    """Mass of R x (0, inf): 2 Gamma(beta) / (gamma mu^beta)."""
    b = params.beta
    return 2.0 * math.exp(gammaln(b) - b * math.log(weights.mu)) / weights.gamma


def x_mass(gamma: float, lo: float, hi: float) -> float:
    """Integral of exp(-gamma |x|) over [lo, hi]."""
    def prim(t):
        # antiderivative that is continuous through 0
        return np.sign(t) * (1.0 - math.exp(-gamma * abs(t))) / gamma
    return float(prim(hi) - prim(lo))


def y_mass(beta: float, mu: float, hi: float, power: int = 0) -> float:
    """Integral of y^(beta-1+power) exp(-mu y) over [0, hi]."""
    b = beta + power
    return math.exp(gammaln(b) - b * math.log(mu)) * float(gammainc(b, mu * hi))


def box_mass(params: HestonParams, weights: MeasureWeights, x_min: float, x_max: float,
             y_max: float, power: int = 0) -> float:
    """m-measure (times y^power) of the box [x_min, x_max] x [0, y_max]."""
    return x_mass(weights.gamma, x_min, x_max) * y_mass(params.beta, weights.mu, y_max, power)


PAYOFF_KINDS = ("put", "call", "zero", "custom")


@dataclass(frozen=True)
class Payoff:
    """Obstacle psi(t, x, y) in shifted coordinates.

    With ``discounted=True`` the factor exp(-r t) is absorbed into psi so
    that the American value is sup_tau E[psi(tau, X_tau, Y_tau)].  Custom
    payoffs supply ``func(t, x, y)`` and go through the same discounting.
    """

    kind: str = "put"
    strike: float = 100.0
    growth_exponents: tuple = (1.0, 0.0)
    L: float = 0.0
    discounted: bool = True
    func: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise ConfigError("payoff.kind", f"unknown kind {self.kind!r}")
        if self.kind in ("put", "call") and not self.strike > 0:
            raise ConfigError("payoff.strike", f"must be > 0, got {self.strike!r}")
        if self.kind == "custom" and self.func is None:
            raise ConfigError("payoff.func", "custom payoff needs a callable")
        if self.L < 0:
            raise ConfigError("payoff.L", f"must be >= 0, got {self.L!r}")

    @classmethod
    def put(cls, strike: float, **kw) -> "Payoff":
        return cls(kind="put", strike=strike, **kw)

    @classmethod
    def call(cls, strike: float, **kw) -> "Payoff":
        return cls(kind="call", strike=strike, **kw)

    @classmethod
    def zero(cls) -> "Payoff":
        return cls(kind="zero", strike=1.0, growth_exponents=(0.0, 0.0))

    @classmethod
    def custom(cls, func: Callable, growth_exponents=(1.0, 0.0), L=0.0,
               discounted=False, strike=1.0) -> "Payoff":
        return cls(kind="custom", strike=strike, growth_exponents=tuple(growth_exponents),
                   L=L, discounted=discounted, func=func)

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    def undiscounted(self, params: HestonParams, t, x, y=0.0):
        """Payoff before the exp(-r t) factor, in shifted coordinates."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "put":
            s = np.exp(x + params.cbar * t)
            out = np.maximum(self.strike - s, 0.0) + 0.0 * y
        elif self.kind == "call":
            s = np.exp(x + params.cbar * t)
            out = np.maximum(s - self.strike, 0.0) + 0.0 * y
        elif self.kind == "zero":
            out = np.zeros(np.broadcast(t, x, y).shape)
        else:
            out = np.asarray(self.func(t, x, y), dtype=float) * np.ones(np.broadcast(t, x, y).shape)
        return out

    def __call__(self, params: HestonParams, t, x, y=0.0):
        out = self.undiscounted(params, t, x, y)
        if self.discounted and params.r != 0.0:
            out = out * np.exp(-params.r * np.asarray(t, dtype=float))
        return out

    def spot_to_x(self, params: HestonParams, spot, t=0.0):
        return np.log(spot) - params.cbar * t

    def to_dict(self) -> dict:
        return {"kind": self.kind, "strike": self.strike,
                "growth_exponents": list(self.growth_exponents), "L": self.L,
                "discounted": self.discounted}


def generator_apply(params: HestonParams, fun: Callable, t, x, y, h: float = 1e-4):
    """(d/dt + L) fun at (t, x, y) by central differences (verification only)."""
    f = lambda dt, dx, dy: fun(t + dt, x + dx, y + dy)
    ft = (f(h, 0, 0) - f(-h, 0, 0)) / (2 * h)
    fx = (f(0, h, 0) - f(0, -h, 0)) / (2 * h)
    fy = (f(0, 0, h) - f(0, 0, -h)) / (2 * h)
    f0 = f(0, 0, 0)
    fxx = (f(0, h, 0) - 2 * f0 + f(0, -h, 0)) / h**2
    fyy = (f(0, 0, h) - 2 * f0 + f(0, 0, -h)) / h**2
    fxy = (f(0, h, h) - f(0, h, -h) - f(0, -h, h) + f(0, -h, -h)) / (4 * h**2)
    rho, sig, kap, th = params.rho, params.sigma, params.kappa, params.theta
    gen = (0.5 * y * (fxx + 2 * rho * sig * fxy + sig**2 * fyy)
           + (params.x_drift - 0.5 * y) * fx + kap * (th - y) * fy)
    return ft + gen


@dataclass(frozen=True)
class DominatingFunction:
    """Phi(t, x, y) = C_T (exp(x - rho kappa theta t / sigma) + exp(L y - kappa theta L t))."""

    C_T: float
    L: float = 0.0

    def __call__(self, params: HestonParams, t, x, y):
        t = np.asarray(t, dtype=float)
        a = np.exp(np.asarray(x, dtype=float) - params.x_drift * t)
        b = np.exp(self.L * np.asarray(y, dtype=float) - params.kappa * params.theta * self.L * t)
        return self.C_T * (a + b)

    def basis(self, params, t, x, y):
        return DominatingFunction(1.0, self.L)(params, t, x, y)

    @classmethod
    def fit(cls, payoff: Payoff, params: HestonParams, T: float, x_min: float, x_max: float,
            y_max: float, n: int = 81, pad: float = 1.1) -> "DominatingFunction":
        """Smallest C_T with Phi >= psi on a sampling grid of the box, padded by 10%."""
        if payoff.is_zero:
            return cls(0.0, payoff.L)
        tt, xx, yy = np.meshgrid(np.linspace(0.0, T, max(n // 4, 3)), np.linspace(x_min, x_max, n),
                                 np.linspace(0.0, y_max, max(n // 4, 3)), indexing="ij")
        base = cls(1.0, payoff.L)(params, tt, xx, yy)
        ratio = payoff(params, tt, xx, yy) / base
        return cls(pad * float(np.max(ratio)), payoff.L)

    def check_supersolution(self, params: HestonParams, points: np.ndarray, h: float = 1e-4) -> float:
        """Largest value of (d_t + L)Phi / Phi over the given (t, x, y) rows; should be <= 0."""
        if self.C_T == 0:
            return 0.0
        t, x, y = points.T
        fun = lambda tt, xx, yy: self(params, tt, xx, yy)
        return float(np.max(generator_apply(params, fun, t, x, y, h) / fun(t, x, y)))


@dataclass
class AssumptionReport:
    violations: list
    n_samples: int
    growth_constant: float
    derivative_constant: float
    max_domination_excess: float

    @property
    def ok(self) -> bool:
        return not self.violations


def check_assumptions(payoff: Payoff, weights: MeasureWeights, params: HestonParams,
                      box: Sequence[float], n_samples: int = 10_000, seed: int = 0,
                      dominating: Optional[DominatingFunction] = None) -> AssumptionReport:
    """Sample the payoff conditions on ``box = (T, x_min, x_max, y_max)``.

    Reports 0 <= psi <= Phi violations, the observed growth and derivative
    constants, and the structural integrability relations between (a, b, L)
    and (gamma, mu).  An empty violation list means consistent at the
    sampled resolution.
    """
    T, x_min, x_max, y_max = map(float, box)
    if not (T > 0 and x_min < x_max and y_max > 0):
        raise ValueError("box must satisfy T > 0, x_min < x_max, y_max > 0")
    a, b = payoff.growth_exponents
    L = payoff.L
    out = []
    if not weights.gamma > 2 * a:
        out.append(f"integrability: gamma={weights.gamma} must exceed 2a={2 * a}")
    if not weights.mu > 2 * b:
        out.append(f"integrability: mu={weights.mu} must exceed 2b={2 * b}")
    if not weights.gamma > 2.0:
        out.append(f"integrability: gamma={weights.gamma} must exceed 2 for the e^x part of Phi")
    if not weights.mu > 2 * L:
        out.append(f"integrability: mu={weights.mu} must exceed 2L={2 * L}")
    if not L < 2 * params.kappa / params.sigma**2:
        out.append(f"growth: L={L} must be below 2 kappa/sigma^2={2 * params.kappa / params.sigma**2}")

    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, T, n_samples)
    x = rng.uniform(x_min, x_max, n_samples)
    y = rng.uniform(0.0, y_max, n_samples)
    psi = payoff(params, t, x, y)
    if np.any(~np.isfinite(psi)):
        out.append("payoff: non-finite values sampled")
        psi = np.where(np.isfinite(psi), psi, 0.0)
    if np.min(psi) < 0:
        out.append(f"nonnegativity: min psi = {np.min(psi):.3g}")

    envelope = np.exp(x) + np.exp(L * y)
    growth_c = float(np.max(psi / envelope))

    if dominating is None:
        dominating = DominatingFunction.fit(payoff, params, T, x_min, x_max, y_max)
    phi = dominating(params, t, x, y)
    excess = psi - phi
    tol = 1e-12 * np.maximum(1.0, np.abs(phi))
    max_excess = float(np.max(excess))
    if np.any(excess > tol):
        out.append(f"domination: psi exceeds Phi by up to {max_excess:.3g}")

    h = 1e-6 * max(1.0, x_max - x_min)
    dpsi = (np.abs(payoff(params, t + h, x, y) - payoff(params, t - h, x, y))
            + np.abs(payoff(params, t, x + h, y) - payoff(params, t, x - h, y))
            + np.abs(payoff(params, t, x, y + h) - payoff(params, t, x, np.abs(y - h)))) / (2 * h)
    deriv_c = float(np.max(dpsi / np.exp(a * np.abs(x) + b * y)))
    if not np.isfinite(deriv_c):
        out.append("derivative growth: non-finite difference quotients")

    return AssumptionReport(out, n_samples, growth_c, deriv_c, max_excess)

"""log I_nu(x) for nu > -1, x >= 0, evaluated entirely in log space."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, logsumexp

SERIES_MAX_X = 30.0
# with nu^2 > x the series (positive terms, no cancellation) stays in use up to here
SERIES_MAX_X_LARGE_NU = 500.0


def _log_series(nu: float, x: np.ndarray) -> np.ndarray:
    # terms peak near k = x/2; keep a dozen standard deviations past the peak
    n_terms = int(0.5 * np.max(x) + 12 * np.sqrt(np.max(x)) + 60)
    k = np.arange(n_terms)[:, None]
    lx = np.log(0.5 * x)[None, :]
    terms = (2 * k + nu) * lx - gammaln(k + 1) - gammaln(k + nu + 1)
    return logsumexp(terms, axis=0)


def _log_hankel(nu: float, x: np.ndarray) -> np.ndarray:
    # I_nu(x) ~ e^x / sqrt(2 pi x) * sum_k (-1)^k a_k(nu) / x^k
    mu4 = 4.0 * nu * nu
    total = np.ones_like(x)
    term = np.ones_like(x)
    last = np.full_like(x, np.inf)
    for k in range(1, 30):
        term = -term * (mu4 - (2 * k - 1) ** 2) / (k * 8.0 * x)
        grow = np.abs(term) > last
        term = np.where(grow, 0.0, term)
        last = np.where(grow, 0.0, np.abs(term))
        total = total + term
        if np.all(np.abs(term) < 1e-17 * np.abs(total)):
            break
    return x - 0.5 * np.log(2 * math.pi * x) + np.log(total)


def _log_debye(nu: float, x: np.ndarray) -> np.ndarray:
    z = x / nu
    sq = np.sqrt(1.0 + z * z)
    p = 1.0 / sq
    eta = sq + np.log(z / (1.0 + sq))
    u1 = (3 * p - 5 * p**3) / 24.0
    u2 = (81 * p**2 - 462 * p**4 + 385 * p**6) / 1152.0
    u3 = (30375 * p**3 - 369603 * p**5 + 765765 * p**7 - 425425 * p**9) / 414720.0
    u4 = (4465125 * p**4 - 94121676 * p**6 + 349922430 * p**8 - 446185740 * p**10
          + 185910725 * p**12) / 39813120.0
    s = 1.0 + u1 / nu + u2 / nu**2 + u3 / nu**3 + u4 / nu**4
    return nu * eta - 0.5 * np.log(2 * math.pi * nu) - 0.5 * np.log(sq) + np.log(s)


def log_bessel_i(nu: float, x):
    """Natural log of the modified Bessel function I_nu(x).

    Power series up to x = 30, beyond that the large-argument expansion when
    nu^2 <= x.  For nu^2 > x the series is kept up to x = 500 and the uniform
    (Debye) expansion, then accurate to ~1/nu^5, takes over.
    """
    nu = float(nu)
    if not nu > -1:
        raise ValueError("nu must exceed -1")
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(xa < 0):
        raise ValueError("x must be nonnegative")
    out = np.empty_like(xa)
    zero = xa == 0
    if nu == 0:
        out[zero] = 0.0
    else:
        out[zero] = -np.inf if nu > 0 else np.inf
    big = xa > SERIES_MAX_X
    hank = big & (nu * nu <= xa)
    small = (~zero) & ~hank & (xa <= SERIES_MAX_X_LARGE_NU)
    if small.any():
        out[small] = _log_series(nu, xa[small])
    if hank.any():
        out[hank] = _log_hankel(nu, xa[hank])
    deb = big & ~hank & ~small
    if deb.any():
        out[deb] = _log_debye(nu, xa[deb])
    return out if np.ndim(x) else float(out[0])

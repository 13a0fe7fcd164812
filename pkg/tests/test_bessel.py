import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ive

from hestonvi.bessel import log_bessel_i


@given(nu=st.floats(-0.99, 12.0, allow_subnormal=False), x=st.floats(1e-4, 5e3))
@settings(max_examples=300)
def test_matches_scaled_scipy(nu, x):
    ref = math.log(ive(nu, x)) + x
    assert log_bessel_i(nu, x) == pytest.approx(ref, rel=1e-10, abs=1e-10)


@pytest.mark.parametrize("nu", [-0.5, 0.25, 0.777, 3.0, 40.0])
def test_each_regime(nu):
    x = np.array([0.01, 1.0, 29.9, 30.1, 80.0, 1e3, 1e5])
    ref = np.log(ive(nu, x)) + x
    assert np.allclose(log_bessel_i(nu, x), ref, rtol=1e-10, atol=1e-10)


def test_beyond_float_range():
    # I_1(1e6) overflows a double; its log does not
    v = log_bessel_i(1.0, 1e6)
    assert v == pytest.approx(1e6 - 0.5 * math.log(2 * math.pi * 1e6) + math.log1p(-3 / 8e6), rel=1e-14)


def test_zero_argument():
    assert log_bessel_i(0.0, 0.0) == 0.0
    assert log_bessel_i(1.5, 0.0) == -math.inf
    assert log_bessel_i(-0.5, 0.0) == math.inf


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        log_bessel_i(-1.0, 1.0)
    with pytest.raises(ValueError):
        log_bessel_i(0.5, -1.0)

"""Closed-form oracle values, cross-checked by quadrature and Monte Carlo.

The literals frozen here were produced by the formulas themselves and then
verified against independent routes (scipy quadrature, large-sample MC,
finer lattices).  Downstream solver tests treat them as ground truth.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from rmfbsde import oracle

# Frozen reference values.
E_XI = 0.5160585509617133
THRESHOLD = 0.3262112196221739
VIOLATION_PROB = 0.43210137765871925
PUT_2000 = 6.0899899525522185


def test_truncated_second_moment_closed_form_frozen():
    assert oracle.gaussian_truncated_second_moment(1.0) == pytest.approx(E_XI, abs=1e-15)


def test_truncated_second_moment_against_quadrature():
    # Independent route: integrate min(z^2, 1) against the normal density.
    def integrand(z):
        return min(z * z, 1.0) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)

    # The integrand has kinks at +-1; telling quad about them restores
    # machine-precision error estimates.
    val, err = quad(integrand, -10.0, 10.0, points=[-1.0, 1.0], limit=200)
    assert err < 1e-9  # quad's own (conservative) estimate
    assert abs(oracle.gaussian_truncated_second_moment(1.0) - val) < 1e-10


def test_truncated_second_moment_caps():
    assert oracle.gaussian_truncated_second_moment(0.0) == 0.0
    assert oracle.gaussian_truncated_second_moment(math.inf) == 1.0
    # Large finite cap approaches E[Z^2] = 1 from below.
    assert oracle.gaussian_truncated_second_moment(100.0) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        oracle.gaussian_truncated_second_moment(-0.5)


@given(st.floats(min_value=0.01, max_value=30.0))
def test_truncated_second_moment_monotone_in_cap(cap):
    lo = oracle.gaussian_truncated_second_moment(cap)
    hi = oracle.gaussian_truncated_second_moment(cap * 1.5)
    assert 0.0 < lo <= hi <= 1.0


def test_constants_bundle():
    c = oracle.example31_constants()
    assert c.horizon == 2.0
    assert c.e_xi == pytest.approx(E_XI, abs=1e-15)
    assert c.threshold == pytest.approx(THRESHOLD, abs=1e-15)
    assert c.threshold == pytest.approx(c.e_xi * (1.0 - math.exp(-1.0)), abs=1e-15)
    assert c.violation_probability == pytest.approx(VIOLATION_PROB, abs=1e-15)


def test_violation_probability_frozen_and_edges():
    assert oracle.violation_probability() == pytest.approx(VIOLATION_PROB, abs=1e-15)
    assert oracle.violation_probability(0.0) == 0.0
    # threshold 1 reduces to P(|Z| < 1)
    assert oracle.violation_probability(1.0) == pytest.approx(0.6826894921370859, abs=1e-12)
    with pytest.raises(ValueError):
        oracle.violation_probability(-1.0)


def test_violation_probability_against_monte_carlo():
    rng = np.random.default_rng(20260818)
    z = rng.standard_normal(10_000_000)
    xi = np.minimum(z * z, 1.0)
    estimate = float(np.mean(xi < THRESHOLD))
    assert abs(estimate - VIOLATION_PROB) < 1e-3
    # and the capped second moment itself
    assert abs(float(xi.mean()) - E_XI) < 1e-3


def test_expected_y_curve():
    assert oracle.expected_y(2.0) == pytest.approx(E_XI, abs=1e-15)
    assert oracle.expected_y(0.0) == pytest.approx(E_XI * math.exp(-2.0), abs=1e-15)
    with pytest.raises(ValueError):
        oracle.expected_y(-0.1)
    with pytest.raises(ValueError):
        oracle.expected_y(2.1)


def test_expected_y_integral_identity():
    # m(t) = e_xi - int_t^2 m(s) ds, checked by quadrature at several times.
    for t in (0.0, 0.7, 1.0, 1.9):
        integral, err = quad(oracle.expected_y, t, 2.0)
        assert err < 1e-10
        assert abs(oracle.expected_y(t) - (E_XI - integral)) < 1e-8


def test_series_remainder_bound_values():
    # Depth-10 bound at t=0 (tau=2): frozen and below the coarse ratio bound
    # 2^11/11! * 1/(1 - 2/12).
    val = oracle.series_mean_remainder_bound(0.0, 10, 1.0)
    assert val == pytest.approx(6.138993594273501e-05, rel=1e-9)
    coarse = 2.0**11 / math.factorial(11) / (1.0 - 2.0 / 12.0)
    assert val <= coarse
    assert oracle.series_mean_remainder_bound(2.0, 0, 5.0) == 0.0
    # scales linearly in the growth constant
    assert oracle.series_mean_remainder_bound(0.5, 3, 4.0) == pytest.approx(
        4.0 * oracle.series_mean_remainder_bound(0.5, 3, 1.0), rel=1e-12
    )


@settings(max_examples=60)
@given(
    t=st.floats(min_value=0.0, max_value=2.0),
    depth=st.integers(min_value=0, max_value=25),
)
def test_series_remainder_bound_monotone(t, depth):
    c = 3.0
    here = oracle.series_mean_remainder_bound(t, depth, c)
    deeper = oracle.series_mean_remainder_bound(t, depth + 1, c)
    later = oracle.series_mean_remainder_bound(min(t + 0.25, 2.0), depth, c)
    # 1e-14 slack: exp(tau) - partial bottoms out at roundoff ~eps*e^2.
    assert here >= deeper - 1e-14
    assert deeper >= 0.0
    assert here >= later - 1e-14


def test_series_remainder_bound_vanishes_with_depth():
    # Bottoms out at the double-precision floor eps * e^2 ~ 1.6e-15.
    assert oracle.series_mean_remainder_bound(0.0, 60, 1.0) < 1e-13


def test_binomial_put_frozen_and_converged():
    v2000 = oracle.binomial_american_put(100.0, 0.05, 0.2, 100.0, 1.0, steps=2000)
    v4000 = oracle.binomial_american_put(100.0, 0.05, 0.2, 100.0, 1.0, steps=4000)
    assert v2000 == pytest.approx(PUT_2000, abs=1e-12)
    assert abs(v2000 - v4000) < 1e-3


def test_binomial_put_edges():
    # Zero volatility, deep in the money: immediate exercise is optimal.
    v = oracle.binomial_american_put(100.0, 0.05, 0.0, 50.0, 1.0, steps=500)
    assert v == pytest.approx(50.0, abs=1e-12)
    assert oracle.binomial_american_put(0.0, 0.05, 0.2, 100.0, 1.0, steps=500) == 0.0
    with pytest.raises(ValueError):
        oracle.binomial_american_put(100.0, 0.05, 0.2, 100.0, 1.0, steps=100)
    with pytest.raises(ValueError):
        oracle.binomial_american_put(100.0, 0.05, 0.2, -100.0, 1.0)


def test_binomial_put_dominates_intrinsic_and_increases_with_strike():
    prev = 0.0
    for strike in (80.0, 90.0, 100.0, 110.0, 120.0):
        v = oracle.binomial_american_put(strike, 0.05, 0.2, 100.0, 1.0, steps=500)
        assert v >= max(strike - 100.0, 0.0) - 1e-12
        assert v > prev
        prev = v

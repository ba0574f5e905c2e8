"""Closed-form reference values used to pin solver output in tests.

Everything in here is independent of the Monte Carlo machinery: plain
formulas, a lattice price, and elementary tail bounds.  Solvers must never
import this module; tests compare against it from the outside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Example31Constants",
    "example31_constants",
    "gaussian_truncated_second_moment",
    "expected_y",
    "violation_probability",
    "series_mean_remainder_bound",
    "binomial_american_put",
]


def _phi(x: float) -> float:
    """Standard normal density."""
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _Phi(x: float) -> float:
    """Standard normal CDF via scipy.special.ndtr (abs error < 1e-15)."""
    return float(ndtr(x))


def gaussian_truncated_second_moment(cap: float = 1.0) -> float:
    """E[min(Z^2, cap)] for Z standard normal.

    With a = sqrt(cap) the closed form is

        (2*Phi(a) - 1) - 2*a*phi(a) + 2*cap*(1 - Phi(a)),

    obtained by integrating z^2 phi(z) over |z| <= a by parts and adding
    cap * P(|Z| > a).

    Parameters
    ----------
    cap : float
        Truncation level for Z^2, must be nonnegative.  cap=0 gives 0;
        cap=inf recovers E[Z^2] = 1.

    Returns
    -------
    float
    """
    if not cap >= 0.0:
        raise ValueError(f"cap must be nonnegative, got {cap}")
    if cap == 0.0:
        return 0.0
    if math.isinf(cap):
        return 1.0
    a = math.sqrt(cap)
    inner = (2.0 * _Phi(a) - 1.0) - 2.0 * a * _phi(a)
    return inner + 2.0 * cap * (1.0 - _Phi(a))


def violation_probability(threshold: float | None = None) -> float:
    """P{Z^2 < threshold} = 2*Phi(sqrt(threshold)) - 1 for Z standard normal.

    Called without arguments it evaluates the comparison-failure probability
    of the two-horizon example: the probability that the capped square of a
    standard normal falls below E[Z^2 /\\ 1] * (1 - e^{-1}).  The threshold
    is below 1, so the cap in Z^2 /\\ 1 is immaterial there.

    Parameters
    ----------
    threshold : float, optional
        Nonnegative level.  Defaults to the example's own threshold.

    Returns
    -------
    float
    """
    if threshold is None:
        threshold = example31_constants().threshold
    if not threshold >= 0.0:
        raise ValueError(f"threshold must be nonnegative, got {threshold}")
    return 2.0 * _Phi(math.sqrt(threshold)) - 1.0


@dataclass(frozen=True)
class Example31Constants:
    """Bundle of the closed-form constants for the two-horizon example.

    Attributes
    ----------
    horizon : float
        Terminal time T = 2.
    e_xi : float
        E[|W_1|^2 /\\ 1] = 1 - 2*phi(1).
    threshold : float
        e_xi * (1 - e^{-1}); the level whose undershoot by |W_1|^2 makes
        the solution negative at t = 1.
    violation_probability : float
        2*Phi(sqrt(threshold)) - 1.
    """

    horizon: float = 2.0
    e_xi: float = field(default=0.0)
    threshold: float = field(default=0.0)
    violation_probability: float = field(default=0.0)

    def __post_init__(self) -> None:
        assert 0.0 < self.e_xi < 1.0, f"e_xi out of (0,1): {self.e_xi}"
        assert 0.0 < self.threshold < self.e_xi, "threshold must sit below e_xi"
        assert 0.0 < self.violation_probability < 1.0, (
            f"violation probability out of (0,1): {self.violation_probability}"
        )


def example31_constants() -> Example31Constants:
    """Compute the constants of the two-horizon example from closed forms."""
    e_xi = gaussian_truncated_second_moment(1.0)
    threshold = e_xi * (1.0 - math.exp(-1.0))
    return Example31Constants(
        horizon=2.0,
        e_xi=e_xi,
        threshold=threshold,
        violation_probability=2.0 * _Phi(math.sqrt(threshold)) - 1.0,
    )


def expected_y(t: float) -> float:
    """Mean curve E[Y_t] = E[|W_1|^2 /\\ 1] * e^{-(2-t)} of the example.

    Satisfies the integral identity m(t) = e_xi - int_t^2 m(s) ds.

    Parameters
    ----------
    t : float
        Time in [0, 2].

    Returns
    -------
    float
    """
    c = example31_constants()
    if not 0.0 <= t <= c.horizon:
        raise ValueError(f"t must lie in [0, {c.horizon}], got {t}")
    return c.e_xi * math.exp(-(c.horizon - t))


def series_mean_remainder_bound(t: float, depth: int, growth_constant: float) -> float:
    """Tail bound C * sum_{i > depth} (T-t)^i / i! with T = 2.

    Bounds the part of the alternating mean series beyond `depth` iterated
    integrals when the data is bounded by `growth_constant`.  Monotone
    decreasing in both `depth` and `t`, zero at t = T.

    Parameters
    ----------
    t : float
        Time in [0, 2].
    depth : int
        Number of leading terms dropped from the bound, >= 0.
    growth_constant : float
        Uniform bound C on the data, >= 0.

    Returns
    -------
    float
    """
    horizon = 2.0
    if not 0.0 <= t <= horizon:
        raise ValueError(f"t must lie in [0, {horizon}], got {t}")
    if depth < 0:
        raise ValueError(f"depth must be nonnegative, got {depth}")
    if growth_constant < 0.0:
        raise ValueError(f"growth_constant must be nonnegative, got {growth_constant}")
    tau = horizon - t
    # exp(tau) minus its Taylor polynomial; the partial sum is evaluated in
    # increasing-term order, fine at double precision for tau <= 2.
    term = 1.0
    partial = 1.0
    for i in range(1, depth + 1):
        term *= tau / i
        partial += term
    tail = math.exp(tau) - partial
    return growth_constant * max(tail, 0.0)


def binomial_american_put(
    strike: float,
    rate: float,
    vol: float,
    spot: float,
    maturity: float,
    steps: int = 2000,
) -> float:
    """American put value on a Cox-Ross-Rubinstein lattice with early exercise.

    Parameters
    ----------
    strike, rate, vol, spot, maturity : float
        Usual Black-Scholes parameters; strike, spot, maturity positive,
        vol and rate nonnegative.
    steps : int
        Number of lattice steps, at least 500 for quotable accuracy.

    Returns
    -------
    float
        Option value at (0, spot).
    """
    if strike < 0.0 or spot <= 0.0 or maturity <= 0.0:
        raise ValueError(
            f"need strike >= 0, spot > 0, maturity > 0; got {strike}, {spot}, {maturity}"
        )
    if vol < 0.0:
        raise ValueError(f"vol must be nonnegative, got {vol}")
    if steps < 500:
        raise ValueError(f"steps must be at least 500, got {steps}")
    if strike == 0.0:
        return 0.0

    dt = maturity / steps
    if vol == 0.0:
        # Deterministic forward; exercising immediately dominates whenever
        # the discounted drift cannot restore time value.
        values = [
            max(strike - spot * math.exp(rate * dt * i), 0.0) * math.exp(-rate * dt * i)
            for i in range(steps + 1)
        ]
        return max(values)

    u = math.exp(vol * math.sqrt(dt))
    d = 1.0 / u
    disc = math.exp(-rate * dt)
    p = (math.exp(rate * dt) - d) / (u - d)
    if not 0.0 < p < 1.0:
        raise ValueError(
            f"lattice probability {p:.6f} outside (0,1); refine steps or lower rate*dt"
        )

    # Terminal prices spot * u^j * d^(steps-j), j = 0..steps.
    j = np.arange(steps + 1)
    prices = spot * np.exp((2.0 * j - steps) * vol * math.sqrt(dt))
    values = np.maximum(strike - prices, 0.0)
    for i in range(steps - 1, -1, -1):
        j = np.arange(i + 1)
        prices = spot * np.exp((2.0 * j - i) * vol * math.sqrt(dt))
        cont = disc * (p * values[1 : i + 2] + (1.0 - p) * values[: i + 1])
        values = np.maximum(cont, strike - prices)
    return float(values[0])

"""Penalized solves: ODE oracle agreement and the convergence ladder."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmfbsde.basis import RegressionBasis
from rmfbsde.forward import simulate_law_ensemble, state_atoms
from rmfbsde.meanfield import scalar_atoms
from rmfbsde.penalization import (
    penalization_sweep,
    ramp_penalty_ode_value,
    solve_penalized,
)
from rmfbsde.problems import (
    ClassicalRbsdeProblem,
    benchmark_reflected_mf_problem,
    deterministic_obstacle_problem,
)
from rmfbsde.solver import ConvergenceFailureError, solve_bsde, solve_reflected
from rmfbsde.stochastic import RngSeed, make_grid, sample_brownian


def _ramp_inputs(steps: int, particles: int = 64, seed: int = 70):
    p = deterministic_obstacle_problem()
    grid = make_grid(1.0, steps)
    noise = sample_brownian(grid, particles, 1, RngSeed(seed))
    X = simulate_law_ensemble(p, grid, noise)
    return p, grid, X, noise


@given(n=st.integers(1, 512), t=st.floats(0.0, 1.0))
@settings(max_examples=200, deadline=None)
def test_ramp_ode_gap_lies_between_zero_and_one_over_n(n, t):
    # the penalized value sits below the ramp by the gap (1 - e^{-ns})/n,
    # which is pinched between 0 and 1/n
    gap = (1.0 - t) - ramp_penalty_ode_value(n, t)
    assert -1e-15 <= gap <= 1.0 / n + 1e-15


def test_ramp_ode_value_endpoints_and_monotonicity():
    assert ramp_penalty_ode_value(17, 1.0) == 0.0
    values = [ramp_penalty_ode_value(n, 0.25) for n in (1, 4, 16, 64, 256)]
    assert all(b > a for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError, match="penalty level"):
        ramp_penalty_ode_value(0, 0.5)
    with pytest.raises(ValueError, match="beyond horizon"):
        ramp_penalty_ode_value(4, 1.5)


def test_penalized_ramp_matches_ode_oracle():
    # dt = 1e-3; both the explicit (n dt <= 1/2) and implicit branches
    # reproduce the closed-form penalized ODE to scheme accuracy
    p, grid, X, noise = _ramp_inputs(1000)
    basis = RegressionBasis(degree=1)
    for n in (4, 256, 1024):  # a = n dt: 0.004 and 0.256 explicit, 1.024 implicit
        sol = solve_penalized(p, n, X, noise, basis)
        oracle = np.array([ramp_penalty_ode_value(n, t) for t in grid.nodes])
        assert np.abs(sol.Y - oracle).max() < 5e-4
        assert np.abs(sol.Y - (1.0 - grid.nodes)).max() <= 2.0 / n + 5 * grid.dt
        k_oracle = 1.0 - (1.0 - math.exp(-n)) / n
        assert abs(sol.K[:, -1].mean() - k_oracle) < 2e-3
    # no projection: the penalized value lives strictly below the obstacle
    sol = solve_penalized(p, 16, X, noise, basis)
    below = (sol.Y[:, :-1] < (1.0 - grid.nodes[:-1]) - 1e-12).mean()
    assert below > 0.99


def test_penalized_rejects_bad_level_and_missing_obstacle():
    p, grid, X, noise = _ramp_inputs(20)
    with pytest.raises(ValueError, match="penalty level"):
        solve_penalized(p, 0, X, noise, RegressionBasis(degree=1))
    free = ClassicalRbsdeProblem(
        name="free",
        state_dim=1,
        noise_dim=1,
        horizon=1.0,
        x0=[0.0],
        sigma=lambda t, x: np.array([[1.0]]),
        terminal=lambda x: np.tanh(x[:, 0]),
    )
    Xf = simulate_law_ensemble(free, grid, noise)
    with pytest.raises(ValueError, match="no obstacle"):
        solve_penalized(free, 4, Xf, noise, RegressionBasis(degree=1))


def test_nonbinding_obstacle_matches_plain_solve_for_every_level():
    # h = -1e6 never binds: the penalty is exactly zero at both the
    # explicit (n=1) and implicit (n=256, n dt = 12.8) branches
    p = ClassicalRbsdeProblem(
        name="free-with-floor",
        state_dim=1,
        noise_dim=1,
        horizon=1.0,
        x0=[0.0],
        sigma=lambda t, x: np.array([[1.0]]),
        terminal=lambda x: np.tanh(x[:, 0]) ** 2,
        obstacle=lambda t, x: np.full(x.shape[0], -1e6),
    )
    grid = make_grid(1.0, 20)
    noise = sample_brownian(grid, 3000, 1, RngSeed(73))
    X = simulate_law_ensemble(p, grid, noise)
    basis = RegressionBasis(degree=3)
    plain = solve_bsde(p, X, noise, basis, ignore_obstacle=True)
    for n in (1, 256):
        sol = solve_penalized(p, n, X, noise, basis)
        np.testing.assert_array_equal(sol.Y, plain.Y)
        assert np.all(sol.K == 0.0)


def test_sweep_on_deterministic_ramp_hits_the_one_over_n_law():
    p, grid, X, noise = _ramp_inputs(1000)
    rep = penalization_sweep(p, X, noise, RegressionBasis(degree=1))
    assert rep.levels == (1, 4, 16, 64, 256)
    assert np.all(np.diff(rep.distance) < 0.0)
    assert np.all(np.diff(rep.k_distance) < 0.0)
    assert np.all(rep.monotonicity_violations == 0.0)
    # the gap profile is (1 - e^{-n(1-t)})/n, maximal at t = 0
    assert abs(rep.distance[-1] - 1.0 / 256.0) < 2e-4
    assert rep.distance[-1] < 1e-2
    assert abs(rep.reference_k_mean - 1.0) < 1e-5


def test_sweep_benchmark_distances_and_monotonicity():
    p = benchmark_reflected_mf_problem()
    grid = make_grid(1.0, 50)
    noise = sample_brownian(grid, 6000, 1, RngSeed(71))
    X = simulate_law_ensemble(p, grid, noise)
    # piecewise-linear basis: the penalized solutions carry a kink at the
    # contact boundary that polynomial fits overshoot
    rep = penalization_sweep(p, X, noise, RegressionBasis("piecewise_linear", bins=20))
    assert np.all(np.diff(rep.distance) < 0.0)
    assert rep.distance[-1] <= 5e-2
    assert np.all(rep.monotonicity_violations <= 0.01)
    assert np.all(np.diff(rep.k_distance) < 0.0)
    rows = rep.rows()
    assert len(rows) == len(rep.levels) * len(rep.probe_times)
    assert math.isnan(rows[0]["monotonicity_violations"])
    assert rows[-1]["n"] == 256
    assert str(rep).count("n= 256") == 1


def test_sweep_input_validation():
    p, grid, X, noise = _ramp_inputs(20)
    basis = RegressionBasis(degree=1)
    with pytest.raises(ValueError, match="strictly increasing"):
        penalization_sweep(p, X, noise, basis, levels=(4, 4))
    with pytest.raises(ValueError, match="strictly increasing"):
        penalization_sweep(p, X, noise, basis, levels=(16, 4))
    other_noise = sample_brownian(grid, 32, 1, RngSeed(74))
    other_X = simulate_law_ensemble(p, grid, other_noise)
    ref = solve_reflected(p, other_X, other_noise, basis)
    with pytest.raises(ValueError, match="different ensemble"):
        penalization_sweep(p, X, noise, basis, reference=ref)


def test_sweep_annotates_failures_with_their_origin():
    base = benchmark_reflected_mf_problem()
    hot = dataclasses.replace(
        base,
        driver_g=lambda t, y, z, yt: -y + 6.0 * np.tanh(yt),
        driver_g_atoms=lambda t, x, y, z, atoms, w: -y + 6.0 * float(np.tanh(atoms["ytilde"]) @ w),
    )
    grid = make_grid(1.0, 20)
    noise = sample_brownian(grid, 1500, 1, RngSeed(75))
    X = simulate_law_ensemble(hot, grid, noise)
    basis = RegressionBasis(degree=2)
    with pytest.raises(ConvergenceFailureError, match="reflected reference"):
        penalization_sweep(hot, X, noise, basis, levels=(1, 4), max_sweeps=3)
    # with a frozen-coupling reference supplied, the failure surfaces at
    # the first penalty level instead
    ya, yw = scalar_atoms(np.zeros(X.particles), 8)
    ext = {i: ({"ytilde": ya}, yw) for i in range(grid.steps)}
    xa, xw = state_atoms(X.terminal_states, 8)
    ext[grid.steps] = ({"xtilde": xa}, xw)
    ref = solve_reflected(hot, X, noise, basis, external_atoms=ext)
    with pytest.raises(ConvergenceFailureError, match="penalty level n=1"):
        penalization_sweep(hot, X, noise, basis, levels=(1, 4), max_sweeps=3, reference=ref)

"""Interacting-copy system: exact decoupling, oracle curves, convergence."""

import dataclasses

import numpy as np
import pytest

from rmfbsde.basis import RegressionBasis
from rmfbsde.forward import simulate_law_ensemble
from rmfbsde.oracle import example31_constants, expected_y
from rmfbsde.particles import (
    comparison_counterexample,
    convergence_study,
    default_sub_ensemble,
    solve_rbsde_n,
)
from rmfbsde.problems import (
    american_put_problem,
    benchmark_reflected_mf_problem,
    example31_problem,
)
from rmfbsde.solver import check_reflection_invariants, solve_bsde, solve_reflected
from rmfbsde.stochastic import RngSeed, make_grid, sample_brownian

POLY = RegressionBasis("polynomial", degree=3)
PW = RegressionBasis("piecewise_linear", bins=10)


@pytest.fixture(scope="module")
def put_particles():
    grid = make_grid(1.0, 25)
    sol = solve_rbsde_n(american_put_problem(), 2, 1500, grid, RngSeed(404), POLY)
    return grid, sol


@pytest.fixture(scope="module")
def example31_particles():
    grid = make_grid(2.0, 100)
    sol = solve_rbsde_n(example31_problem(), 1, 20_000, grid, RngSeed(31), PW, keep_z=False)
    return grid, sol


# ---------------------------------------------------------------- guards


def test_rejects_zero_interaction():
    with pytest.raises(ValueError, match="N must be >= 1"):
        solve_rbsde_n(american_put_problem(), 0, 500, make_grid(1.0, 5), RngSeed(1), POLY)


def test_rejects_unbounded_coefficients():
    loose = dataclasses.replace(example31_problem(), bounded_coefficients=False)
    with pytest.raises(ValueError, match="bounded"):
        solve_rbsde_n(loose, 1, 500, make_grid(2.0, 5), RngSeed(1), PW)


def test_rejects_driver_reading_mean_field_z():
    zt = dataclasses.replace(example31_problem(), driver_uses_ztilde=True)
    with pytest.raises(ValueError, match="z-slot"):
        solve_rbsde_n(zt, 1, 500, make_grid(2.0, 5), RngSeed(1), PW)


def test_rejects_problem_without_obstacle():
    free = dataclasses.replace(
        benchmark_reflected_mf_problem(), obstacle_h=None, has_obstacle=False
    )
    with pytest.raises(ValueError, match="obstacle"):
        solve_rbsde_n(free, 2, 500, make_grid(1.0, 5), RngSeed(1), POLY)


def test_cross_and_base_hooks_must_pair():
    with pytest.raises(ValueError, match="supplied together"):
        dataclasses.replace(example31_problem(), driver_base=None)
    with pytest.raises(ValueError, match="supplied together"):
        dataclasses.replace(benchmark_reflected_mf_problem(), terminal_cross=None)


def test_inconsistent_hooks_are_caught_at_runtime():
    # the solver spot-checks the declared split against the pairwise
    # average on a particle slice; a biased hook must not pass silently
    bench = benchmark_reflected_mf_problem()
    lying_driver = dataclasses.replace(bench, driver_cross=lambda t, x, y: np.tanh(y) * 1.01)
    with pytest.raises(RuntimeError, match="pairwise driver"):
        solve_rbsde_n(lying_driver, 4, 300, make_grid(1.0, 6), RngSeed(5), POLY)
    lying_terminal = dataclasses.replace(bench, terminal_cross=lambda x: np.tanh(x[:, 0]) * 1.01)
    with pytest.raises(RuntimeError, match="pairwise terminal"):
        solve_rbsde_n(lying_terminal, 4, 300, make_grid(1.0, 6), RngSeed(5), POLY)


def test_default_sub_ensemble_budget():
    assert default_sub_ensemble(1) == 5000
    assert default_sub_ensemble(9) == 1000
    assert default_sub_ensemble(99) == 500  # floored, not 100


# ------------------------------------------------- decoupled exactness


def test_decoupled_universes_match_classical_solver_exactly(put_particles):
    # no mean-field term: each universe must reproduce the classical
    # reflected solve on its own sub-stream bit for bit, not just closely
    grid, sol = put_particles
    prob = american_put_problem()
    for j in range(3):
        noise = sample_brownian(grid, 1500, 1, RngSeed(404).child(j))
        ens = simulate_law_ensemble(prob, grid, noise)
        ref = solve_reflected(prob, ens, noise, POLY)
        assert np.array_equal(sol.Y[j], ref.Y)
        assert np.array_equal(sol.Z[j], ref.Z)
        assert np.array_equal(sol.K[j], ref.K)


def test_universe_view_passes_classical_invariants(put_particles):
    _, sol = put_particles
    view = sol.universe_solution(0)
    assert view.diagnostics.mode == "reflected"
    rep = check_reflection_invariants(view, sol.ensembles[0])
    assert rep.passed, str(rep)
    with pytest.raises(ValueError, match="universe index"):
        sol.universe_solution(3)


def test_z_not_kept_blocks_universe_views(example31_particles):
    _, sol = example31_particles
    assert sol.Z is None
    with pytest.raises(ValueError, match="keep_z=True"):
        sol.universe_solution(0)


def test_particle_invariant_report(put_particles):
    _, sol = put_particles
    rep = sol.check_invariants()
    assert rep.passed, str(rep)
    names = str(rep)
    assert "K starts at zero" in names
    assert "universes exchangeable" in names


# --------------------------------------------- separable coupling hooks


def test_separable_hooks_match_pairwise_roll():
    # the all-minus-self average must agree with the O(N^2) pairwise sum
    # to numerical cancellation error, universe by universe
    bench = benchmark_reflected_mf_problem()
    stripped = dataclasses.replace(
        bench, driver_cross=None, driver_base=None, terminal_cross=None, terminal_base=None
    )
    grid = make_grid(1.0, 10)
    fast = solve_rbsde_n(bench, 4, 400, grid, RngSeed(12), POLY)
    slow = solve_rbsde_n(stripped, 4, 400, grid, RngSeed(12), POLY)
    assert np.allclose(fast.Y, slow.Y, atol=1e-9)
    assert np.allclose(fast.K, slow.K, atol=1e-9)


# ------------------------------------------------ oracle curve, N = 1


def test_example31_mean_curve_tracks_oracle(example31_particles):
    grid, sol = example31_particles
    pooled = sol.pooled_mean()
    const = example31_constants()
    # sharp check: the scheme's own mean recursion under one shifted copy
    dt = grid.dt
    m = np.empty(grid.steps + 1)
    m[-1] = const.e_xi
    for i in range(grid.steps - 1, -1, -1):
        m[i] = m[i + 1] * (1.0 - dt + dt * dt)
    assert np.max(np.abs(pooled - m) / np.abs(m)) < 5e-3
    # continuous-limit curve carries the O(dt) discretization bias
    cont = np.array([expected_y(t) for t in grid.nodes])
    assert np.max(np.abs(pooled - cont) / np.abs(cont)) < 3e-2


def test_example31_integral_identity(example31_particles):
    # E[Y_t] = E[xi] - int_t^T E[Y_s] ds, trapezoid on the pooled curve
    grid, sol = example31_particles
    pooled = sol.pooled_mean()
    e_xi = example31_constants().e_xi
    nodes = grid.nodes
    gaps = [
        pooled[i] - (e_xi - np.trapezoid(pooled[i:], nodes[i:]))
        for i in range(grid.steps + 1)
    ]
    assert np.max(np.abs(gaps)) < 1e-2


def test_example31_universes_exchangeable(example31_particles):
    _, sol = example31_particles
    zmax, allowed = sol.exchangeability_statistic()
    assert zmax <= allowed
    rep = sol.check_invariants()
    assert rep.passed, str(rep)


# ------------------------------------------------- convergence study


def _benchmark_reference(steps: int, particles: int):
    prob = benchmark_reflected_mf_problem()
    grid = make_grid(1.0, steps)
    noise = sample_brownian(grid, particles, prob.noise_dim, RngSeed(900))
    ens = simulate_law_ensemble(prob, grid, noise)
    return prob, grid, solve_reflected(prob, ens, noise, POLY, keep_fits=False)


def test_convergence_study_decoupled_is_exact():
    # without coupling the universe-0 solve IS the limit solve, so the
    # common-noise error vanishes identically and no rate is fitted
    prob = american_put_problem()
    grid = make_grid(1.0, 8)
    noise = sample_brownian(grid, 300, 1, RngSeed(3))
    ens = simulate_law_ensemble(prob, grid, noise)
    ref = solve_reflected(prob, ens, noise, POLY, keep_fits=False)
    study = convergence_study(prob, [1, 2], ref, seed=RngSeed(3), basis=POLY, sub_ensemble_size=300)
    assert study.errors == (0.0, 0.0)
    assert np.isnan(study.rate)
    assert "degenerate" in study.rate_note


def test_convergence_study_error_decreases_with_interaction():
    prob, _, ref = _benchmark_reference(25, 4000)
    study = convergence_study(prob, [2, 8, 32], ref, seed=RngSeed(17), basis=POLY)
    assert study.sub_ensembles == (3333, 1111, 500)
    e = study.errors
    assert e[0] > e[1] > e[2] > 0.0
    assert -1.2 < study.rate < -0.1
    assert study.rate_ci[1] < 0.0
    assert max(study.k_errors) < 2e-2
    assert float(study.probe_gaps.max()) < 5e-2
    rows = study.rows()
    assert [r["N"] for r in rows] == [2, 8, 32]


def test_convergence_study_fixed_total_budget():
    prob, _, ref = _benchmark_reference(8, 600)
    study = convergence_study(
        prob, [2, 5], ref, seed=RngSeed(6), basis=POLY, total_budget=3000
    )
    assert study.sub_ensembles == (1000, 500)
    assert all(err > 0.0 for err in study.errors)


def test_convergence_study_validates_inputs():
    prob, grid, ref = _benchmark_reference(8, 600)
    with pytest.raises(ValueError, match="at least two"):
        convergence_study(prob, [4], ref, seed=1, basis=POLY)
    with pytest.raises(ValueError, match="strictly increasing"):
        convergence_study(prob, [8, 4], ref, seed=1, basis=POLY)
    with pytest.raises(ValueError, match="not both"):
        convergence_study(
            prob, [2, 4], ref, seed=1, basis=POLY, sub_ensemble_size=300, total_budget=900
        )
    with pytest.raises(ValueError, match="fewer than 100"):
        convergence_study(prob, [2, 4], ref, seed=1, basis=POLY, total_budget=400)
    other = american_put_problem()
    with pytest.raises(ValueError, match="reference solves"):
        convergence_study(other, [2, 4], ref, seed=1, basis=POLY)
    free = dataclasses.replace(prob, obstacle_h=None, has_obstacle=False)
    noise = sample_brownian(grid, 600, prob.noise_dim, RngSeed(900))
    ens = simulate_law_ensemble(free, grid, noise)
    plain = solve_bsde(free, ens, noise, POLY, keep_fits=False)
    with pytest.raises(ValueError, match="reflected"):
        convergence_study(free, [2, 4], plain, seed=1, basis=POLY)


# ------------------------------------------- ordered-data counterexample


def test_counterexample_reproduces_analytic_violation_probability():
    rep = comparison_counterexample(6000, make_grid(2.0, 50))
    assert rep.yprime_max_abs == 0.0
    assert rep.kprime_terminal_max == 0.0
    assert rep.order_fraction >= 0.999
    assert rep.expected_violation == pytest.approx(example31_constants().violation_probability)
    assert abs(rep.violation_gap) < 5e-2
    assert rep.violation_fraction > 0.3
    assert "P(Y_1 < 0)" in str(rep)


def test_counterexample_validates_inputs():
    with pytest.raises(ValueError, match="T = 2"):
        comparison_counterexample(6000, make_grid(1.0, 50))
    with pytest.raises(ValueError, match="not a node"):
        comparison_counterexample(6000, make_grid(2.0, 75))
    with pytest.raises(ValueError, match="fewer than 100"):
        comparison_counterexample(900, make_grid(2.0, 50))

"""Forward simulation: law ensembles, frozen-law flows, blow-up policy."""

import numpy as np
import pytest

from rmfbsde.forward import (
    NumericalBlowupError,
    PathEnsemble,
    law_atoms_per_node,
    simulate_flow,
    simulate_law_ensemble,
    state_atoms,
)
from rmfbsde.problems import (
    MfProblem,
    benchmark_reflected_mf_problem,
    deterministic_obstacle_problem,
)
from rmfbsde.stochastic import RngSeed, make_grid, sample_brownian

# moment-bound constant for the linear test problem, fit once on
# x in {0, 1, 2, 4} (max ratio 0.976) and frozen with margin
MOMENT_C = 1.05


def linear_problem() -> MfProblem:
    return MfProblem(
        name="linear_test",
        state_dim=1,
        noise_dim=1,
        horizon=1.0,
        x0=np.zeros(1),
        b=lambda t, x, xt: 0.25 * xt - 0.5 * x,
        sigma=lambda t, x, xt: np.abs(0.3 + 0.1 * x)[:, :, None],
        terminal_Phi=lambda x, xt: x[:, 0],
        b_mf=True,
    )


def test_no_dynamics_keeps_states_constant():
    p = deterministic_obstacle_problem()  # b and sigma both absent
    grid = make_grid(1.0, 10)
    noise = sample_brownian(grid, 8, 1, 5)
    ens = simulate_law_ensemble(p, grid, noise)
    assert ens.states.shape == (8, 11, 1)
    np.testing.assert_array_equal(ens.states, np.zeros((8, 11, 1)))
    assert not ens.law_frozen


def test_pure_mean_field_drift_follows_exponential_ode():
    # b = x~, sigma = 0, x0 = 1: empirical mean solves m' = m up to O(dt)
    p = MfProblem(
        name="mf_drift", state_dim=1, noise_dim=1, horizon=1.0, x0=np.ones(1),
        b=lambda t, x, xt: xt,
        terminal_Phi=lambda x, xt: x[:, 0],
        b_mf=True,
    )
    grid = make_grid(1.0, 200)
    noise = sample_brownian(grid, 16, 1, 6)
    ens = simulate_law_ensemble(p, grid, noise)
    means = ens.states[:, :, 0].mean(axis=0)
    target = np.exp(grid.nodes)
    assert np.abs(means - target).max() <= 4e-3 * np.e


def test_additive_noise_reproduces_brownian_paths_exactly():
    def problem(x0):
        return MfProblem(
            name="bm", state_dim=1, noise_dim=1, horizon=2.0, x0=np.full(1, x0),
            sigma=lambda t, x, xt: np.array([[1.0]]),
            terminal_Phi=lambda x, xt: x[:, 0],
        )

    grid = make_grid(2.0, 40)
    noise = sample_brownian(grid, 32, 1, 7)
    # x0 = 0: same fold order as cumsum, bit-identical
    ens = simulate_law_ensemble(problem(0.0), grid, noise)
    np.testing.assert_array_equal(ens.states[:, :, 0], noise.paths(0.0)[:, :, 0])
    # shifted start: equal up to accumulation roundoff
    ens = simulate_law_ensemble(problem(0.5), grid, noise)
    np.testing.assert_allclose(ens.states[:, :, 0], noise.paths(0.5)[:, :, 0], rtol=0, atol=5e-13)


def test_superlinear_drift_raises_blowup_with_step():
    p = MfProblem(
        name="cubic", state_dim=1, noise_dim=1, horizon=1.0, x0=np.full(1, 3.0),
        b=lambda t, x, xt: x**3,
        terminal_Phi=lambda x, xt: x[:, 0],
    )
    grid = make_grid(1.0, 10)  # dt = 0.1: cubic growth overflows within 10 steps
    noise = sample_brownian(grid, 4, 1, 8)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalBlowupError, match=r"step \d"):
            simulate_law_ensemble(p, grid, noise)


def test_ensemble_validation():
    grid = make_grid(1.0, 4)
    good = np.zeros((3, 5, 1))
    PathEnsemble(grid=grid, states=good, law_frozen=False)
    with pytest.raises(ValueError, match="nodes"):
        PathEnsemble(grid=grid, states=np.zeros((3, 4, 1)), law_frozen=False)
    bad = good.copy()
    bad[1, 2, 0] = np.inf
    with pytest.raises(NumericalBlowupError):
        PathEnsemble(grid=grid, states=bad, law_frozen=False)
    ens = PathEnsemble(grid=grid, states=np.zeros((3, 3, 1)), law_frozen=True, start_index=2)
    assert ens.at_node(2).shape == (3, 1)
    with pytest.raises(ValueError, match="outside covered range"):
        ens.at_node(1)


def test_law_ensemble_rejects_mismatches():
    p = linear_problem()
    grid = make_grid(1.0, 10)
    with pytest.raises(ValueError, match="grid mismatch"):
        simulate_law_ensemble(p, grid, sample_brownian(make_grid(1.0, 20), 8, 1, 1))
    with pytest.raises(ValueError, match="noise dim"):
        simulate_law_ensemble(p, grid, sample_brownian(grid, 8, 2, 1))


def test_flow_from_terminal_node_is_single_state():
    p = linear_problem()
    grid = make_grid(1.0, 10)
    key = RngSeed(21)
    law = simulate_law_ensemble(p, grid, sample_brownian(grid, 64, 1, key))
    noise = sample_brownian(grid, 16, 1, key.child(1))
    fl = simulate_flow(p, grid, 10, [1.5], law, noise)
    assert fl.states.shape == (16, 1, 1)
    np.testing.assert_array_equal(fl.states[:, 0, 0], np.full(16, 1.5))
    assert fl.law_frozen and fl.start_index == 10


def test_deterministic_flow_matches_law_path_exactly():
    # sigma = 0: the flow from (0, x0) must replay the law ensemble's path
    p = MfProblem(
        name="mf_drift", state_dim=1, noise_dim=1, horizon=1.0, x0=np.ones(1),
        b=lambda t, x, xt: xt,
        terminal_Phi=lambda x, xt: x[:, 0],
        b_mf=True,
    )
    grid = make_grid(1.0, 50)
    key = RngSeed(22)
    law = simulate_law_ensemble(p, grid, sample_brownian(grid, 32, 1, key))
    fl = simulate_flow(p, grid, 0, [1.0], law, sample_brownian(grid, 8, 1, key.child(3)))
    np.testing.assert_array_equal(fl.states[:, :, 0], np.tile(law.states[0, :, 0], (8, 1)))


def test_flow_refuses_reused_stream_and_bad_arguments():
    p = linear_problem()
    grid = make_grid(1.0, 10)
    key = RngSeed(23)
    noise = sample_brownian(grid, 16, 1, key)
    law = simulate_law_ensemble(p, grid, noise)
    with pytest.raises(ValueError, match="stream"):
        simulate_flow(p, grid, 0, [0.0], law, noise)
    fresh = sample_brownian(grid, 16, 1, key.child(1))
    with pytest.raises(ValueError, match="grid mismatch"):
        simulate_flow(p, make_grid(1.0, 20), 0, [0.0], law, fresh)
    with pytest.raises(ValueError, match="start_index"):
        simulate_flow(p, grid, 11, [0.0], law, fresh)
    with pytest.raises(ValueError, match="shape"):
        simulate_flow(p, grid, 0, [0.0, 1.0], law, fresh)


def test_flow_mean_matches_law_mean_within_monte_carlo_error():
    p = benchmark_reflected_mf_problem()
    grid = make_grid(1.0, 50)
    key = RngSeed(901)
    law = simulate_law_ensemble(p, grid, sample_brownian(grid, 4000, 1, key))
    fl = simulate_flow(p, grid, 0, p.x0, law, sample_brownian(grid, 4000, 1, key.child(7)))
    m_law = law.terminal_states.mean()
    m_flow = fl.terminal_states.mean()
    se = np.sqrt(law.terminal_states.var() / 4000 + fl.terminal_states.var() / 4000)
    assert abs(m_law - m_flow) <= 3 * se


def test_doubling_particles_stays_in_clt_band():
    p = benchmark_reflected_mf_problem()
    grid = make_grid(1.0, 50)
    key = RngSeed(42)
    small = simulate_law_ensemble(p, grid, sample_brownian(grid, 2000, 1, key))
    large = simulate_law_ensemble(p, grid, sample_brownian(grid, 4000, 1, key))
    diff = abs(small.terminal_states.mean() - large.terminal_states.mean())
    var = large.terminal_states.var()
    assert diff <= 3 * np.sqrt(var / 2000 + var / 4000)


def test_flow_mean_lipschitz_in_initial_state():
    p = benchmark_reflected_mf_problem()
    grid = make_grid(1.0, 50)
    key = RngSeed(111)
    law = simulate_law_ensemble(p, grid, sample_brownian(grid, 2000, 1, key))
    noise = sample_brownian(grid, 2000, 1, key.child(5))
    fa = simulate_flow(p, grid, 0, [0.3], law, noise)
    fb = simulate_flow(p, grid, 0, [0.7], law, noise)
    mean_sup = np.abs(fa.states - fb.states).max(axis=1).mean()
    assert mean_sup <= 2.0 * 0.4


def test_flow_moment_bound_with_frozen_constant():
    p = linear_problem()
    grid = make_grid(1.0, 50)
    key = RngSeed(314159)
    law = simulate_law_ensemble(p, grid, sample_brownian(grid, 4000, 1, key))
    for j, x in enumerate([0.0, 1.0, 2.0, 4.0, -3.0, 0.5, 3.0, 6.0]):
        noise = sample_brownian(grid, 4000, 1, key.child(j + 1))
        fl = simulate_flow(p, grid, 0, [x], law, noise)
        sup2 = (np.abs(fl.states[:, :, 0]).max(axis=1) ** 2).mean()
        assert sup2 <= MOMENT_C * (1.0 + x * x), f"moment bound broken at x={x}"


def test_state_atoms_preserve_componentwise_means():
    rng = np.random.default_rng(0)
    states = rng.normal(size=(1000, 3))
    atoms, w = state_atoms(states, 32)
    assert atoms.shape == (32, 3)
    np.testing.assert_allclose(w @ atoms, states.mean(axis=0), atol=1e-12)


def test_law_atoms_per_node_cover_every_node():
    p = linear_problem()
    grid = make_grid(1.0, 10)
    law = simulate_law_ensemble(p, grid, sample_brownian(grid, 500, 1, 77))
    per_node = law_atoms_per_node(law, 16)
    assert len(per_node) == 11
    for j, (atoms, w) in enumerate(per_node):
        np.testing.assert_allclose(w @ atoms, law.states[:, j, :].mean(axis=0), atol=1e-12)

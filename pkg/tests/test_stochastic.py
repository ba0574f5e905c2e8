"""Grid arithmetic and statistical sanity of the increment sampler."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmfbsde.stochastic import NoiseEnsemble, RngSeed, TimeGrid, make_grid, sample_brownian


def test_grid_nodes_exact():
    g = make_grid(2.0, 4)
    assert np.array_equal(g.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])
    assert g.dt == 0.5
    assert g.node(0) == 0.0 and g.node(4) == 2.0
    assert g.index_of(1.5) == 3


def test_grid_rejects_bad_arguments():
    with pytest.raises(ValueError):
        make_grid(0.0, 10)
    with pytest.raises(ValueError):
        make_grid(-1.0, 10)
    with pytest.raises(ValueError):
        make_grid(1.0, 0)
    g = make_grid(1.0, 10)
    with pytest.raises(ValueError):
        g.index_of(0.05001)
    with pytest.raises(ValueError):
        g.node(11)


@given(steps=st.integers(min_value=1, max_value=2000), horizon=st.floats(min_value=1e-3, max_value=100.0))
def test_grid_endpoints_and_spacing(steps, horizon):
    g = make_grid(horizon, steps)
    nodes = g.nodes
    assert nodes[0] == 0.0
    assert nodes[-1] == horizon  # linspace pins both endpoints exactly
    assert len(nodes) == steps + 1
    assert g.index_of(g.node(steps // 2)) == steps // 2


def test_seed_validation():
    with pytest.raises(ValueError):
        RngSeed(-1)
    with pytest.raises(ValueError):
        RngSeed(2**64)
    s = RngSeed(7, 3)
    assert s.child(2) == RngSeed(7, 5)


def test_same_key_bit_identical():
    g = make_grid(1.0, 16)
    a = sample_brownian(g, 50, 2, RngSeed(123, 4))
    b = sample_brownian(g, 50, 2, RngSeed(123, 4))
    assert np.array_equal(a.increments, b.increments)


def test_particle_draws_stable_under_ensemble_growth():
    # Particle p's increments must not depend on how many particles follow.
    g = make_grid(1.0, 8)
    small = sample_brownian(g, 10, 3, 99)
    large = sample_brownian(g, 1000, 3, 99)
    assert np.array_equal(small.increments, large.increments[:10])


def test_streams_are_distinct():
    g = make_grid(1.0, 8)
    a = sample_brownian(g, 100, 1, RngSeed(5, 0))
    b = sample_brownian(g, 100, 1, RngSeed(5, 1))
    assert not np.allclose(a.increments, b.increments)
    # ... but correlate only at CLT level (see moment test below).
    corr = np.corrcoef(a.increments.ravel(), b.increments.ravel())[0, 1]
    assert abs(corr) < 4.0 / math.sqrt(a.increments.size)


def test_increment_moments():
    # P = 1e5, M = 100: per-step mean within 4*sqrt(dt/P), variance within
    # 5% of dt, lag-1 autocorrelation within a CLT band.
    g = make_grid(1.0, 100)
    P = 100_000
    e = sample_brownian(g, P, 1, 2026)
    dw = e.increments[:, :, 0]
    dt = g.dt
    mean_tol = 4.0 * math.sqrt(dt / P)
    assert np.abs(dw.mean(axis=0)).max() < mean_tol
    v = dw.var(axis=0)
    assert np.all(v > 0.95 * dt) and np.all(v < 1.05 * dt)
    lag1 = np.mean(dw[:, :-1] * dw[:, 1:], axis=0) / dt
    assert np.abs(lag1).max() < 4.0 / math.sqrt(P)


def test_paths_start_at_initial_value():
    g = make_grid(1.0, 4)
    e = sample_brownian(g, 7, 2, 1)
    w = e.paths(np.array([1.0, -2.0]))
    assert np.allclose(w[:, 0, :], [1.0, -2.0])
    assert np.allclose(w[:, -1, :] - w[:, 0, :], e.increments.sum(axis=1))


def test_shape_and_argument_validation():
    g = make_grid(1.0, 4)
    with pytest.raises(ValueError):
        sample_brownian(g, 0, 1, 1)
    with pytest.raises(ValueError):
        sample_brownian(g, 1, 0, 1)
    e = sample_brownian(g, 3, 2, 1)
    assert e.particles == 3 and e.dim == 2
    with pytest.raises(ValueError):
        NoiseEnsemble(grid=g, increments=np.zeros((3, 5, 2)), key=RngSeed(1))


@settings(max_examples=20)
@given(p=st.integers(min_value=1, max_value=40), d=st.integers(min_value=1, max_value=3), seed=st.integers(min_value=0, max_value=2**32))
def test_determinism_property(p, d, seed):
    g = make_grid(0.5, 3)
    a = sample_brownian(g, p, d, seed)
    b = sample_brownian(g, p, d, seed)
    assert np.array_equal(a.increments, b.increments)
    assert a.increments.shape == (p, 3, d)

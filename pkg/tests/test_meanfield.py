"""Atom compression: exactness for means, accuracy for smooth averages."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmfbsde.meanfield import column_atoms, joint_atoms, scalar_atoms


def test_scalar_atoms_preserve_mean_exactly():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(10_001)  # deliberately not divisible by atom count
    atoms, w = scalar_atoms(v, 64)
    assert atoms.shape == w.shape == (64,)
    assert np.isclose(w.sum(), 1.0, atol=1e-15)
    assert np.isclose(atoms @ w, v.mean(), atol=1e-12)
    assert np.all(np.diff(atoms) >= 0.0)


def test_scalar_atoms_small_sample_passthrough():
    v = np.array([3.0, -1.0, 2.0])
    atoms, w = scalar_atoms(v, 64)
    assert np.array_equal(atoms, [-1.0, 2.0, 3.0])
    assert np.allclose(w, 1.0 / 3.0)


def test_scalar_atoms_smooth_average_accuracy():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(50_000)
    atoms, w = scalar_atoms(v, 64)
    exact = np.tanh(v).mean()
    approx = np.tanh(atoms) @ w
    assert abs(exact - approx) < 5e-4


@settings(max_examples=30)
@given(n=st.integers(min_value=1, max_value=300), a=st.integers(min_value=1, max_value=64))
def test_scalar_atoms_mean_property(n, a):
    rng = np.random.default_rng(n * 1000 + a)
    v = rng.uniform(-5, 5, size=n)
    atoms, w = scalar_atoms(v, a)
    assert np.isclose(atoms @ w, v.mean(), atol=1e-12)
    assert len(atoms) == min(n, a)


def test_joint_atoms_pairing_and_means():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(987)
    y = 2.0 * x + rng.standard_normal(987) * 0.1
    atoms, w = joint_atoms(x, {"x": x, "y": y}, n_atoms=32)
    assert atoms["x"].shape == (32,)
    assert np.isclose(atoms["x"] @ w, x.mean(), atol=1e-12)
    assert np.isclose(atoms["y"] @ w, y.mean(), atol=1e-12)
    # pairing preserved: the y-atoms track 2*x at block scale
    assert np.allclose(atoms["y"], 2.0 * atoms["x"], atol=0.2)


def test_joint_atoms_multidimensional_columns():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((500, 2))
    atoms, w = joint_atoms(x[:, 0], {"state": x}, n_atoms=16)
    assert atoms["state"].shape == (16, 2)
    assert np.allclose(w @ atoms["state"], x.mean(axis=0), atol=1e-12)


def test_joint_atoms_validates_shapes():
    with pytest.raises(ValueError):
        joint_atoms(np.array([]), {})
    with pytest.raises(ValueError):
        joint_atoms(np.arange(5.0), {"bad": np.arange(4.0)})


def test_column_atoms_per_column_means():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((513, 40))
    atoms, w = column_atoms(m, 32)
    assert atoms.shape == (32, 40)
    assert np.allclose(w @ atoms, m.mean(axis=0), atol=1e-12)
    # linear functionals are exact per column
    assert np.allclose((w @ (3.0 * atoms - 1.0)), 3.0 * m.mean(axis=0) - 1.0, atol=1e-12)


def test_column_atoms_rejects_bad_input():
    with pytest.raises(ValueError):
        column_atoms(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        column_atoms(np.zeros(5))

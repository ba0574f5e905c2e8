"""Quantile-atom compression of empirical laws.

Ensemble averages of the form (1/P) sum_q g(..., V_q) appear in every
solver here.  Evaluating them pairwise is O(P^2); instead the ensemble is
compressed to a small set of weighted atoms by sorted block means.  Block
means preserve the ensemble mean exactly, so linear-in-V terms lose
nothing; for smooth g the error is O(within-block variance * g'').
"""

from __future__ import annotations

import numpy as np

__all__ = ["scalar_atoms", "joint_atoms", "column_atoms"]


def _block_bounds(count: int, n_atoms: int) -> np.ndarray:
    """Start indices of near-equal blocks partitioning range(count)."""
    n = min(n_atoms, count)
    return (np.arange(n) * count) // n


def scalar_atoms(values: np.ndarray, n_atoms: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Compress a (P,) sample to (atoms, weights) by sorted block means.

    Weighted atom mean equals the sample mean exactly.  If P <= n_atoms the
    sorted sample itself is returned with uniform weights.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("cannot compress an empty sample")
    order = np.sort(v)
    starts = _block_bounds(v.size, n_atoms)
    sums = np.add.reduceat(order, starts)
    counts = np.diff(np.append(starts, v.size))
    return sums / counts, counts / v.size


def joint_atoms(
    key: np.ndarray, columns: dict[str, np.ndarray], n_atoms: int = 256
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Compress paired samples to joint atoms, sorting on a scalar key.

    Parameters
    ----------
    key : ndarray, shape (P,)
        Sort key (typically the first state coordinate).
    columns : dict of name -> ndarray with leading dimension P
        Samples compressed jointly; rows stay paired, so cross-column
        dependence at block scale is preserved.
    n_atoms : int

    Returns
    -------
    (atoms, weights)
        atoms[name] has shape (A, ...) with the same trailing shape as the
        input; weights has shape (A,) and sums to 1.
    """
    key = np.asarray(key, dtype=float).ravel()
    if key.size == 0:
        raise ValueError("cannot compress an empty sample")
    order = np.argsort(key, kind="stable")
    starts = _block_bounds(key.size, n_atoms)
    counts = np.diff(np.append(starts, key.size))
    atoms: dict[str, np.ndarray] = {}
    for name, col in columns.items():
        arr = np.asarray(col, dtype=float)
        if arr.shape[0] != key.size:
            raise ValueError(f"column {name!r} has leading dim {arr.shape[0]}, key has {key.size}")
        sorted_col = arr[order]
        sums = np.add.reduceat(sorted_col, starts, axis=0)
        atoms[name] = sums / counts.reshape((-1,) + (1,) * (arr.ndim - 1))
    return atoms, counts / key.size


def column_atoms(matrix: np.ndarray, n_atoms: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Compress each column of an (R, C) matrix separately.

    Used for per-path neighbour sets in the coupled particle system: column
    c holds the R neighbour values seen by path c.  Returns atoms of shape
    (A, C) and shared weights (A,); column means are preserved exactly.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError(f"need a nonempty 2-d matrix, got shape {m.shape}")
    order = np.sort(m, axis=0)
    starts = _block_bounds(m.shape[0], n_atoms)
    counts = np.diff(np.append(starts, m.shape[0]))
    sums = np.add.reduceat(order, starts, axis=0)
    return sums / counts[:, None], counts / m.shape[0]

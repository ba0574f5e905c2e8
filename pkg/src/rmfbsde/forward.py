"""Euler simulation of the forward dynamics, self-interacting and frozen-law.

Two stages. ``simulate_law_ensemble`` runs the self-interacting particle
system: mean-field coefficient slots read the ensemble's own empirical
distribution at the current step (within-step explicit coupling, so each
step is a synchronization point). ``simulate_flow`` then treats that
ensemble as a frozen law and runs fresh paths from an arbitrary node and
state, with the coefficient averages recomputed at the flow's own states
against the frozen per-node distributions.

Empirical distributions are compressed to weighted atoms (sorted block
means) before the coefficient average; the compression is exact for
coefficients linear in the mean-field slot and the atom count keeps the
per-step cost independent of the particle count.

Non-finite states abort immediately with the offending step in the
message. Clamping instead would silently corrupt convergence studies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .meanfield import joint_atoms, scalar_atoms
from .problems import MfProblem
from .stochastic import NoiseEnsemble, RngSeed, TimeGrid

__all__ = [
    "NumericalBlowupError",
    "PathEnsemble",
    "state_atoms",
    "law_atoms_per_node",
    "simulate_law_ensemble",
    "simulate_flow",
]

FORWARD_ATOMS = 64


class NumericalBlowupError(RuntimeError):
    """A simulated state left the finite range."""


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated forward paths on the node suffix [start_index, M].

    states[p, j] is particle p at node start_index + j; column 0 holds the
    prescribed initial value. law_frozen records whether mean-field terms
    were read from this ensemble itself (False) or from a supplied frozen
    ensemble (True).
    """

    grid: TimeGrid
    states: np.ndarray
    law_frozen: bool
    start_index: int = 0
    noise_key: RngSeed | None = None

    def __post_init__(self) -> None:
        st = np.asarray(self.states, dtype=float)
        if st.ndim != 3:
            raise ValueError(f"states must be (particles, nodes, dim), got shape {st.shape}")
        expected = self.grid.steps - self.start_index + 1
        if st.shape[1] != expected:
            raise ValueError(
                f"states cover {st.shape[1]} nodes, grid suffix from {self.start_index} has {expected}"
            )
        if not np.isfinite(st).all():
            raise NumericalBlowupError("ensemble contains non-finite states")
        object.__setattr__(self, "states", st)

    @property
    def particles(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def at_node(self, i: int) -> np.ndarray:
        """States at global node index i, shape (particles, dim)."""
        j = i - self.start_index
        if j < 0 or j >= self.states.shape[1]:
            raise ValueError(f"node {i} outside covered range [{self.start_index}, {self.grid.steps}]")
        return self.states[:, j, :]

    @property
    def terminal_states(self) -> np.ndarray:
        return self.states[:, -1, :]


def state_atoms(states: np.ndarray, n_atoms: int = FORWARD_ATOMS) -> tuple[np.ndarray, np.ndarray]:
    """Compress an empirical state cloud (P, n) to weighted atoms (A, n).

    Multi-dimensional clouds are blocked along the first coordinate; the
    component means are preserved exactly either way.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2:
        raise ValueError(f"states must be (particles, dim), got shape {states.shape}")
    if states.shape[1] == 1:
        atoms, weights = scalar_atoms(states[:, 0], n_atoms)
        return atoms.reshape(-1, 1), weights
    cols, weights = joint_atoms(states[:, 0], {"x": states}, n_atoms)
    return cols["x"], weights


def law_atoms_per_node(law: PathEnsemble, n_atoms: int = FORWARD_ATOMS) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-node atom compressions of a frozen law ensemble."""
    return [state_atoms(law.states[:, j, :], n_atoms) for j in range(law.states.shape[1])]


def _check_finite(x: np.ndarray, step: int, t: float) -> None:
    if not np.isfinite(x).all():
        bad = int(np.count_nonzero(~np.isfinite(x)))
        raise NumericalBlowupError(
            f"non-finite state after step {step} (t={t:.6g}): {bad} entries; "
            "reduce the step size or check coefficient growth"
        )


def _euler(
    problem: MfProblem,
    grid: TimeGrid,
    noise: NoiseEnsemble,
    x_init: np.ndarray,
    start_index: int,
    atoms_at,
) -> np.ndarray:
    """Shared Euler kernel from node start_index; atoms_at(i, states) feeds
    the mean-field slots (returns (atoms, weights) or (None, None))."""
    P = noise.particles
    M = grid.steps
    n = problem.state_dim
    dt = grid.dt
    out = np.empty((P, M - start_index + 1, n))
    out[:, 0, :] = x_init
    x = out[:, 0, :].copy()
    needs_drift = problem.b is not None
    needs_diff = problem.sigma is not None
    for i in range(start_index, M):
        t = grid.node(i)
        atoms, weights = atoms_at(i, x)
        new = x.copy()
        if needs_drift:
            new += problem.drift(t, x, atoms, weights) * dt
        if needs_diff:
            sig = problem.diffusion(t, x, atoms, weights)
            new += np.einsum("pnd,pd->pn", sig, noise.increments[:, i, :])
        _check_finite(new, i + 1, grid.node(i + 1))
        out[:, i - start_index + 1, :] = new
        x = new
    return out


def _require_same_grid(label: str, got: TimeGrid, want: TimeGrid) -> None:
    if got != want:
        raise ValueError(
            f"{label} grid mismatch: horizon/steps ({got.horizon}, {got.steps}) "
            f"vs expected ({want.horizon}, {want.steps})"
        )


def simulate_law_ensemble(
    problem: MfProblem,
    grid: TimeGrid,
    noise: NoiseEnsemble,
    n_atoms: int = FORWARD_ATOMS,
) -> PathEnsemble:
    """Self-interacting particle approximation of the law dynamics.

    Euler step with the mean-field slots of b and sigma averaged over the
    current step's own empirical distribution (atom-compressed).
    """
    _require_same_grid("noise", noise.grid, grid)
    if noise.dim != problem.noise_dim:
        raise ValueError(f"noise dim {noise.dim} != problem noise dim {problem.noise_dim}")
    needs_atoms = problem.b_mf or problem.sigma_mf

    def atoms_at(i: int, x: np.ndarray):
        if not needs_atoms:
            return None, None
        return state_atoms(x, n_atoms)

    x0 = np.broadcast_to(problem.x0, (noise.particles, problem.state_dim))
    states = _euler(problem, grid, noise, x0, 0, atoms_at)
    return PathEnsemble(grid=grid, states=states, law_frozen=False, noise_key=noise.key)


def simulate_flow(
    problem: MfProblem,
    grid: TimeGrid,
    start_index: int,
    x: np.ndarray,
    frozen_law: PathEnsemble,
    noise: NoiseEnsemble,
    n_atoms: int = FORWARD_ATOMS,
) -> PathEnsemble:
    """Paths from state x at node start_index under the frozen law.

    The mean-field slots average over frozen_law's per-node empirical
    distributions, re-evaluated at the flow's own states, so the flow
    solves a classical SDE. The noise must be a stream distinct from the
    one that produced frozen_law.
    """
    _require_same_grid("frozen_law", frozen_law.grid, grid)
    _require_same_grid("noise", noise.grid, grid)
    if frozen_law.start_index != 0:
        raise ValueError("frozen_law must cover the full grid")
    if noise.dim != problem.noise_dim:
        raise ValueError(f"noise dim {noise.dim} != problem noise dim {problem.noise_dim}")
    if not 0 <= start_index <= grid.steps:
        raise ValueError(f"start_index must lie in [0, {grid.steps}], got {start_index}")
    if frozen_law.noise_key is not None and noise.key == frozen_law.noise_key:
        raise ValueError("flow noise reuses the frozen law's stream; draw a distinct stream_id")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (problem.state_dim,):
        raise ValueError(f"x must have shape ({problem.state_dim},), got {x.shape}")

    needs_atoms = problem.b_mf or problem.sigma_mf
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def atoms_at(i: int, _x: np.ndarray):
        if not needs_atoms:
            return None, None
        if i not in cache:
            cache[i] = state_atoms(frozen_law.at_node(i), n_atoms)
        return cache[i]

    x_init = np.broadcast_to(x, (noise.particles, problem.state_dim))
    states = _euler(problem, grid, noise, x_init, start_index, atoms_at)
    return PathEnsemble(
        grid=grid,
        states=states,
        law_frozen=True,
        start_index=start_index,
        noise_key=noise.key,
    )

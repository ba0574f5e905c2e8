"""Time grids and reproducible Brownian increment ensembles.

Sampling design
---------------
Normals come from the inverse CDF (scipy.special.ndtri) applied to Philox
counter-based uniforms.  A double consumes exactly one 64-bit word, so
particle p's increments occupy the fixed counter range
[p * M * d, (p+1) * M * d) of the (seed, stream_id) stream: enlarging the
ensemble, or generating it in chunks, never changes the draws any existing
particle sees.  That is what makes common-random-number comparisons across
solver variants meaningful.  The sampling method is frozen; changing it
changes every regression baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

__all__ = ["TimeGrid", "RngSeed", "NoiseEnsemble", "make_grid", "sample_brownian"]

# Smallest uniform fed to ndtri; raw 0.0 (probability 2^-53) is remapped so
# the inverse CDF stays finite.
_U_FLOOR = 2.0**-54


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition 0 = t_0 < ... < t_M = T.

    Attributes
    ----------
    horizon : float
        Terminal time T > 0.
    steps : int
        Number of increments M >= 1.
    """

    horizon: float
    steps: int

    def __post_init__(self) -> None:
        if not self.horizon > 0.0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.steps < 1:
            raise ValueError(f"steps must be at least 1, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        """All M+1 nodes; endpoints exact by construction."""
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def node(self, i: int) -> float:
        if not 0 <= i <= self.steps:
            raise ValueError(f"node index {i} outside 0..{self.steps}")
        return i * self.horizon / self.steps

    def index_of(self, t: float, tol: float = 1e-12) -> int:
        """Index of the node equal to t, or ValueError if t is off-grid."""
        i = round(t / self.dt)
        if not 0 <= i <= self.steps or abs(i * self.dt - t) > tol * max(1.0, self.horizon):
            raise ValueError(f"t={t} is not a node of the grid (T={self.horizon}, M={self.steps})")
        return int(i)


@dataclass(frozen=True)
class RngSeed:
    """Root seed plus a stream label.

    Distinct stream_ids give statistically independent Philox streams for
    the same root seed; components of an experiment (law ensemble, flows,
    particle universes, ...) each get their own stream.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit in u64, got {self.seed}")
        if not 0 <= self.stream_id < 2**32:
            raise ValueError(f"stream_id must fit in u32, got {self.stream_id}")

    def child(self, offset: int) -> "RngSeed":
        return RngSeed(self.seed, self.stream_id + offset)


@dataclass(frozen=True)
class NoiseEnsemble:
    """Brownian increments for P particles on a grid.

    Attributes
    ----------
    grid : TimeGrid
    increments : ndarray, shape (P, M, d)
        increments[p, i] ~ Normal(0, dt I_d), independent across particles
        and steps.
    key : RngSeed
        Stream that generated the block (kept for provenance/diagnostics).
    """

    grid: TimeGrid
    increments: np.ndarray
    key: RngSeed

    def __post_init__(self) -> None:
        if self.increments.ndim != 3:
            raise ValueError(f"increments must be (P, M, d), got shape {self.increments.shape}")
        if self.increments.shape[1] != self.grid.steps:
            raise ValueError(
                f"increment count {self.increments.shape[1]} != grid steps {self.grid.steps}"
            )

    @property
    def particles(self) -> int:
        return self.increments.shape[0]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]

    def paths(self, x0: np.ndarray | float = 0.0) -> np.ndarray:
        """Brownian paths x0 + cumsum of increments, shape (P, M+1, d)."""
        P, M, d = self.increments.shape
        out = np.empty((P, M + 1, d))
        out[:, 0, :] = x0
        np.cumsum(self.increments, axis=1, out=out[:, 1:, :])
        out[:, 1:, :] += out[:, 0:1, :]
        return out


def make_grid(horizon: float, steps: int) -> TimeGrid:
    """Uniform grid on [0, horizon] with the given number of steps."""
    return TimeGrid(horizon=float(horizon), steps=int(steps))


def _uniforms(key: RngSeed, n: int) -> np.ndarray:
    """n doubles in (0, 1), one 64-bit Philox word each."""
    bitgen = np.random.Philox(key=key.seed + (key.stream_id << 64))
    gen = np.random.Generator(bitgen)
    u = gen.random(n)  # [0, 1), exactly one word per double
    # remap exact zeros so ndtri stays finite; deterministic per draw
    return np.where(u == 0.0, _U_FLOOR, u)


def sample_brownian(grid: TimeGrid, particles: int, dim: int, key: RngSeed | int) -> NoiseEnsemble:
    """Sample a (P, M, d) block of Brownian increments.

    Parameters
    ----------
    grid : TimeGrid
    particles : int
        Ensemble size P >= 1.
    dim : int
        Brownian dimension d >= 1.
    key : RngSeed or int
        int is shorthand for RngSeed(seed=key, stream_id=0).

    Returns
    -------
    NoiseEnsemble
        increments[p] is a deterministic function of (key, p) alone.
    """
    if particles < 1:
        raise ValueError(f"particles must be at least 1, got {particles}")
    if dim < 1:
        raise ValueError(f"dim must be at least 1, got {dim}")
    if isinstance(key, int):
        key = RngSeed(seed=key)
    n = particles * grid.steps * dim
    z = ndtri(_uniforms(key, n))
    z = z.reshape(particles, grid.steps, dim)
    z *= math.sqrt(grid.dt)
    return NoiseEnsemble(grid=grid, increments=z, key=key)

"""Penalized approximations of the reflected solve.

The penalty replaces reflection by the driver term n (Y - h)^-: the
solutions Y^n increase monotonically to the reflected Y as n grows, and
K^n_t = n * sum_{i: t_i < t} (Y_i - h_i)^- dt tracks the reflection
term. penalization_sweep runs a ladder of levels against the reflected
reference on the same ensemble and noise (common random numbers), so
the reported distances measure the penalty error, not Monte Carlo
scatter, and node-wise monotonicity can be checked pathwise against the
regression standard errors.

The solver treats the penalty explicitly (at Y_{i+1}) while n dt <= 1/2
and switches to a node-wise implicit update beyond that, where the
explicit recursion would turn stiff; see the solver module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import RegressionBasis
from .forward import PathEnsemble
from .problems import MfProblem
from .solver import (
    BackwardSolution,
    ConvergenceFailureError,
    _solve_backward,
    solve_reflected,
)
from .stochastic import NoiseEnsemble

__all__ = [
    "PenalizationReport",
    "solve_penalized",
    "penalization_sweep",
    "ramp_penalty_ode_value",
]

PROBE_FRACTIONS = (0.0, 0.25, 0.5, 0.75)


def ramp_penalty_ode_value(n: int, t: float, horizon: float = 1.0) -> float:
    """Exact penalized value for xi = 0, g = 0, h(t) = horizon - t.

    The gap e = h - y satisfies e' = -1 + n e with e(T) = 0, whose
    solution e(t) = (1 - exp(-n (T - t))) / n stays nonnegative, so the
    penalty never switches off and the linear ODE holds on all of [0, T]:

        y_n(t) = (T - t) - (1 - exp(-n (T - t))) / n.

    The limit n -> infinity recovers the reflected solution T - t.
    """
    if n < 1:
        raise ValueError(f"penalty level must be >= 1, got {n}")
    s = horizon - t
    if s < 0.0:
        raise ValueError(f"time {t} beyond horizon {horizon}")
    return s - (1.0 - math.exp(-n * s)) / n


def solve_penalized(
    problem: MfProblem,
    n: int,
    X: PathEnsemble,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
    **solver_options,
) -> BackwardSolution:
    """Unreflected solve with the penalty n (Y - h)^- added to the driver.

    Y may fall below the obstacle (nothing projects it); K holds the
    running penalty integral n * sum (Y_i - h_i)^- dt with the left-point
    rule, so K_0 = 0 and K is non-decreasing by construction.
    """
    return _solve_backward(
        problem, X, noise, basis, reflect=False, penalty_n=int(n), **solver_options
    )


@dataclass(frozen=True)
class PenalizationReport:
    """Convergence ladder of penalized solves against the reflected reference.

    distance rows are root-mean-square pathwise gaps |Y^n - Y| on the
    shared ensemble; `distance` takes the sup over the probe nodes,
    `distance_all_nodes` over every node. monotonicity_violations[i] is
    the fraction of (particle, node) pairs with Y^{n_i} exceeding
    Y^{n_{i+1}} by more than se_factor combined regression standard
    errors. probe_values keeps the Y ensembles at the probe nodes for
    downstream plots and tests.
    """

    levels: tuple
    probe_indices: tuple
    probe_times: tuple
    probe_means: np.ndarray             # (L, Q) ensemble mean Y at probes
    probe_values: np.ndarray            # (L, Q, P) Y snapshots at probes
    probe_distance: np.ndarray          # (L, Q) rms gap to reference at probes
    distance: np.ndarray                # (L,) sup over probes
    distance_all_nodes: np.ndarray      # (L,) sup over all nodes
    k_terminal_mean: np.ndarray         # (L,) mean K^n_T
    k_distance: np.ndarray              # (L,) |mean K^n_T - mean K_T|
    monotonicity_violations: np.ndarray  # (L-1,) per consecutive pair
    reference_k_mean: float
    se_factor: float

    def __post_init__(self) -> None:
        lv = self.levels
        if any(int(b) <= int(a) for a, b in zip(lv, lv[1:])) or any(int(n) < 1 for n in lv):
            raise ValueError(f"levels must be strictly increasing positive integers, got {lv}")

    def rows(self) -> list[dict]:
        """Flat per-(level, probe) records matching the CSV schema."""
        out = []
        for i, n in enumerate(self.levels):
            viol = self.monotonicity_violations[i - 1] if i > 0 else float("nan")
            for q, t in enumerate(self.probe_times):
                out.append(
                    {
                        "n": int(n),
                        "probe_time": float(t),
                        "mean_Y": float(self.probe_means[i, q]),
                        "dist_to_ref": float(self.probe_distance[i, q]),
                        "monotonicity_violations": float(viol),
                        "K_terminal_mean": float(self.k_terminal_mean[i]),
                    }
                )
        return out

    def __str__(self) -> str:
        lines = ["penalization ladder (distance = sup-probe rms gap to reflected reference)"]
        for i, n in enumerate(self.levels):
            v = f"{self.monotonicity_violations[i - 1]:.3%}" if i > 0 else "   -  "
            lines.append(
                f"  n={int(n):4d}  distance={self.distance[i]:.4g}  "
                f"all-node={self.distance_all_nodes[i]:.4g}  "
                f"K_T={self.k_terminal_mean[i]:.4g}  viol(prev)={v}"
            )
        lines.append(f"  reference K_T mean = {self.reference_k_mean:.4g}")
        return "\n".join(lines)


def _probe_nodes(steps: int, fractions) -> tuple:
    idx = sorted({min(steps, round(f * steps)) for f in fractions})
    return tuple(int(i) for i in idx)


def penalization_sweep(
    problem: MfProblem,
    X: PathEnsemble,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
    levels=(1, 4, 16, 64, 256),
    *,
    probe_fractions=PROBE_FRACTIONS,
    se_factor: float = 3.0,
    reference: BackwardSolution | None = None,
    **solver_options,
) -> PenalizationReport:
    """Penalized ladder under common random numbers and its distances.

    Every level and the reflected reference run on the identical ensemble,
    noise, and basis. The reference may be passed in when already solved
    (it must come from the same inputs; particle count is checked).
    """
    levels = tuple(int(n) for n in levels)
    if any(b <= a for a, b in zip(levels, levels[1:])) or any(n < 1 for n in levels):
        raise ValueError(f"levels must be strictly increasing positive integers, got {levels}")
    if reference is None:
        try:
            reference = solve_reflected(problem, X, noise, basis, **solver_options)
        except ConvergenceFailureError as exc:
            raise ConvergenceFailureError(
                f"{exc} (while solving the reflected reference)", exc.gaps
            ) from exc
    if reference.particles != X.particles:
        raise ValueError("reference was solved on a different ensemble")

    steps = X.grid.steps - X.start_index
    probes = _probe_nodes(steps, probe_fractions)
    times = tuple(float(X.grid.node(X.start_index + j)) for j in probes)

    L, Q, P = len(levels), len(probes), X.particles
    probe_means = np.zeros((L, Q))
    probe_values = np.zeros((L, Q, P))
    probe_distance = np.zeros((L, Q))
    distance = np.zeros(L)
    distance_all = np.zeros(L)
    k_mean = np.zeros(L)
    k_dist = np.zeros(L)
    violations = np.zeros(max(L - 1, 0))

    ref_k = float(reference.K[:, -1].mean())
    prev: BackwardSolution | None = None
    prev_se: np.ndarray | None = None
    for i, n in enumerate(levels):
        try:
            sol = solve_penalized(problem, n, X, noise, basis, **solver_options)
        except ConvergenceFailureError as exc:
            raise ConvergenceFailureError(
                f"{exc} (while solving penalty level n={n})", exc.gaps
            ) from exc
        gap_rms = np.sqrt(((sol.Y - reference.Y) ** 2).mean(axis=0))
        probe_means[i] = [sol.Y[:, j].mean() for j in probes]
        probe_values[i] = sol.Y[:, probes].T
        probe_distance[i] = gap_rms[list(probes)]
        distance[i] = probe_distance[i].max()
        distance_all[i] = gap_rms.max()
        k_mean[i] = sol.K[:, -1].mean()
        k_dist[i] = abs(k_mean[i] - ref_k)
        # node-wise fitted-value standard errors, reused for both pairs
        se = np.empty((P, steps))
        for j in range(steps):
            st = X.at_node(X.start_index + j)
            se[:, j] = sol.continuation_fits[j].pointwise_se(st)[:, 0]
        if prev is not None:
            tol = se_factor * (prev_se + se)
            violations[i - 1] = float(
                np.mean(prev.Y[:, :steps] > sol.Y[:, :steps] + tol)
            )
        prev, prev_se = sol, se

    return PenalizationReport(
        levels=levels,
        probe_indices=probes,
        probe_times=times,
        probe_means=probe_means,
        probe_values=probe_values,
        probe_distance=probe_distance,
        distance=distance,
        distance_all_nodes=distance_all,
        k_terminal_mean=k_mean,
        k_distance=k_dist,
        monotonicity_violations=violations,
        reference_k_mean=ref_k,
        se_factor=se_factor,
    )

"""Interacting particle approximation of the reflected mean-field system.

N+1 universes realize the shifted copies entering the interaction: each
universe holds an independent forward/noise realization on its own
sub-stream (seed.child(j) for universe j), and every mean-field slot of
the backward data is replaced by the average over the N cyclically
shifted universes j+1, ..., j+N (indices mod N+1).  The coupling is
row-paired at the particle level: particle p of universe j reads
particle p of every shifted universe, so each p indexes an independent
replica of the full (N+1)-copy system and the sub-ensemble of size B
vectorizes B such replicas.  Cyclic indexing makes the universes
exchangeable by construction, which the solution's diagnostics verify
empirically.

The backward induction is synchronized across universes.  Regressions
condition on each universe's own state, with one design factorization
per universe and node shared by the z- and continuation fits, the same
per-step operations as the classical backward solver.  The coupling is
implicit within a step (the shifted copies' values at the current node
are not yet known), so each step runs a small fixed-point: pass one
reads the shifted copies' values at the next node, pass two re-evaluates
the driver at their freshly regressed current-node values.  Two passes
leave a per-step defect of order dt^3 in the coupled means, below every
other error on the grids used here.

For problems declaring the separable cross/base split, the average over
shifted copies is computed for all universes at once as (total - own
term)/N, costing O(N B) per node instead of the O(N^2 B) pairwise roll;
the roll remains as the generic fallback and, on a small slice, as a
runtime cross-check of the declared split.  Problems with no mean-field
slot anywhere decouple: each universe then runs the exact classical
sequence in a single pass, and outputs match solve_reflected on the
matched sub-stream bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri

from .basis import DesignFactor, RegressionBasis
from .forward import PathEnsemble, simulate_law_ensemble
from .oracle import Example31Constants, example31_constants
from .problems import MfProblem, example31_problem
from .solver import BackwardSolution, InvariantReport, SolveDiagnostics, solve_reflected
from .stochastic import NoiseEnsemble, RngSeed, TimeGrid, sample_brownian

__all__ = [
    "ParticleSystemSolution",
    "ConvergenceReport",
    "CounterexampleReport",
    "solve_rbsde_n",
    "convergence_study",
    "comparison_counterexample",
]

# numerical-identity tolerance for the separable-vs-pairwise spot checks
_HOOK_TOL = 1e-10
_HOOK_SLICE = 64


def default_sub_ensemble(N: int) -> int:
    """Per-universe particle count at a fixed 10^4 total budget, floored
    at 500 so the regressions stay well conditioned at large N."""
    return max(10_000 // (N + 1), 500)


def _cross_columns(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values[:, None] if values.ndim == 1 else values


@dataclass(frozen=True)
class ParticleSystemSolution:
    """Synchronized triplets of all N+1 universes plus diagnostics.

    Y and K are (N+1, B, nodes); Z is (N+1, B, steps, d) or None when
    dropped to save memory.  Universe j's rows pair with every other
    universe's rows particle by particle.  Residual statistics and the
    Skorokhod sums are per universe, exactly as the classical solver
    reports them for a single ensemble.
    """

    grid: TimeGrid
    problem: MfProblem
    N: int
    Y: np.ndarray
    Z: np.ndarray | None
    K: np.ndarray
    ensembles: tuple
    resid_mean: np.ndarray          # (N+1, steps)
    resid_se: np.ndarray            # (N+1, steps)
    skorokhod: np.ndarray           # (N+1, B)
    mean_se: np.ndarray             # (N+1, nodes) CLT scale of each universe's node mean
    coupling_passes: int

    def __post_init__(self) -> None:
        U, B, nodes = self.Y.shape
        if U != self.N + 1 or nodes != self.grid.steps + 1:
            raise ValueError(f"Y shape {self.Y.shape} inconsistent with N={self.N}, grid")
        if self.K.shape != self.Y.shape:
            raise ValueError(f"K shape {self.K.shape} != Y shape {self.Y.shape}")
        if self.Z is not None and self.Z.shape[:3] != (U, B, self.grid.steps):
            raise ValueError(f"Z shape {self.Z.shape} inconsistent with the grid")
        if np.any(self.K[:, :, 0] != 0.0):
            raise ValueError("K must start at exactly zero")
        if np.any(np.diff(self.K, axis=2) < 0.0):
            raise ValueError("K must be non-decreasing")

    @property
    def universes(self) -> int:
        return self.N + 1

    @property
    def sub_ensemble(self) -> int:
        return self.Y.shape[1]

    def pooled_mean(self) -> np.ndarray:
        """Per-node Y mean pooled over universes and particles, (nodes,)."""
        return self.Y.mean(axis=(0, 1))

    def universe_means(self) -> np.ndarray:
        """Per-universe per-node Y means, (N+1, nodes)."""
        return self.Y.mean(axis=1)

    def universe_solution(self, j: int) -> BackwardSolution:
        """Universe j's triplet repackaged as a classical solution view."""
        if self.Z is None:
            raise ValueError("Z was not kept; re-solve with keep_z=True for per-universe views")
        if not 0 <= j <= self.N:
            raise ValueError(f"universe index {j} outside 0..{self.N}")
        diag = SolveDiagnostics(
            martingale_residual_mean=self.resid_mean[j],
            martingale_residual_se=self.resid_se[j],
            skorokhod_sum=self.skorokhod[j],
            picard_sweeps=self.coupling_passes,
            picard_gaps=(),
            mode="reflected",
        )
        return BackwardSolution(
            grid=self.grid,
            Y=self.Y[j],
            Z=self.Z[j],
            K=self.K[j],
            diagnostics=diag,
            problem=self.problem,
        )

    def exchangeability_statistic(self) -> tuple[float, float]:
        """(max z, allowed z) for per-node mean agreement across universes.

        z compares each universe's per-node mean against universe 0's.
        The standard error comes from the node's regression-target spread
        (stored during the solve), not from the fitted values: at early
        nodes all particles share the initial state, the fitted values
        collapse to a constant, and their cross-sectional variance says
        nothing about how the universe's estimate of that constant
        scatters.  The spread itself also shrinks as states concentrate
        toward the initial point, while the sampling error of a node mean
        is inherited through the backward recursion (the projection step
        preserves ensemble means), so each node's scale is floored by the
        largest scale among later nodes via a reverse running maximum.

        For mean-field drivers the difference of two universe means is
        additionally amplified by the coupling: universe j's interaction
        average and universe 0's differ only by swapping the two
        universes themselves, so the mean difference grows backward at
        rate L/N per unit time (L the declared driver Lipschitz
        constant), while own-state sensitivities act common-mode across
        same-law universes.  The terminal contribution to the scale is
        widened by that growth factor.  The allowance is 3 standard
        errors, Bonferroni-widened over the (N) x (nodes) comparisons at
        familywise level 1% so the bound stays meaningful for hundreds
        of universes.
        """
        U, B, nodes = self.Y.shape
        if U < 2:
            return 0.0, 3.0
        means = self.Y.mean(axis=1)
        var = np.maximum.accumulate(self.mean_se[:, ::-1] ** 2, axis=1)[:, ::-1]
        pair_var = var[1:] + var[:1]
        if self.problem.driver_uses_mean_field:
            lip = float(self.problem.lipschitz.get("driver", 1.0))
            steps_left = np.arange(nodes - 1, -1, -1, dtype=float)
            growth = (1.0 + lip * self.grid.dt / self.N) ** steps_left
            term_var = self.mean_se[:, -1] ** 2
            pair_var = pair_var + (growth**2 - 1.0) * (term_var[1:] + term_var[0])[:, None]
        se = np.sqrt(pair_var)
        floor = 1e-12 * (1.0 + float(np.abs(self.Y).max()))
        z = np.abs(means[1:] - means[0]) / np.maximum(se, floor)
        comparisons = (U - 1) * nodes
        allowed = max(3.0, float(ndtri(1.0 - 0.01 / (2.0 * comparisons))))
        return float(z.max()), allowed

    def check_invariants(self, *, skorokhod_tol: float = 1e-10, se_factor: float = 3.0) -> InvariantReport:
        """Reflection identities per universe plus exchangeability bands.

        The residual band is se_factor standard errors, Bonferroni-widened
        over the (N + 1) x steps universe-step comparisons at familywise
        level 1%: a fixed per-step multiple would flag a correct solve
        with probability approaching one as universes accumulate.
        """
        rep = InvariantReport()
        rep.add(
            "K starts at zero",
            bool(np.all(self.K[:, :, 0] == 0.0)),
            f"max |K_0| = {np.abs(self.K[:, :, 0]).max():.3g}",
        )
        dK = np.diff(self.K, axis=2)
        rep.add("K non-decreasing", bool(np.all(dK >= 0.0)), f"min increment = {dK.min():.3g}")
        worst = np.inf
        for j in range(self.universes):
            states = self.ensembles[j].states
            for i in range(self.grid.steps + 1):
                h = self.problem.obstacle_h(self.grid.node(i), states[:, i, :])
                worst = min(worst, float((self.Y[j, :, i] - h).min()))
        rep.add("Y above obstacle at every node", worst >= 0.0, f"min Y - h = {worst:.3g}")
        bound = skorokhod_tol * (1.0 + self.K[:, :, -1])
        excess = float((np.abs(self.skorokhod) - bound).max())
        rep.add("Skorokhod flat-off sum", excess <= 0.0, f"max |sum| - tol(1+K_T) = {excess:.3g}")
        floor = 1e-12 * (1.0 + float(np.abs(self.Y).max()))
        widened = max(se_factor, float(ndtri(1.0 - 0.01 / (2.0 * self.resid_mean.size))))
        ratio = np.abs(self.resid_mean) / np.maximum(widened * self.resid_se + floor, 1e-300)
        bad = int(np.sum(ratio > 1.0))
        rep.add(
            f"martingale residual within {widened:.2f} SE per step",
            bad == 0,
            f"{bad} of {self.resid_mean.size} universe-steps outside (max ratio {ratio.max():.2f})",
        )
        zmax, allowed = self.exchangeability_statistic()
        rep.add(
            "universes exchangeable",
            zmax <= allowed,
            f"max |mean_j - mean_0| = {zmax:.2f} SE vs {allowed:.2f} allowed",
        )
        return rep


def _terminal_roll(problem: MfProblem, xT: np.ndarray, j: int, N: int, sl: slice) -> np.ndarray:
    U = xT.shape[0]
    acc = np.zeros(xT[j, sl].shape[0])
    for k in range(1, N + 1):
        acc += np.asarray(problem.terminal_Phi(xT[j, sl], xT[(j + k) % U, sl]), dtype=float)
    return acc / N


def _particle_terminal(problem: MfProblem, xT: np.ndarray, N: int) -> np.ndarray:
    """Terminal values (N+1, B): Phi averaged over the N shifted universes."""
    U, B, _ = xT.shape
    if not problem.phi_mf:
        return np.stack([np.asarray(problem.terminal(xT[j], None, None), dtype=float) for j in range(U)])
    if problem.terminal_cross is None:
        return np.stack([_terminal_roll(problem, xT, j, N, slice(None)) for j in range(U)])
    cross = np.stack([_cross_columns(problem.terminal_cross(xT[j])) for j in range(U)])
    total = cross.sum(axis=0)
    xi = np.stack(
        [np.asarray(problem.terminal_base(xT[j], (total - cross[j]) / N), dtype=float) for j in range(U)]
    )
    sl = slice(0, min(B, _HOOK_SLICE))
    tol = _HOOK_TOL * (1.0 + float(np.abs(xi).max()))
    for j in {0, U // 2}:
        gap = float(np.abs(_terminal_roll(problem, xT, j, N, sl) - xi[j, sl]).max())
        if gap > tol:
            raise RuntimeError(
                f"terminal cross/base hooks disagree with the pairwise terminal by {gap:.3g} "
                f"on universe {j}; the declared split is not affine in the averaged statistic"
            )
    return xi


def _rolled_driver(
    problem: MfProblem,
    t: float,
    states: list,
    est: np.ndarray,
    y_next: np.ndarray,
    z: np.ndarray,
    j: int,
    N: int,
    sl: slice,
) -> np.ndarray:
    U = len(states)
    acc = np.zeros(y_next[sl].shape[0])
    for k in range(1, N + 1):
        kk = (j + k) % U
        if problem.driver_form == "yz_ytilde":
            acc += np.asarray(problem.driver_g(t, y_next[sl], z[sl], est[kk, sl]), dtype=float)
        else:
            acc += np.asarray(
                problem.driver_g(t, states[j][sl], states[kk][sl], est[kk, sl], y_next[sl], z[sl]),
                dtype=float,
            )
    return acc / N


def solve_rbsde_n(
    problem: MfProblem,
    N: int,
    sub_ensemble_size: int | None,
    grid: TimeGrid,
    seed: RngSeed | int,
    basis: RegressionBasis,
    *,
    coupling_passes: int = 2,
    keep_z: bool = True,
) -> ParticleSystemSolution:
    """Solve the reflected system of N+1 interacting universes.

    Universe j simulates its forward ensemble and Brownian increments
    from seed.child(j); the terminal condition and the driver's
    mean-field slots average over the N shifted universes row by row;
    reflection acts per universe through the discrete Snell step.
    sub_ensemble_size None picks the fixed-budget default
    max(10^4/(N+1), 500).

    The driver coupling at each node is resolved with coupling_passes
    fixed-point passes (two by default; problems without mean-field
    driver slots take a single pass and decouple).  keep_z=False drops
    the stored Z block, which at large ensembles halves the footprint;
    the residual diagnostics are computed either way.
    """
    if N < 1:
        raise ValueError(f"the interaction average over zero shifted copies is empty; N must be >= 1, got {N}")
    if not problem.bounded_coefficients:
        raise ValueError(
            f"problem {problem.name!r} does not declare bounded coefficients; "
            "the interacting-system construction requires a bounded terminal and driver"
        )
    if problem.driver_uses_ztilde:
        raise ValueError("drivers reading the mean-field z-slot are not supported by the particle system")
    if not problem.has_obstacle:
        raise ValueError(f"problem {problem.name!r} has no obstacle")
    if coupling_passes < 1:
        raise ValueError(f"coupling_passes must be >= 1, got {coupling_passes}")
    if isinstance(seed, int):
        seed = RngSeed(seed=seed)
    B = default_sub_ensemble(N) if sub_ensemble_size is None else int(sub_ensemble_size)
    if B < 2:
        raise ValueError(f"sub_ensemble_size must be at least 2, got {B}")

    U = N + 1
    M = grid.steps
    dt = grid.dt
    d = problem.noise_dim
    noises: list[NoiseEnsemble] = []
    ensembles: list[PathEnsemble] = []
    for j in range(U):
        nz = sample_brownian(grid, B, d, seed.child(j))
        noises.append(nz)
        ensembles.append(simulate_law_ensemble(problem, grid, nz))

    xT = np.stack([ens.terminal_states for ens in ensembles])
    xi = _particle_terminal(problem, xT, N)
    for j in range(U):
        hT = np.asarray(problem.obstacle_h(grid.horizon, xT[j]), dtype=float)
        shortfall = float((xi[j] - hT).min())
        if shortfall < -1e-12 * (1.0 + float(np.abs(xi[j]).max())):
            raise ValueError(
                f"universe {j}: terminal value falls below the obstacle (worst gap {shortfall:.3g}); "
                "reflected solve requires h(T, x) <= terminal payoff"
            )
        xi[j] = np.maximum(xi[j], hT)

    mf = problem.driver_uses_mean_field
    hooks = mf and problem.driver_cross is not None
    passes = coupling_passes if mf else 1
    spot_universes = {0, U // 2}
    spot = slice(0, min(B, _HOOK_SLICE))

    Y = np.empty((U, B, M + 1))
    Y[:, :, M] = xi
    K = np.zeros((U, B, M + 1))
    Z = np.empty((U, B, M, d)) if keep_z else None
    resid_mean = np.zeros((U, M))
    resid_se = np.zeros((U, M))
    skor = np.zeros((U, B))
    # CLT scale of each universe's node mean: target spread at regression
    # nodes (fitted values can be degenerate when states coincide), value
    # spread at the terminal node where Y is the raw payoff
    mean_se = np.zeros((U, M + 1))
    mean_se[:, M] = xi.std(axis=1) / math.sqrt(B)

    for i in range(M - 1, -1, -1):
        t = grid.node(i)
        states = []
        factors = []
        levers = []
        zfits = []
        ztgts = []
        obstacles = []
        for j in range(U):
            st = ensembles[j].at_node(i)
            factor = DesignFactor(st, basis)
            lever = factor.leverage()
            y_next = Y[j, :, i + 1]
            z_targets = y_next[:, None] * noises[j].increments[:, i, :] / dt
            zj = factor.fit(z_targets).fitted
            if keep_z:
                Z[j, :, i, :] = zj
            states.append(st)
            factors.append(factor)
            levers.append(lever)
            zfits.append(zj)
            ztgts.append(z_targets)
            obstacles.append(np.asarray(problem.obstacle_h(t, st), dtype=float))
        for pass_idx in range(passes):
            # snapshot of the shifted copies' current estimates: next-node
            # values on the first pass, current-node regressed values after
            est = Y[:, :, i + 1] if pass_idx == 0 else Y[:, :, i].copy()
            cbar = None
            if hooks:
                cross = np.stack(
                    [_cross_columns(problem.driver_cross(t, states[j], est[j])) for j in range(U)]
                )
                cbar = (cross.sum(axis=0) - cross) / N
            final = pass_idx == passes - 1
            for j in range(U):
                y_next = Y[j, :, i + 1]
                zj = zfits[j]
                if not mf:
                    drv = problem.driver(t, states[j], y_next, zj, None, None)
                elif hooks:
                    drv = np.asarray(problem.driver_base(t, states[j], y_next, zj, cbar[j]), dtype=float)
                    if i == M - 1 and pass_idx == 0 and j in spot_universes:
                        rolled = _rolled_driver(problem, t, states, est, y_next, zj, j, N, spot)
                        gap = float(np.abs(rolled - drv[spot]).max())
                        if gap > _HOOK_TOL * (1.0 + float(np.abs(rolled).max())):
                            raise RuntimeError(
                                f"driver cross/base hooks disagree with the pairwise driver by {gap:.3g} "
                                f"on universe {j}; the declared split is not affine in the averaged statistic"
                            )
                else:
                    drv = _rolled_driver(problem, t, states, est, y_next, zj, j, N, slice(None))
                U_vec = y_next + drv * dt
                cfit = factors[j].fit(U_vec)
                C = cfit.fitted
                Ynew = np.maximum(C, obstacles[j])
                Y[j, :, i] = Ynew
                if final:
                    dK = Ynew - C
                    K[j, :, i + 1] = dK
                    skor[j] += (Ynew - obstacles[j]) * dK
                    mean_se[j, i] = U_vec.std() / math.sqrt(B)
                    dw = noises[j].increments[:, i, :]
                    omh = np.maximum(1.0 - levers[j], 1e-12)[:, None]
                    z_loo = (zj - levers[j][:, None] * ztgts[j]) / omh
                    zdw = (z_loo * dw).sum(axis=1)
                    resid = U_vec - C - zdw
                    resid_mean[j, i] = resid.mean()
                    quad = 2.0 * d * float(levers[j] @ y_next**2) / B**2
                    resid_se[j, i] = np.sqrt(((zdw**2).mean() + resid.var()) / B + quad)

    np.cumsum(K[:, :, 1:], axis=2, out=K[:, :, 1:])
    return ParticleSystemSolution(
        grid=grid,
        problem=problem,
        N=N,
        Y=Y,
        Z=Z,
        K=K,
        ensembles=tuple(ensembles),
        resid_mean=resid_mean,
        resid_se=resid_se,
        skorokhod=skor,
        mean_se=mean_se,
        coupling_passes=passes,
    )


@dataclass(frozen=True)
class ConvergenceReport:
    """Interaction-size sweep against the mean-field limit.

    errors[i] is the common-noise pathwise error of universe 0 at
    N_list[i]: the root mean square over particles of the per-path sup
    over nodes of Y^N - Y^limit, where the limit runs the classical
    mean-field solver on universe 0's own ensemble and increments, so
    forward sampling and regression noise cancel path by path and the
    interaction error is measured directly.  probe_gaps compares pooled
    means against the supplied independent reference at the probe nodes
    and carries that reference's own Monte Carlo floor; it is reported,
    not fitted.  The rate is the log-log slope of errors against N with
    a 95% confidence interval.
    """

    problem: str
    N_list: tuple
    sub_ensembles: tuple
    errors: tuple
    k_errors: tuple
    probe_times: tuple
    probe_means: np.ndarray             # (len(N_list), probes) pooled
    reference_probe_means: np.ndarray   # (probes,)
    probe_gaps: np.ndarray              # (len(N_list), probes)
    rate: float
    rate_ci: tuple
    rate_note: str

    def rows(self) -> list[dict]:
        out = []
        for i, n in enumerate(self.N_list):
            row = {
                "N": n,
                "sub_ensemble": self.sub_ensembles[i],
                "y_error": self.errors[i],
                "k_terminal_error": self.k_errors[i],
                "rate": self.rate,
            }
            for q, tq in enumerate(self.probe_times):
                row[f"probe_gap_t{tq:g}"] = float(self.probe_gaps[i, q])
            out.append(row)
        return out

    def __str__(self) -> str:
        lines = [f"particle convergence, problem {self.problem}:"]
        for i, n in enumerate(self.N_list):
            lines.append(
                f"  N={n:4d} B={self.sub_ensembles[i]:5d} "
                f"error={self.errors[i]:.5f} k_err={self.k_errors[i]:.5f} "
                f"max probe gap={self.probe_gaps[i].max():.5f}"
            )
        lines.append(
            f"  rate = {self.rate:.3f} (95% CI [{self.rate_ci[0]:.3f}, {self.rate_ci[1]:.3f}]) {self.rate_note}"
        )
        return "\n".join(lines)


def convergence_study(
    problem: MfProblem,
    N_list,
    reference: BackwardSolution,
    *,
    seed: RngSeed | int,
    basis: RegressionBasis,
    sub_ensemble_size: int | None = None,
    total_budget: int | None = None,
    coupling_passes: int = 2,
    probe_fractions=(0.0, 0.25, 0.5, 0.75, 1.0),
) -> ConvergenceReport:
    """Error of the N-interaction system against the mean-field limit.

    The universes' sub-streams are shared across every N (universe j
    always draws from seed.child(j)), so the error sequence is evaluated
    under common random numbers and decreases monotonically without the
    independent-run scatter.  reference must be a reflected mean-field
    solve of the same problem on the same grid; it anchors the pooled
    probe-mean table and the terminal-K comparison.

    Sizing: sub_ensemble_size fixes the per-universe count across the
    sweep; total_budget instead fixes the total particle count, so each
    N gets total_budget // (N + 1) per universe.  A fixed total keeps
    the regression-noise floor at the largest N from masking the 1/N
    interaction error at the smallest.  At most one may be given; with
    neither, each N uses the per-universe default.
    """
    N_list = [int(n) for n in N_list]
    if len(N_list) < 2:
        raise ValueError("need at least two interaction sizes to study convergence")
    if any(n < 1 for n in N_list) or any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError(f"N_list must be strictly increasing positive sizes, got {N_list}")
    if sub_ensemble_size is not None and total_budget is not None:
        raise ValueError("give sub_ensemble_size or total_budget, not both")
    if total_budget is not None and total_budget // (max(N_list) + 1) < 100:
        raise ValueError(
            f"total budget {total_budget} leaves fewer than 100 particles per "
            f"universe at N={max(N_list)}"
        )
    if reference.problem.name != problem.name:
        raise ValueError(
            f"reference solves {reference.problem.name!r}, not {problem.name!r}"
        )
    if reference.start_index != 0:
        raise ValueError("reference must cover the full grid")
    if reference.diagnostics.mode != "reflected":
        raise ValueError(f"reference must be a reflected solve, got mode {reference.diagnostics.mode!r}")
    if isinstance(seed, int):
        seed = RngSeed(seed=seed)
    grid = reference.grid

    probe_nodes = sorted({int(round(f * grid.steps)) for f in probe_fractions})
    probe_times = tuple(grid.node(i) for i in probe_nodes)
    ref_probe = reference.Y[:, probe_nodes].mean(axis=0)
    ref_k = float(reference.K[:, -1].mean())

    errors = []
    k_errors = []
    sub_sizes = []
    probe_means = []
    for n in N_list:
        size = total_budget // (n + 1) if total_budget is not None else sub_ensemble_size
        sol = solve_rbsde_n(
            problem, n, size, grid, seed, basis,
            coupling_passes=coupling_passes, keep_z=False,
        )
        ens0 = sol.ensembles[0]
        noise0 = sample_brownian(grid, ens0.particles, problem.noise_dim, ens0.noise_key)
        limit = solve_reflected(problem, ens0, noise0, basis, keep_fits=False)
        gap = sol.Y[0] - limit.Y
        errors.append(float(np.sqrt(np.mean(np.max(gap**2, axis=1)))))
        k_errors.append(abs(float(sol.K[:, :, -1].mean()) - ref_k))
        sub_sizes.append(sol.sub_ensemble)
        probe_means.append(sol.Y[:, :, probe_nodes].mean(axis=(0, 1)))

    probe_means = np.asarray(probe_means)
    probe_gaps = np.abs(probe_means - ref_probe[None, :])
    rate, ci, note = _loglog_rate(np.asarray(N_list, dtype=float), np.asarray(errors))
    return ConvergenceReport(
        problem=problem.name,
        N_list=tuple(N_list),
        sub_ensembles=tuple(sub_sizes),
        errors=tuple(errors),
        k_errors=tuple(k_errors),
        probe_times=probe_times,
        probe_means=probe_means,
        reference_probe_means=ref_probe,
        probe_gaps=probe_gaps,
        rate=rate,
        rate_ci=ci,
        rate_note=note,
    )


def _loglog_rate(sizes: np.ndarray, errors: np.ndarray) -> tuple[float, tuple, str]:
    if np.any(errors <= 0.0):
        return float("nan"), (float("nan"), float("nan")), "degenerate: zero error (decoupled system)"
    x = np.log(sizes)
    y = np.log(errors)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ y) / sxx
    intercept = float(y.mean())
    dof = len(x) - 2
    if dof < 1:
        return slope, (float("nan"), float("nan")), "two points: no residual degrees of freedom"
    resid = y - intercept - slope * xc
    se = math.sqrt(float(resid @ resid) / dof / sxx)
    from scipy.stats import t as student_t

    half = float(student_t.ppf(0.975, dof)) * se
    return slope, (slope - half, slope + half), ""


@dataclass(frozen=True)
class CounterexampleReport:
    """Ordered data, unordered solutions: the two-horizon system.

    The terminal payoffs satisfy xi >= xi' = 0 everywhere, and the zero
    system solves to the zero triplet exactly, yet the solved Y turns
    negative at t = 1 on a set of paths whose probability the analytic
    value predicts; monotone data does not order the solutions.
    """

    constants: Example31Constants
    interaction: int
    sub_ensemble: int
    mc_size: int
    violation_fraction: float
    order_fraction: float
    yprime_max_abs: float
    kprime_terminal_max: float

    @property
    def expected_violation(self) -> float:
        return self.constants.violation_probability

    @property
    def violation_gap(self) -> float:
        return abs(self.violation_fraction - self.expected_violation)

    def rows(self) -> list[dict]:
        return [
            {
                "interaction": self.interaction,
                "sub_ensemble": self.sub_ensemble,
                "mc_size": self.mc_size,
                "violation_fraction": self.violation_fraction,
                "expected_violation": self.expected_violation,
                "violation_gap": self.violation_gap,
                "order_fraction": self.order_fraction,
                "yprime_max_abs": self.yprime_max_abs,
                "kprime_terminal_max": self.kprime_terminal_max,
            }
        ]

    def __str__(self) -> str:
        return (
            f"comparison counterexample (N={self.interaction}, {self.mc_size} particles):\n"
            f"  P(Y_1 < 0) = {self.violation_fraction:.4f} vs analytic {self.expected_violation:.4f} "
            f"(gap {self.violation_gap:.4f})\n"
            f"  P(xi > xi') = {self.order_fraction:.4f}; zero-data solution: "
            f"max |Y'| = {self.yprime_max_abs:.3g}, max K'_T = {self.kprime_terminal_max:.3g}"
        )


def comparison_counterexample(
    mc_size: int,
    grid: TimeGrid,
    *,
    seed: RngSeed | int = 1201,
    interaction: int = 32,
    basis: RegressionBasis | None = None,
) -> CounterexampleReport:
    """Solve the two-horizon system twice: payoff |W_1|^2 /\\ 1 and payoff 0.

    The zero-payoff system has the exact solution (0, 0, 0), which the
    solver reproduces bitwise (all regression targets vanish).  The
    original system's Y at t = 1 equals xi minus a positive threshold in
    conditional mean, so it dips negative with the analytic probability
    even though the terminal data dominate xi' = 0 everywhere.  The
    interaction size only has to be large enough that the neighbour
    average tracks the mean; the default keeps its bias well below the
    Monte Carlo resolution of the reported fraction.
    """
    if abs(grid.horizon - 2.0) > 1e-12:
        raise ValueError(f"the two-horizon construction needs T = 2, got horizon {grid.horizon}")
    i1 = grid.index_of(1.0)
    if interaction < 1:
        raise ValueError(f"interaction must be >= 1, got {interaction}")
    B = int(mc_size) // (interaction + 1)
    if B < 100:
        raise ValueError(
            f"mc_size {mc_size} leaves fewer than 100 particles per universe "
            f"at interaction {interaction}"
        )
    if basis is None:
        basis = RegressionBasis("piecewise_linear", bins=10)

    problem = example31_problem()
    zero_problem = replace(
        problem,
        name="example31_zero",
        terminal_Phi=lambda x, xt: np.zeros(x.shape[0]),
        bounds={"terminal": 0.0, "obstacle": math.e**2},
    )
    sol = solve_rbsde_n(problem, interaction, B, grid, seed, basis, keep_z=False)
    prime = solve_rbsde_n(zero_problem, interaction, B, grid, seed, basis, keep_z=False)
    return CounterexampleReport(
        constants=example31_constants(),
        interaction=interaction,
        sub_ensemble=B,
        mc_size=(interaction + 1) * B,
        violation_fraction=float(np.mean(sol.Y[:, :, i1] < 0.0)),
        order_fraction=float(np.mean(sol.Y[:, :, -1] > prime.Y[:, :, -1])),
        yprime_max_abs=float(np.abs(prime.Y).max()),
        kprime_terminal_max=float(prime.K[:, :, -1].max()),
    )

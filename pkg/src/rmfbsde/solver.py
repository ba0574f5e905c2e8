"""Backward least-squares Monte Carlo solver for (reflected) BSDEs.

One engine drives every variant. Per backward step i:

1. Z_i  = projection of Y_{i+1} dW_i / dt onto basis(X_i).
2. U    = Y_{i+1} + driver(t_i, X_i, Y_{i+1}, Z_i, mean-field slots) dt,
          plus the explicit penalty term when penalizing at small n dt.
3. C_i  = projection of U onto basis(X_i) (continuation value).
4. Y_i  = C_i, or max(C_i, h_i) when reflecting, or the nodewise implicit
          penalty update when n dt is large.

The driver is explicit in the own pair (Y_{i+1}, Z_i); mean-field slots
read node-i values frozen from the previous Picard sweep, so each sweep
solves a classical BSDE and the outer loop iterates the coupling to a
fixed point. Both projections per node share one design factorization.
Knots, Cholesky, and leverage are cached across sweeps (the states do
not change), while the design matrix itself is rebuilt per sweep: at
10^5 particles and hundreds of nodes, keeping every design matrix alive
would cost gigabytes.

Reflection is a discrete Snell step: dK_i = Y_i - C_i is nonnegative and
vanishes off the obstacle, so K_0 = 0, monotonicity of K, Y >= h at
nodes, and the flat-off (Skorokhod) sum being zero all hold exactly in
floating point, not just in the limit.

The martingale residual diagnostic per step is U - C_i - Z_i^loo dW_i,
the flux imbalance of the discrete equation with a leave-one-out Z. Two
subtleties make the naive residual useless as a test statistic. First,
the in-sample Z is fitted from the same particles it multiplies, and the
self-influence terms bias mean(Z dW) by about trace(smoother)/P times
mean(Y); the leave-one-out correction (Z - lev * target)/(1 - lev)
removes that bias exactly for a linear smoother. Second, since the
continuation fit preserves ensemble means, mean(U - C) = 0 identically
and the mean residual is literally -mean(Z^loo dW), whose sampling
scale is rms(Z dW)/sqrt(P) - the cross-sectional deviation of the
near-cancelled residual underestimates it severalfold. The reported SE
therefore combines both terms; against it the per-step mean is a clean
z-statistic, standard normal under the scheme's own null.

One further guard: when the true Z is (locally) constant, Z^loo dW is a
pure quadratic form in the step noise, and its realized magnitude is
proportional to the same chi-square draw that drives mean(Z^loo dW), so
on draws near zero the empirical SE collapses while the mean keeps a
floor from the removed diagonal. The SE therefore adds the
unconditional variance of that quadratic form, 2 d sum_p lev_p
Y_{i+1,p}^2 / P^2, which is negligible whenever Z carries real signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import DesignFactor, RegressionBasis, RegressionFit
from .forward import PathEnsemble, state_atoms
from .meanfield import joint_atoms, scalar_atoms
from .problems import MfProblem
from .stochastic import NoiseEnsemble, TimeGrid

__all__ = [
    "ConvergenceFailureError",
    "SolveDiagnostics",
    "BackwardSolution",
    "ComparisonReport",
    "InvariantReport",
    "solve_bsde",
    "solve_reflected",
    "comparison_check",
    "check_reflection_invariants",
]

SCALAR_ATOMS = 64
JOINT_ATOMS = 256
TOL_PICARD = 1e-6
MAX_SWEEPS = 25


class ConvergenceFailureError(RuntimeError):
    """Picard iteration failed to reach tolerance; gaps carried along."""

    def __init__(self, message: str, gaps: list) -> None:
        super().__init__(message)
        self.gaps = list(gaps)


@dataclass(frozen=True)
class SolveDiagnostics:
    martingale_residual_mean: np.ndarray  # (steps,)
    martingale_residual_se: np.ndarray    # (steps,)
    skorokhod_sum: np.ndarray             # (P,) sum_i (Y_i - h_i) dK_i
    picard_sweeps: int
    picard_gaps: tuple
    mode: str                             # "plain" | "reflected" | "penalized:<n>"


@dataclass(frozen=True)
class BackwardSolution:
    """Triplet (Y, Z, K) on the node suffix [start_index, M] plus fits.

    Y[:, j], K[:, j] live at node start_index + j; Z[:, j] and the
    diagnostics' step entries belong to the step from node start_index + j
    to the next node. continuation_fits[j] is the fitted continuation
    function at node start_index + j, re-evaluable at arbitrary states.
    """

    grid: TimeGrid
    Y: np.ndarray
    Z: np.ndarray
    K: np.ndarray
    diagnostics: SolveDiagnostics
    problem: MfProblem
    start_index: int = 0
    continuation_fits: tuple = ()

    def __post_init__(self) -> None:
        P, nodes = self.Y.shape
        steps = self.grid.steps - self.start_index
        if nodes != steps + 1 or self.Z.shape[:2] != (P, steps) or self.K.shape != (P, nodes):
            raise ValueError(
                f"inconsistent solution shapes Y{self.Y.shape} Z{self.Z.shape} K{self.K.shape}"
            )
        if np.any(self.K[:, 0] != 0.0):
            raise ValueError("K must start at exactly zero")
        if steps and np.any(np.diff(self.K, axis=1) < 0.0):
            raise ValueError("K must be non-decreasing")

    @property
    def particles(self) -> int:
        return self.Y.shape[0]

    def node_time(self, j: int) -> float:
        return self.grid.node(self.start_index + j)

    def value_at(self, j: int, states: np.ndarray) -> np.ndarray:
        """Fitted value function at step index j evaluated at new states."""
        if not self.continuation_fits or j >= len(self.continuation_fits):
            raise ValueError(f"no stored continuation fit at step {j}")
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        v = self.continuation_fits[j].predict(states)
        if self.problem.has_obstacle and self.diagnostics.mode == "reflected":
            v = np.maximum(v, self.problem.obstacle_h(self.node_time(j), states))
        return v


@dataclass(frozen=True)
class ComparisonReport:
    """Per-node fractions of particles with Y_a > Y_b beyond tolerance."""

    times: np.ndarray
    violation_fraction: np.ndarray
    tolerance: str

    @property
    def max_violation(self) -> float:
        return float(self.violation_fraction.max())


@dataclass
class InvariantReport:
    checks: list = field(default_factory=list)

    def add(self, name: str, passed: bool, detail: str) -> None:
        self.checks.append((name, bool(passed), detail))

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def __str__(self) -> str:
        lines = ["reflection invariants: " + ("OK" if self.passed else "VIOLATIONS")]
        lines += [f"  [{'pass' if ok else 'FAIL'}] {n}: {d}" for n, ok, d in self.checks]
        return "\n".join(lines)


def _obstacle_matrix(problem: MfProblem, X: PathEnsemble) -> np.ndarray:
    nodes = X.states.shape[1]
    H = np.empty((X.particles, nodes))
    for j in range(nodes):
        H[:, j] = problem.obstacle_h(X.grid.node(X.start_index + j), X.states[:, j, :])
    return H


def _terminal_values(problem: MfProblem, X: PathEnsemble, external_atoms) -> np.ndarray:
    xT = X.terminal_states
    if not problem.phi_mf:
        return problem.terminal(xT, None, None)
    if external_atoms is not None:
        atoms, w = external_atoms[X.grid.steps]
        return problem.terminal(xT, atoms["xtilde"], w)
    atoms, w = state_atoms(xT, JOINT_ATOMS)
    return problem.terminal(xT, atoms, w)


def _solve_backward(
    problem: MfProblem,
    X: PathEnsemble,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
    *,
    reflect: bool,
    penalty_n: int | None = None,
    external_atoms=None,
    tol_picard: float = TOL_PICARD,
    max_sweeps: int = MAX_SWEEPS,
    keep_fits: bool = True,
) -> BackwardSolution:
    """Shared engine; see module docstring for the per-step scheme.

    external_atoms, when given, maps global node index -> (atoms dict,
    weights) and replaces the self-consistent Picard coupling (used when
    the mean-field terms belong to an exogenous frozen law).
    """
    grid = X.grid
    if noise.grid != grid:
        raise ValueError("noise grid mismatch with path ensemble")
    if noise.particles != X.particles:
        raise ValueError(f"noise particles {noise.particles} != ensemble particles {X.particles}")
    if noise.dim != problem.noise_dim:
        raise ValueError(f"noise dim {noise.dim} != problem noise dim {problem.noise_dim}")
    if reflect and penalty_n is not None:
        raise ValueError("reflection and penalization are mutually exclusive")
    if penalty_n is not None and penalty_n < 1:
        raise ValueError(f"penalty level must be >= 1, got {penalty_n}")
    if (reflect or penalty_n is not None) and not problem.has_obstacle:
        raise ValueError(f"problem {problem.name!r} has no obstacle")

    s0 = X.start_index
    M = grid.steps
    steps = M - s0
    dt = grid.dt
    P = X.particles
    d = problem.noise_dim

    H = _obstacle_matrix(problem, X) if problem.has_obstacle else None
    xi = _terminal_values(problem, X, external_atoms)
    if reflect:
        shortfall = float((xi - H[:, -1]).min())
        if shortfall < -1e-12 * (1.0 + float(np.abs(xi).max())):
            raise ValueError(
                f"terminal value falls below the obstacle (worst gap {shortfall:.3g}); "
                "reflected solve requires h(T, x) <= terminal payoff"
            )
        xi = np.maximum(xi, H[:, -1])  # exact Y >= h at the terminal node

    mf = problem.driver_uses_mean_field and external_atoms is None
    explicit_penalty = penalty_n is not None and penalty_n * dt <= 0.5

    def atoms_for(i: int, prev_Y: np.ndarray | None):
        if problem.driver_form in ("none", "yz"):
            return None, None
        if external_atoms is not None:
            return external_atoms[i]
        j = i - s0
        if problem.driver_form == "yz_ytilde":
            a, w = scalar_atoms(prev_Y[:, j], SCALAR_ATOMS)
            return {"ytilde": a}, w
        st = X.at_node(i)
        cols, w = joint_atoms(st[:, 0], {"xtilde": st, "ytilde": prev_Y[:, j]}, JOINT_ATOMS)
        return cols, w

    # per-node (expansion, chol, leverage); design matrices are rebuilt
    node_cache: list[tuple | None] = [None] * steps
    prev_Y = np.tile(xi[:, None], (1, steps + 1)) if mf else None
    gaps: list[float] = []
    sweeps = 0

    while True:
        sweeps += 1
        Y = np.empty((P, steps + 1))
        Z = np.zeros((P, steps, d))
        dK = np.zeros((P, steps))
        fits: list[RegressionFit | None] = [None] * steps
        resid_mean = np.zeros(steps)
        resid_se = np.zeros(steps)
        Y[:, steps] = xi
        for i in range(M - 1, s0 - 1, -1):
            j = i - s0
            st = X.at_node(i)
            if node_cache[j] is None:
                factor = DesignFactor(st, basis)
                node_cache[j] = (factor.expansion, factor.chol, factor.leverage())
            else:
                # states unchanged across sweeps: reuse knots and Cholesky
                expansion, chol, _ = node_cache[j]
                factor = DesignFactor(st, expansion, chol=chol)
            lever = node_cache[j][2]
            dw = noise.increments[:, i, :]
            y_next = Y[:, j + 1]
            z_targets = y_next[:, None] * dw / dt
            z = factor.fit(z_targets)
            Z[:, j, :] = z.fitted
            atoms, w = atoms_for(i, prev_Y)
            drv = problem.driver(grid.node(i), st, y_next, Z[:, j, :], atoms, w)
            U = y_next + drv * dt
            if explicit_penalty:
                U = U + (penalty_n * dt) * np.maximum(H[:, j + 1] - y_next, 0.0)
            c_fit = factor.fit(U)
            C = c_fit.fitted
            if reflect:
                Y[:, j] = np.maximum(C, H[:, j])
                dK[:, j] = Y[:, j] - C
            elif penalty_n is not None:
                if explicit_penalty:
                    Y[:, j] = C
                else:
                    # stiff regime: nodewise implicit penalty, monotone in n
                    a = penalty_n * dt
                    Y[:, j] = np.where(C >= H[:, j], C, (C + a * H[:, j]) / (1.0 + a))
                dK[:, j] = (penalty_n * dt) * np.maximum(H[:, j] - Y[:, j], 0.0)
            else:
                Y[:, j] = C
            # honest flux residual: leave-one-out Z kills self-influence
            # bias, and the SE carries the full rms(Z dW) scale (see the
            # module docstring for why std(resid)/sqrt(P) is too small).
            omh = np.maximum(1.0 - lever, 1e-12)[:, None]
            z_loo = (Z[:, j, :] - lever[:, None] * z_targets) / omh
            zdw = (z_loo * dw).sum(axis=1)
            resid = U - C - zdw
            resid_mean[j] = resid.mean()
            # the quadratic-form floor keeps the SE honest when Z ~ const
            quad = 2.0 * d * float(lever @ y_next**2) / P**2
            resid_se[j] = np.sqrt(((zdw**2).mean() + resid.var()) / P + quad)
            if keep_fits:
                fits[j] = c_fit.strip()
        if not mf:
            break
        gap_abs = float(((Y - prev_Y) ** 2).mean(axis=0).max())
        scale = max(1e-8, float((Y**2).mean(axis=0).max()))
        gaps.append(gap_abs / scale)
        prev_Y = Y
        if gaps[-1] < tol_picard:
            break
        if sweeps >= max_sweeps:
            raise ConvergenceFailureError(
                f"Picard iteration did not reach tol {tol_picard:g} after {max_sweeps} sweeps "
                f"(last gap {gaps[-1]:.3g})",
                gaps,
            )

    K = np.zeros((P, steps + 1))
    np.cumsum(dK, axis=1, out=K[:, 1:])
    if problem.has_obstacle and (reflect or penalty_n is not None):
        skorokhod = ((Y[:, :steps] - H[:, :steps]) * dK).sum(axis=1)
    else:
        skorokhod = np.zeros(P)
    mode = "reflected" if reflect else (f"penalized:{penalty_n}" if penalty_n else "plain")
    diag = SolveDiagnostics(
        martingale_residual_mean=resid_mean,
        martingale_residual_se=resid_se,
        skorokhod_sum=skorokhod,
        picard_sweeps=sweeps,
        picard_gaps=tuple(gaps),
        mode=mode,
    )
    return BackwardSolution(
        grid=grid,
        Y=Y,
        Z=Z,
        K=K,
        diagnostics=diag,
        problem=problem,
        start_index=s0,
        continuation_fits=tuple(fits) if keep_fits else (),
    )


def solve_bsde(
    problem: MfProblem,
    X: PathEnsemble,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
    *,
    ignore_obstacle: bool = False,
    external_atoms=None,
    tol_picard: float = TOL_PICARD,
    max_sweeps: int = MAX_SWEEPS,
    keep_fits: bool = True,
) -> BackwardSolution:
    """Unreflected backward solve; K stays identically zero."""
    if problem.has_obstacle and not ignore_obstacle:
        raise ValueError(
            f"problem {problem.name!r} declares an obstacle; use solve_reflected "
            "or pass ignore_obstacle=True"
        )
    return _solve_backward(
        problem, X, noise, basis,
        reflect=False, external_atoms=external_atoms,
        tol_picard=tol_picard, max_sweeps=max_sweeps, keep_fits=keep_fits,
    )


def solve_reflected(
    problem: MfProblem,
    X: PathEnsemble,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
    *,
    external_atoms=None,
    tol_picard: float = TOL_PICARD,
    max_sweeps: int = MAX_SWEEPS,
    keep_fits: bool = True,
) -> BackwardSolution:
    """Reflected backward solve via the discrete Snell max-construction."""
    return _solve_backward(
        problem, X, noise, basis,
        reflect=True, external_atoms=external_atoms,
        tol_picard=tol_picard, max_sweeps=max_sweeps, keep_fits=keep_fits,
    )


def comparison_check(
    problem_a: MfProblem,
    problem_b: MfProblem,
    X: PathEnsemble,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
    *,
    se_factor: float = 3.0,
) -> ComparisonReport:
    """Empirical comparison principle under common random numbers.

    Solves both problems on the identical ensemble and noise and reports,
    per node, the fraction of particles with Y_a > Y_b by more than
    se_factor times the combined regression standard error. Drivers that
    read the mean-field z-slot are refused: no ordering theorem covers
    them, so a certificate would be vacuous.
    """
    for p in (problem_a, problem_b):
        if p.driver_uses_ztilde:
            raise ValueError(
                f"problem {p.name!r} declares a z-dependent mean-field slot; "
                "comparison is not certified for such drivers"
            )

    def run(p: MfProblem) -> BackwardSolution:
        if p.has_obstacle:
            return solve_reflected(p, X, noise, basis)
        return solve_bsde(p, X, noise, basis)

    sol_a, sol_b = run(problem_a), run(problem_b)
    steps = X.grid.steps - X.start_index
    frac = np.zeros(steps + 1)
    for j in range(steps):
        st = X.at_node(X.start_index + j)
        tol = se_factor * (
            sol_a.continuation_fits[j].pointwise_se(st)[:, 0]
            + sol_b.continuation_fits[j].pointwise_se(st)[:, 0]
        )
        frac[j] = np.mean(sol_a.Y[:, j] > sol_b.Y[:, j] + tol)
    frac[steps] = np.mean(sol_a.Y[:, steps] > sol_b.Y[:, steps])
    times = X.grid.nodes[X.start_index :]
    return ComparisonReport(
        times=times,
        violation_fraction=frac,
        tolerance=f"{se_factor} combined regression standard errors",
    )


def check_reflection_invariants(
    solution: BackwardSolution,
    X: PathEnsemble,
    *,
    skorokhod_tol: float = 1e-10,
    se_factor: float = 3.0,
) -> InvariantReport:
    """Verify the discrete reflection identities on a finished solve."""
    rep = InvariantReport()
    K, Y = solution.K, solution.Y
    rep.add("K starts at zero", bool(np.all(K[:, 0] == 0.0)), f"max |K_0| = {np.abs(K[:, 0]).max():.3g}")
    dK = np.diff(K, axis=1)
    rep.add("K non-decreasing", bool(np.all(dK >= 0.0)), f"min increment = {dK.min() if dK.size else 0.0:.3g}")
    problem = solution.problem
    if problem.has_obstacle:
        H = _obstacle_matrix(problem, X)
        worst = float((Y - H).min())
        rep.add("Y above obstacle at every node", worst >= 0.0, f"min Y - h = {worst:.3g}")
        bound = skorokhod_tol * (1.0 + K[:, -1])
        excess = float((np.abs(solution.diagnostics.skorokhod_sum) - bound).max())
        rep.add(
            "Skorokhod flat-off sum",
            excess <= 0.0,
            f"max |sum| - tol(1+K_T) = {excess:.3g}",
        )
    mean = solution.diagnostics.martingale_residual_mean
    se = solution.diagnostics.martingale_residual_se
    # tiny absolute floor so exactly-degenerate steps do not trip on roundoff
    floor = 1e-12 * (1.0 + float(np.abs(Y).max()))
    ratio = np.abs(mean) / np.maximum(se_factor * se + floor, 1e-300)
    bad = int(np.sum(ratio > 1.0))
    rep.add(
        f"martingale residual within {se_factor} SE per step",
        bad == 0,
        f"{bad} of {mean.size} steps outside (max ratio {ratio.max():.2f})",
    )
    return rep

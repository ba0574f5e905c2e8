"""Finite-difference solver for the nonlocal obstacle problem in one space dimension.

The value function u(t, x) of the reflected system solves

    min{ u - h,  -du/dt - A u - F[u] } = 0,        u(T, x) = mean Phi(x, X_T),

where A u = (1/2) sbar(t,x)^2 u_xx + bbar(t,x) u_x with sbar, bbar the
law-averaged coefficients, and the nonlocal source

    F[u](t, x) = mean over law atoms X of f(t, x, X, u(t, X), u(t, x), Du sbar)

reads the solution itself at the atom positions.  The penalized variant
replaces the constraint by the source term n (u - h)^- and converges to
the obstacle solution from below as n grows.

Scheme: backward time stepping, implicit (tridiagonal) or explicit in the
diffusion/advection operator, always explicit in the nonlocal source with
one predictor-corrector pass (the dependence is zero order, so a single
correction removes the O(dt) lag).  The penalty term is folded in
semi-implicitly, u <- h + (u* - h) / (1 + n dt) where u* undershoots, so
stiffness in n never restricts the time step; the obstacle variant
projects u <- max(u*, h) instead.  Space is truncated to a window sized
by the diffusion scale, with Dirichlet values pinned to the terminal
profile at the two edges; law atoms that leave the window during the
nonlocal evaluation are clamped to the edge and counted, and a run is
flagged invalid when more than 0.1% of atom reads clamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .basis import RegressionBasis
from .forward import FORWARD_ATOMS, PathEnsemble, simulate_flow, state_atoms
from .meanfield import joint_atoms
from .problems import MfProblem
from .solver import solve_bsde, solve_reflected
from .stochastic import NoiseEnsemble, RngSeed, TimeGrid, sample_brownian

# explicit stepping is stable for the 3-point stencil when the diffusion
# number (1/2) sbar^2 dt / dx^2 stays below 1/2, i.e. dt <= dx^2 / sbar^2,
# and the advection Courant number |bbar| dt / dx stays below 1
CFL_DIFFUSION = 1.0
CLAMP_INVALID_FRACTION = 1e-3


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform space lattice over [x_min, x_max] crossed with a TimeGrid."""

    time: TimeGrid
    x_min: float
    x_max: float
    intervals: int
    boundary: str = "terminal-profile"

    def __post_init__(self) -> None:
        if not self.x_min < self.x_max:
            raise ValueError(f"empty space window [{self.x_min}, {self.x_max}]")
        if self.intervals < 2:
            raise ValueError(f"need at least 2 space intervals, got {self.intervals}")
        if self.boundary != "terminal-profile":
            raise ValueError(f"unknown boundary policy {self.boundary!r}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.intervals

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.intervals + 1)


@dataclass(frozen=True)
class GridFunction:
    """Space-time lattice values of one value-function approximation.

    penalty records the level n of the penalized equation, or None for
    the obstacle-limit solve.  binding_fraction counts lattice nodes
    where the constraint acted; complementarity_gap is the largest
    projection displacement observed at nodes that ended strictly above
    the obstacle (identically zero for the projection scheme, recorded
    as a check).  clamped_fraction counts law-atom reads that fell
    outside the space window; the run is only trustworthy while it is
    small.
    """

    grid: SpaceTimeGrid
    values: np.ndarray
    problem: str
    penalty: int | None
    clamped_fraction: float
    binding_fraction: float
    complementarity_gap: float = 0.0

    def __post_init__(self) -> None:
        expected = (self.grid.time.steps + 1, self.grid.intervals + 1)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape}, grid wants {expected}")
        if not np.isfinite(self.values).all():
            raise ValueError("grid function contains non-finite values")

    @property
    def valid(self) -> bool:
        return self.clamped_fraction <= CLAMP_INVALID_FRACTION

    def value_at(self, t: float, x: float) -> float:
        """Linear interpolation in x at an exact time node."""
        i = self.grid.time.index_of(t)
        if not self.grid.x_min <= x <= self.grid.x_max:
            raise ValueError(
                f"x={x} outside the space window [{self.grid.x_min}, {self.grid.x_max}]"
            )
        return float(np.interp(x, self.grid.xs, self.values[i]))

    def to_csv(self, path) -> None:
        xs = self.grid.xs
        with open(path, "w") as fh:
            fh.write("t,x,u\n")
            for i in range(self.grid.time.steps + 1):
                t = self.grid.time.node(i)
                for j, x in enumerate(xs):
                    fh.write(f"{t:.12g},{x:.12g},{self.values[i, j]:.12g}\n")


def default_space_grid(
    problem: MfProblem,
    time_grid: TimeGrid,
    law: PathEnsemble,
    *,
    intervals: int,
    probes: tuple = (),
    width_sigmas: float = 6.0,
    min_halfwidth: float = 1.0,
) -> SpaceTimeGrid:
    """Window x0 +- width_sigmas * max sbar * sqrt(T), stretched over probes.

    The diffusion scale is measured empirically: sbar is evaluated at the
    law's own state quantiles at a handful of nodes.  Degenerate
    diffusion falls back to min_halfwidth so deterministic problems keep
    a usable lattice.
    """
    x0 = float(np.asarray(problem.x0).reshape(-1)[0])
    max_sig = 0.0
    stride = max(1, time_grid.steps // 8)
    for i in range(0, time_grid.steps + 1, stride):
        states = law.at_node(i)
        atoms, weights = state_atoms(states, FORWARD_ATOMS)
        pts = np.quantile(states[:, 0], [0.01, 0.5, 0.99]).reshape(-1, 1)
        sig = problem.diffusion(time_grid.node(i), pts, atoms, weights)
        max_sig = max(max_sig, float(np.sqrt((sig[:, 0, :] ** 2).sum(axis=1)).max()))
    half = max(width_sigmas * max_sig * math.sqrt(time_grid.horizon), min_halfwidth)
    lo = min((x0 - half, *probes))
    hi = max((x0 + half, *probes))
    return SpaceTimeGrid(time=time_grid, x_min=lo, x_max=hi, intervals=intervals)


def _require_scalar_setup(problem: MfProblem, grid: SpaceTimeGrid, law: PathEnsemble) -> None:
    if problem.state_dim != 1:
        raise ValueError(
            f"the lattice solver is one-dimensional; problem has state_dim {problem.state_dim}"
        )
    if law.start_index != 0:
        raise ValueError("law ensemble must cover the full grid")
    tg = grid.time
    if law.grid.steps != tg.steps or abs(law.grid.horizon - tg.horizon) > 1e-12:
        raise ValueError(
            f"law simulated on {law.grid.steps} steps over T={law.grid.horizon}, "
            f"lattice uses {tg.steps} over T={tg.horizon}"
        )


def _gradient(row: np.ndarray, dx: float) -> np.ndarray:
    """Central differences inside, one-sided at the two edges."""
    du = np.empty_like(row)
    du[1:-1] = (row[2:] - row[:-2]) / (2.0 * dx)
    du[0] = (row[1] - row[0]) / dx
    du[-1] = (row[-1] - row[-2]) / dx
    return du


def _implicit_factor(a_row: np.ndarray, b_row: np.ndarray, dt: float, dx: float):
    """Banded LHS of (I - dt A) on the interior nodes, Dirichlet edges."""
    lam = a_row[1:-1] * dt / dx**2
    adv = b_row[1:-1] * dt / (2.0 * dx)
    lower = -(lam - adv)
    main = 1.0 + 2.0 * lam
    upper = -(lam + adv)
    ab = np.zeros((3, main.size))
    ab[0, 1:] = upper[:-1]
    ab[1] = main
    ab[2, :-1] = lower[1:]
    return ab, lower, upper


def _panel_step(
    problem: MfProblem,
    grid: SpaceTimeGrid,
    t: float,
    prev: np.ndarray,
    src: np.ndarray,
    a_row: np.ndarray,
    b_row: np.ndarray,
    sig_row: np.ndarray,
    atoms: np.ndarray,
    weights: np.ndarray,
    left: float,
    right: float,
    stepping: str,
) -> np.ndarray:
    """One backward panel from row prev, nonlocal data read from row src."""
    xs = grid.xs
    dt, dx = grid.time.dt, grid.dx
    xs2d = xs[:, None]
    ytilde = np.interp(atoms[:, 0], xs, src)
    du = _gradient(src, dx)
    z_row = du[:, None] * sig_row
    F = problem.driver(t, xs2d, src, z_row, {"xtilde": atoms, "ytilde": ytilde}, weights)
    new = np.empty_like(prev)
    new[0], new[-1] = left, right
    if stepping == "implicit":
        ab, lower, upper = _implicit_factor(a_row, b_row, dt, dx)
        rhs = prev[1:-1] + dt * F[1:-1]
        rhs[0] -= lower[0] * left
        rhs[-1] -= upper[-1] * right
        new[1:-1] = solve_banded((1, 1), ab, rhs)
    else:
        lap = (prev[2:] - 2.0 * prev[1:-1] + prev[:-2]) / dx**2
        adv = (prev[2:] - prev[:-2]) / (2.0 * dx)
        new[1:-1] = prev[1:-1] + dt * (a_row[1:-1] * lap + b_row[1:-1] * adv + F[1:-1])
    return new


def _solve_lattice(
    problem: MfProblem,
    grid: SpaceTimeGrid,
    law: PathEnsemble,
    penalty: int | None,
    stepping: str,
    n_atoms: int,
) -> GridFunction:
    _require_scalar_setup(problem, grid, law)
    if stepping not in ("implicit", "explicit"):
        raise ValueError(f"stepping must be 'implicit' or 'explicit', got {stepping!r}")
    if not problem.has_obstacle:
        raise ValueError(f"problem {problem.name!r} has no obstacle")
    tg = grid.time
    xs = grid.xs
    xs2d = xs[:, None]
    dt, dx = tg.dt, grid.dx
    P = law.particles

    u = np.empty((tg.steps + 1, xs.size))
    xT = law.at_node(tg.steps)
    u[-1] = problem.terminal(xs2d, xT, np.full(P, 1.0 / P))
    hT = np.asarray(problem.obstacle_h(tg.horizon, xs2d), dtype=float)
    shortfall = float((u[-1] - hT).min())
    if shortfall < -1e-12 * (1.0 + np.abs(u[-1]).max()):
        raise ValueError(
            f"terminal profile falls below the obstacle on the window "
            f"(worst gap {-shortfall:.3g}); the obstacle problem requires "
            f"h(T, x) <= terminal profile"
        )
    left, right = float(u[-1, 0]), float(u[-1, -1])

    clamped = 0
    binding = 0
    comp_gap = 0.0
    for i in range(tg.steps - 1, -1, -1):
        t = tg.node(i)
        states = law.at_node(i)
        clamped += int(np.count_nonzero((states[:, 0] < grid.x_min) | (states[:, 0] > grid.x_max)))
        atoms, weights = state_atoms(states, n_atoms)
        drift_row = problem.drift(t, xs2d, atoms, weights)[:, 0]
        sig_row = problem.diffusion(t, xs2d, atoms, weights)[:, 0, :]
        a_row = 0.5 * (sig_row**2).sum(axis=1)
        if stepping == "explicit":
            sig_sq = float((2.0 * a_row).max())
            if sig_sq > 0.0 and dt > CFL_DIFFUSION * dx**2 / sig_sq:
                raise ValueError(
                    f"explicit step unstable: dt={dt:.3g} exceeds the diffusion "
                    f"bound dx^2/max sbar^2 = {dx**2 / sig_sq:.3g}"
                )
            courant = float(np.abs(drift_row).max()) * dt / dx
            if courant > 1.0:
                raise ValueError(
                    f"explicit step unstable: advection Courant number {courant:.3g} "
                    f"exceeds 1; shrink dt below dx/max |bbar|"
                )
        h_row = np.asarray(problem.obstacle_h(t, xs2d), dtype=float)
        # Dirichlet data: terminal-profile values propagated through the
        # constraint, so the edge columns follow the dynamics-free limit
        # of the same scheme instead of resetting every step
        if penalty is None:
            left = max(left, float(h_row[0]))
            right = max(right, float(h_row[-1]))
        else:
            gl = left - float(h_row[0])
            left = float(h_row[0]) + max(gl, gl / (1.0 + penalty * dt))
            gr = right - float(h_row[-1])
            right = float(h_row[-1]) + max(gr, gr / (1.0 + penalty * dt))
        prev = u[i + 1]
        row = prev
        for corrector in (False, True):
            raw = _panel_step(
                problem, grid, t, prev, row, a_row, drift_row, sig_row,
                atoms, weights, left, right, stepping,
            )
            if penalty is None:
                row = np.maximum(raw, h_row)
                raised = row > raw
            else:
                gap = raw - h_row
                raised = gap < 0.0
                row = np.where(raised, h_row + gap / (1.0 + penalty * dt), raw)
            row[0], row[-1] = left, right
            if corrector:
                binding += int(np.count_nonzero(raised))
                if penalty is None:
                    free = ~raised & (row > h_row)
                    if free.any():
                        comp_gap = max(comp_gap, float(np.abs(row - raw)[free].max()))
        u[i] = row

    lattice_nodes = tg.steps * xs.size
    return GridFunction(
        grid=grid,
        values=u,
        problem=problem.name,
        penalty=penalty,
        clamped_fraction=clamped / max(P * tg.steps, 1),
        binding_fraction=binding / max(lattice_nodes, 1),
        complementarity_gap=comp_gap,
    )


def solve_penalized_pde(
    problem: MfProblem,
    n: int,
    grid: SpaceTimeGrid,
    law: PathEnsemble,
    *,
    stepping: str = "implicit",
    n_atoms: int = FORWARD_ATOMS,
) -> GridFunction:
    """Backward lattice solve of the penalized nonlocal equation at level n."""
    if n < 1:
        raise ValueError(f"penalty level must be >= 1, got {n}")
    return _solve_lattice(problem, grid, law, int(n), stepping, n_atoms)


def solve_obstacle_pde(
    problem: MfProblem,
    grid: SpaceTimeGrid,
    law: PathEnsemble,
    *,
    stepping: str = "implicit",
    n_atoms: int = FORWARD_ATOMS,
) -> GridFunction:
    """Backward lattice solve with node-wise projection onto the obstacle."""
    return _solve_lattice(problem, grid, law, None, stepping, n_atoms)


@dataclass(frozen=True)
class ProbeMcConfig:
    """Monte Carlo side of a lattice-vs-probabilistic comparison.

    law and noise must be the pair that produced each other (the backward
    solve on the law ensemble reuses its increments); flow_particles sizes
    the per-probe flow ensembles, drawn from children of seed.
    """

    law: PathEnsemble
    noise: NoiseEnsemble
    basis: RegressionBasis
    flow_particles: int = 4000
    seed: RngSeed | int = 7070
    n_atoms: int = 256

    def root_seed(self) -> RngSeed:
        return RngSeed(seed=self.seed) if isinstance(self.seed, int) else self.seed


@dataclass(frozen=True)
class ProbeComparisonReport:
    """Lattice values against reflected solves started at probe points."""

    problem: str
    probes: tuple                 # ((t, x), ...)
    lattice_values: tuple
    probabilistic_values: tuple
    standard_errors: tuple
    flow_particles: int

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(np.asarray(self.lattice_values) - np.asarray(self.probabilistic_values))

    @property
    def max_gap(self) -> float:
        return float(self.gaps.max())

    def rows(self) -> list[dict]:
        return [
            {
                "t": t,
                "x": x,
                "u_lattice": self.lattice_values[i],
                "y_probabilistic": self.probabilistic_values[i],
                "gap": float(self.gaps[i]),
                "se": self.standard_errors[i],
            }
            for i, (t, x) in enumerate(self.probes)
        ]

    def __str__(self) -> str:
        lines = [f"lattice vs probabilistic, problem {self.problem}:"]
        for r in self.rows():
            lines.append(
                f"  (t={r['t']:g}, x={r['x']:g}) u={r['u_lattice']:.5f} "
                f"Y={r['y_probabilistic']:.5f} gap={r['gap']:.5f} se={r['se']:.4f}"
            )
        lines.append(f"  max gap = {self.max_gap:.5f}")
        return "\n".join(lines)


def compare_with_probabilistic(
    u: GridFunction,
    problem: MfProblem,
    probe_points,
    mc_config: ProbeMcConfig,
) -> ProbeComparisonReport:
    """Check u(t, x) = Y_t^{t,x} at interior probes.

    The mean-field data is frozen once: a reflected solve on the law
    ensemble provides the (state, value) atom streams, then each probe
    runs an independent flow from (t, x) under that frozen law and a
    classical solve against the same atoms.  The reported standard error
    is the largest per-node scale of the flow solve's ensemble mean, so
    the gap can be judged against Monte Carlo noise.
    """
    law, noise, basis = mc_config.law, mc_config.noise, mc_config.basis
    flow_particles = mc_config.flow_particles
    seed = mc_config.root_seed()
    probes = tuple((float(t), float(x)) for t, x in probe_points)
    for t, x in probes:
        if not u.grid.x_min < x < u.grid.x_max:
            raise ValueError(
                f"probe x={x} is not interior to the window "
                f"[{u.grid.x_min}, {u.grid.x_max}]"
            )
    tg = u.grid.time
    base = (
        solve_reflected(problem, law, noise, basis, keep_fits=False)
        if problem.has_obstacle
        else solve_bsde(problem, law, noise, basis, keep_fits=False)
    )
    ext = {}
    for i in range(tg.steps + 1):
        st = law.at_node(i)
        ext[i] = joint_atoms(st[:, 0], {"xtilde": st, "ytilde": base.Y[:, i]}, mc_config.n_atoms)

    lattice_vals = []
    prob_vals = []
    ses = []
    for p, (t, x) in enumerate(probes):
        i = tg.index_of(t)
        flow_noise = sample_brownian(tg, flow_particles, problem.noise_dim, seed.child(p + 1))
        flow = simulate_flow(problem, tg, i, np.array([x]), law, flow_noise)
        sol = (
            solve_reflected(problem, flow, flow_noise, basis, external_atoms=ext, keep_fits=False)
            if problem.has_obstacle
            else solve_bsde(problem, flow, flow_noise, basis, external_atoms=ext, keep_fits=False)
        )
        lattice_vals.append(u.value_at(t, x))
        prob_vals.append(float(sol.Y[:, 0].mean()))
        ses.append(float((sol.Y.std(axis=0) / math.sqrt(flow_particles)).max()))
    return ProbeComparisonReport(
        problem=problem.name,
        probes=probes,
        lattice_values=tuple(lattice_vals),
        probabilistic_values=tuple(prob_vals),
        standard_errors=tuple(ses),
        flow_particles=flow_particles,
    )


@dataclass(frozen=True)
class LipschitzReport:
    """Uniform-in-n space regularity and monotonicity of the penalized family.

    lipschitz[i] is the largest |u_n(t, x+dx) - u_n(t, x)| / dx over the
    lattice at n_list[i]; the family is uniformly Lipschitz when the
    max/min ratio stays O(1) as n grows.  monotone_violation_fraction[i]
    counts lattice nodes where u at n_list[i] exceeds u at n_list[i+1]
    beyond the scheme tolerance.  ceiling_excess is the largest amount
    any penalized solution pokes above the obstacle-limit solution.
    """

    problem: str
    n_list: tuple
    lipschitz: tuple
    monotone_violation_fraction: tuple
    ceiling_excess: float
    tolerance: float

    @property
    def ratio(self) -> float:
        return max(self.lipschitz) / min(self.lipschitz)

    def rows(self) -> list[dict]:
        out = []
        for i, n in enumerate(self.n_list):
            out.append(
                {
                    "n": n,
                    "lipschitz": self.lipschitz[i],
                    "monotone_violations": (
                        self.monotone_violation_fraction[i]
                        if i < len(self.monotone_violation_fraction)
                        else float("nan")
                    ),
                }
            )
        return out

    def __str__(self) -> str:
        lines = [f"penalized family regularity, problem {self.problem}:"]
        for i, n in enumerate(self.n_list):
            viol = (
                f"{self.monotone_violation_fraction[i]:.4%}"
                if i < len(self.monotone_violation_fraction)
                else "-"
            )
            lines.append(f"  n={n:4d} L={self.lipschitz[i]:.5f} viol(u_n > u_next)={viol}")
        lines.append(
            f"  L ratio = {self.ratio:.3f}; max excess over obstacle solution = "
            f"{self.ceiling_excess:.3g}"
        )
        return "\n".join(lines)


def lipschitz_report(
    problem: MfProblem,
    n_list,
    grid: SpaceTimeGrid,
    law: PathEnsemble,
    *,
    stepping: str = "implicit",
    tolerance: float = 1e-9,
) -> LipschitzReport:
    """Empirical Lipschitz constants and n-monotonicity over a penalty sweep."""
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])) or not n_list:
        raise ValueError(f"n_list must be strictly increasing, got {n_list}")
    solutions = [solve_penalized_pde(problem, n, grid, law, stepping=stepping) for n in n_list]
    ceiling = solve_obstacle_pde(problem, grid, law, stepping=stepping)
    dx = grid.dx
    lips = tuple(float(np.abs(np.diff(s.values, axis=1)).max() / dx) for s in solutions)
    tol = tolerance * (1.0 + max(float(np.abs(s.values).max()) for s in solutions))
    violations = []
    for lo, hi in zip(solutions, solutions[1:]):
        bad = np.count_nonzero(lo.values > hi.values + tol)
        violations.append(bad / lo.values.size)
    excess = max(float((s.values - ceiling.values).max()) for s in solutions)
    return LipschitzReport(
        problem=problem.name,
        n_list=tuple(n_list),
        lipschitz=lips,
        monotone_violation_fraction=tuple(violations),
        ceiling_excess=excess,
        tolerance=tol,
    )

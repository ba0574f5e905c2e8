"""Problem records: coefficients, flags, canonical instances.

A problem bundles plain vectorized callables; there is no symbolic layer.
Conventions (Q is an arbitrary batch size):

- ``b(t, x, xtilde)``      t scalar, x (Q,n), xtilde (Q,n) or None -> (Q,n)
- ``sigma(t, x, xtilde)``  -> (Q,n,d) or broadcastable (n,d)
- ``terminal_Phi(x, xtilde)``  x (Q,n), xtilde (Q,n) or None -> (Q,)
- ``obstacle_h(t, x)``     -> (Q,)
- driver, by declared form:
    "none"       no driver
    "yz"         g(t, y, z) -> (Q,)
    "yz_ytilde"  g(t, y, z, ytilde), all row-paired (Q,) -> (Q,)
    "full"       f(t, x, xtilde, ytilde, y, z), row-paired -> (Q,)

Mean-field slots (xtilde, ytilde, ztilde) are always averaged by the
caller over weighted atoms; the callables only ever see paired rows.  A
problem may supply ``driver_g_atoms`` to evaluate the whole weighted
average in one call (worth it when the average collapses analytically,
e.g. drivers affine in a transformed mean).

Separable coupling hooks: interacting-copy solvers average the driver
and terminal over N shifted copies of the solution.  When the pairwise
coefficient is affine in some statistic of the shifted copy, a problem
can declare that split and the copy average collapses to one evaluation:

- ``driver_cross(t, x, y)``    statistic of a shifted copy, (Q,) or (Q, m)
- ``driver_base(t, x, y, z, c)``  own arguments plus the averaged
  statistic c (Q, m) -> (Q,); must be affine in c, so that the average
  of g over copies equals driver_base at the averaged cross statistic
- ``terminal_cross(x)``        (Q,) or (Q, m)
- ``terminal_base(x, c)``      (Q,); same affinity requirement

The hooks are optional and redundant with driver_g / terminal_Phi; they
exist so the copy average costs O(copies) instead of O(copies^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "MfProblem",
    "ClassicalRbsdeProblem",
    "ValidationReport",
    "validate",
    "example31_problem",
    "american_put_problem",
    "deterministic_obstacle_problem",
    "benchmark_reflected_mf_problem",
    "pde_benchmark_problem",
    "PROBLEMS",
    "make_problem",
]

_DRIVER_FORMS = ("none", "yz", "yz_ytilde", "full")


@dataclass(frozen=True)
class MfProblem:
    """Coefficient bundle for a (possibly mean-field, possibly reflected) BSDE."""

    name: str
    state_dim: int
    noise_dim: int
    horizon: float
    x0: np.ndarray
    b: Callable | None = None
    sigma: Callable | None = None
    terminal_Phi: Callable | None = None
    obstacle_h: Callable | None = None
    has_obstacle: bool = False          # explicit: None obstacle_h + True is an error
    driver_form: str = "none"
    driver_g: Callable | None = None
    driver_g_atoms: Callable | None = None
    # optional bulk hooks: evaluate the whole weighted atom average in one
    # call when it collapses analytically (separable coefficients)
    b_atoms: Callable | None = None
    terminal_Phi_atoms: Callable | None = None
    # optional separable split for interacting-copy averages (see module
    # docstring); base hooks must be affine in the averaged cross statistic
    driver_cross: Callable | None = None
    driver_base: Callable | None = None
    terminal_cross: Callable | None = None
    terminal_base: Callable | None = None
    # which coefficients actually read their mean-field slot
    b_mf: bool = False
    sigma_mf: bool = False
    phi_mf: bool = False
    driver_uses_ztilde: bool = False
    # declared analytic properties, checked empirically by validate()
    lipschitz: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    bounded_coefficients: bool = False
    g_nondecreasing_in_ytilde: bool = False

    def __post_init__(self) -> None:
        if self.state_dim < 1 or self.noise_dim < 1:
            raise ValueError(f"dims must be >= 1, got n={self.state_dim}, d={self.noise_dim}")
        if not self.horizon > 0.0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.driver_form not in _DRIVER_FORMS:
            raise ValueError(f"driver_form must be one of {_DRIVER_FORMS}, got {self.driver_form!r}")
        if self.driver_form != "none" and self.driver_g is None:
            raise ValueError("driver_form set but driver_g missing")
        if self.has_obstacle != (self.obstacle_h is not None):
            raise ValueError("has_obstacle flag must match obstacle_h presence")
        if self.terminal_Phi is None:
            raise ValueError("terminal_Phi is required")
        if (self.driver_cross is None) != (self.driver_base is None):
            raise ValueError("driver_cross and driver_base must be supplied together")
        if (self.terminal_cross is None) != (self.terminal_base is None):
            raise ValueError("terminal_cross and terminal_base must be supplied together")
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.state_dim,):
            raise ValueError(f"x0 must have shape ({self.state_dim},), got {x0.shape}")
        object.__setattr__(self, "x0", x0)

    # -- averaged coefficient evaluation over atoms -----------------------

    def drift(self, t: float, x: np.ndarray, atoms_x: np.ndarray | None, weights: np.ndarray | None) -> np.ndarray:
        """E[b(t, x, X~)] against the atom measure; zero when b is None."""
        if self.b is None:
            return np.zeros_like(x)
        if not self.b_mf:
            return np.asarray(self.b(t, x, None), dtype=float)
        assert atoms_x is not None and weights is not None, "mean-field drift needs atoms"
        if self.b_atoms is not None:
            return np.asarray(self.b_atoms(t, x, atoms_x, weights), dtype=float)
        acc = np.zeros_like(x)
        for a in range(len(weights)):
            tile = np.broadcast_to(atoms_x[a], x.shape)
            acc += weights[a] * np.asarray(self.b(t, x, tile), dtype=float)
        return acc

    def diffusion(self, t: float, x: np.ndarray, atoms_x: np.ndarray | None, weights: np.ndarray | None) -> np.ndarray:
        """E[sigma(t, x, X~)], broadcast to (Q, n, d)."""
        Q = x.shape[0]
        shape = (Q, self.state_dim, self.noise_dim)
        if self.sigma is None:
            return np.zeros(shape)
        if not self.sigma_mf:
            return np.broadcast_to(np.asarray(self.sigma(t, x, None), dtype=float), shape)
        assert atoms_x is not None and weights is not None, "mean-field diffusion needs atoms"
        acc = np.zeros(shape)
        for a in range(len(weights)):
            tile = np.broadcast_to(atoms_x[a], x.shape)
            acc += weights[a] * np.broadcast_to(np.asarray(self.sigma(t, x, tile), dtype=float), shape)
        return acc

    def terminal(self, x: np.ndarray, atoms_x: np.ndarray | None, weights: np.ndarray | None) -> np.ndarray:
        """E[Phi(x, X~)] against the atom measure."""
        if not self.phi_mf:
            return np.asarray(self.terminal_Phi(x, None), dtype=float)
        assert atoms_x is not None and weights is not None, "mean-field terminal needs atoms"
        if self.terminal_Phi_atoms is not None:
            return np.asarray(self.terminal_Phi_atoms(x, atoms_x, weights), dtype=float)
        acc = np.zeros(x.shape[0])
        for a in range(len(weights)):
            tile = np.broadcast_to(atoms_x[a], x.shape)
            acc += weights[a] * np.asarray(self.terminal_Phi(x, tile), dtype=float)
        return acc

    def driver(
        self,
        t: float,
        x: np.ndarray,
        y: np.ndarray,
        z: np.ndarray,
        atoms: dict | None = None,
        weights: np.ndarray | None = None,
    ) -> np.ndarray:
        """Driver with mean-field slots averaged over atoms.

        atoms may carry "xtilde" (A,n), "ytilde" (A,), "ztilde" (A,d);
        returns (Q,).  Forms without mean-field slots ignore the atoms.
        """
        if self.driver_form == "none":
            return np.zeros(y.shape)
        if self.driver_form == "yz":
            return np.asarray(self.driver_g(t, y, z), dtype=float)
        if self.driver_g_atoms is not None:
            return np.asarray(self.driver_g_atoms(t, x, y, z, atoms, weights), dtype=float)
        assert atoms is not None and weights is not None, "mean-field driver needs atoms"
        acc = np.zeros(y.shape)
        Q = y.shape[0]
        for a in range(len(weights)):
            if self.driver_form == "yz_ytilde":
                ya = np.full(Q, atoms["ytilde"][a])
                acc += weights[a] * np.asarray(self.driver_g(t, y, z, ya), dtype=float)
            else:  # "full"
                xa = np.broadcast_to(atoms["xtilde"][a], x.shape)
                ya = np.full(Q, atoms["ytilde"][a])
                acc += weights[a] * np.asarray(self.driver_g(t, x, xa, ya, y, z), dtype=float)
        return acc

    @property
    def driver_uses_mean_field(self) -> bool:
        return self.driver_form in ("yz_ytilde", "full")


class ClassicalRbsdeProblem(MfProblem):
    """MfProblem built from classical (no mean-field slot) coefficients.

    Accepts b(t,x), sigma(t,x), Phi(x), g(t,y,z), h(t,x) and wraps them so
    every mean-field argument is ignored.
    """

    def __init__(
        self,
        name: str,
        state_dim: int,
        noise_dim: int,
        horizon: float,
        x0,
        *,
        b: Callable | None = None,
        sigma: Callable | None = None,
        terminal: Callable,
        driver: Callable | None = None,
        obstacle: Callable | None = None,
        lipschitz: dict | None = None,
        bounds: dict | None = None,
        bounded_coefficients: bool = False,
    ) -> None:
        super().__init__(
            name=name,
            state_dim=state_dim,
            noise_dim=noise_dim,
            horizon=horizon,
            x0=x0,
            b=(lambda t, x, xt: b(t, x)) if b is not None else None,
            sigma=(lambda t, x, xt: sigma(t, x)) if sigma is not None else None,
            terminal_Phi=lambda x, xt: terminal(x),
            obstacle_h=obstacle,
            has_obstacle=obstacle is not None,
            driver_form="yz" if driver is not None else "none",
            driver_g=driver,
            lipschitz=lipschitz or {},
            bounds=bounds or {},
            bounded_coefficients=bounded_coefficients,
        )


# ---------------------------------------------------------------------------
# canonical problems
# ---------------------------------------------------------------------------


def example31_problem() -> MfProblem:
    """Two-horizon counterexample: T=2, driver -E[y~], xi = |W_1|^2 /\\ 1.

    The terminal payoff reads the Brownian motion at the intermediate time
    t=1, so the state is augmented: x = (W_t, W_{t /\\ 1}) with the second
    coordinate's diffusion row switched off from t=1 on.  For t <= 1 the
    two coordinates coincide (the regression design is collinear there;
    ridge absorbs it).  The obstacle -e^T never binds: |Y_t| <= e^{T-t}
    since |xi| <= 1.  The driver is linear in y~, so its atom average is
    exact.  bounded_coefficients refers to the reachable range (|Y| <= e^T);
    the driver -y~ is linear, hence unbounded globally.
    """
    T = 2.0

    def sigma(t, x, xt):
        # rows (dW applies to both coordinates until t = 1, then only the first)
        return np.array([[1.0], [1.0 if t < 1.0 else 0.0]])

    def phi(x, xt):
        return np.minimum(x[:, 1] ** 2, 1.0)

    def g(t, y, z, ytilde):
        return -ytilde

    def g_atoms(t, x, y, z, atoms, weights):
        # linear in y~: the weighted average collapses to the atom mean
        return np.full(y.shape, -float(atoms["ytilde"] @ weights))

    def h(t, x):
        return np.full(x.shape[0], -math.e**T)

    return MfProblem(
        name="example31",
        state_dim=2,
        noise_dim=1,
        horizon=T,
        x0=np.zeros(2),
        sigma=sigma,
        terminal_Phi=phi,
        obstacle_h=h,
        has_obstacle=True,
        driver_form="yz_ytilde",
        driver_g=g,
        driver_g_atoms=g_atoms,
        driver_cross=lambda t, x, y: y,
        driver_base=lambda t, x, y, z, c: -c[:, 0],
        lipschitz={"terminal": 2.0, "driver": 1.0, "sigma": 0.0, "obstacle": 0.0},
        bounds={"terminal": 1.0, "obstacle": math.e**T},
        bounded_coefficients=True,
        g_nondecreasing_in_ytilde=False,  # -y~ decreases in y~
    )


def american_put_problem(
    strike: float = 100.0,
    rate: float = 0.05,
    vol: float = 0.2,
    spot: float = 100.0,
    maturity: float = 1.0,
) -> ClassicalRbsdeProblem:
    """American put in log-price state.

    State x = log S: constant drift rate - vol^2/2 and constant diffusion
    make the Euler step exact in law.  Obstacle (K - e^x)^+, driver -r y.
    """
    if strike <= 0.0 or vol <= 0.0 or spot <= 0.0 or maturity <= 0.0:
        raise ValueError(
            f"strike, vol, spot, maturity must be positive; got {strike}, {vol}, {spot}, {maturity}"
        )
    if rate < 0.0:
        raise ValueError(f"rate must be nonnegative, got {rate}")

    mu = rate - 0.5 * vol * vol

    def payoff(x):
        return np.maximum(strike - np.exp(x[:, 0]), 0.0)

    return ClassicalRbsdeProblem(
        name="american_put",
        state_dim=1,
        noise_dim=1,
        horizon=maturity,
        x0=np.array([math.log(spot)]),
        b=lambda t, x: np.full_like(x, mu),
        sigma=lambda t, x: np.array([[vol]]),
        terminal=payoff,
        driver=lambda t, y, z: -rate * y,
        obstacle=lambda t, x: payoff(x),
        lipschitz={"driver": rate, "obstacle": strike, "terminal": strike, "b": 0.0, "sigma": 0.0},
        bounds={"terminal": strike, "obstacle": strike},
        bounded_coefficients=True,  # payoff <= strike, so |Y| <= strike
    )


def deterministic_obstacle_problem() -> ClassicalRbsdeProblem:
    """xi = 0, g = 0, L_t = 1 - t on [0,1]: solution Y_t = 1-t, K_t = t."""
    return ClassicalRbsdeProblem(
        name="deterministic_obstacle",
        state_dim=1,
        noise_dim=1,
        horizon=1.0,
        x0=np.zeros(1),
        terminal=lambda x: np.zeros(x.shape[0]),
        obstacle=lambda t, x: np.full(x.shape[0], 1.0 - t),
        lipschitz={"terminal": 0.0, "obstacle": 0.0},
        bounds={"terminal": 0.0, "obstacle": 1.0},
        bounded_coefficients=True,
    )


def benchmark_reflected_mf_problem(
    coupling: float = 0.4,
    vol: float = 0.4,
    obstacle_lift: float = 0.6,
) -> MfProblem:
    """Bounded tanh-type reflected mean-field benchmark on [0, 1].

    All coefficients are globally bounded and Lipschitz and the driver is
    nondecreasing in y~.  Three shape choices matter.  The terminal level
    0.6 keeps E[Y] well away from zero, so the tanh(y~) coupling has a
    real effect (with a centred terminal it averages out and the
    mean-field fixed point is vacuous); removing the coupling moves Y_0
    by about 0.06.  The obstacle carries a parabolic lift 4t(1-t), which
    binds around mid-horizon (roughly a quarter of all nodes, mean
    K_T ~ 0.2 at the default lift) while leaving t=0 unconstrained, so
    probes at the initial node see genuine dynamics rather than the
    obstacle.  At t=1 the lift vanishes and the terminal gap is
    0.6 (1 + mean tanh(x~)) > 0 for every realization, so terminal
    compatibility holds by construction, also inside the finite particle
    systems where the x~ slot is a noisy N-neighbour average.
    """

    def b(t, x, xt):
        return 0.25 * np.tanh(xt) - 0.2 * np.tanh(x)

    def b_atoms(t, x, atoms_x, weights):
        return 0.25 * float(np.tanh(atoms_x[:, 0]) @ weights) - 0.2 * np.tanh(x)

    def sigma(t, x, xt):
        return np.array([[vol]])

    def phi(x, xt):
        return 0.6 + np.tanh(x[:, 0]) + 0.6 * np.tanh(xt[:, 0])

    def phi_atoms(x, atoms_x, weights):
        return 0.6 + np.tanh(x[:, 0]) + 0.6 * float(np.tanh(atoms_x[:, 0]) @ weights)

    def g(t, y, z, ytilde):
        return -y + coupling * np.tanh(ytilde)

    def g_atoms(t, x, y, z, atoms, weights):
        # tanh applied per atom, then averaged: one transcendental per atom
        return -y + coupling * float(np.tanh(atoms["ytilde"]) @ weights)

    def h(t, x):
        return np.tanh(x[:, 0]) + obstacle_lift * 4.0 * t * (1.0 - t)

    return MfProblem(
        name="benchmark_reflected_mf",
        state_dim=1,
        noise_dim=1,
        horizon=1.0,
        x0=np.zeros(1),
        b=b,
        sigma=sigma,
        terminal_Phi=phi,
        obstacle_h=h,
        has_obstacle=True,
        driver_form="yz_ytilde",
        driver_g=g,
        driver_g_atoms=g_atoms,
        b_atoms=b_atoms,
        terminal_Phi_atoms=phi_atoms,
        driver_cross=lambda t, x, y: np.tanh(y),
        driver_base=lambda t, x, y, z, c: -y + coupling * c[:, 0],
        terminal_cross=lambda x: np.tanh(x[:, 0]),
        terminal_base=lambda x, c: 0.6 + np.tanh(x[:, 0]) + 0.6 * c[:, 0],
        b_mf=True,
        phi_mf=True,
        lipschitz={"b": 0.45, "sigma": 0.0, "terminal": 1.4, "driver": 1.0 + coupling, "obstacle": 1.0},
        bounds={"b": 0.45, "terminal": 2.2, "obstacle": 1.0 + obstacle_lift},
        bounded_coefficients=True,
        g_nondecreasing_in_ytilde=True,
    )


def pde_benchmark_problem() -> MfProblem:
    """Scalar nonlocal obstacle benchmark with a state-dependent driver.

    Same terminal and obstacle as the reflected benchmark, but the driver
    takes the full form f(t, x, x~, y~, y, z), exercising every argument
    slot of the nonlocal PDE term including a z (gradient) coupling.
    """

    def b(t, x, xt):
        return 0.25 * np.tanh(xt) - 0.2 * np.tanh(x)

    def b_atoms(t, x, atoms_x, weights):
        return 0.25 * float(np.tanh(atoms_x[:, 0]) @ weights) - 0.2 * np.tanh(x)

    def sigma(t, x, xt):
        return np.array([[0.4]])

    def phi(x, xt):
        return 0.6 + np.tanh(x[:, 0]) + 0.6 * np.tanh(xt[:, 0])

    def phi_atoms(x, atoms_x, weights):
        return 0.6 + np.tanh(x[:, 0]) + 0.6 * float(np.tanh(atoms_x[:, 0]) @ weights)

    def f(t, x, xtilde, ytilde, y, z):
        return (
            -y
            + 0.4 * np.tanh(ytilde)
            + 0.1 * np.cos(x[:, 0])
            + 0.05 * np.tanh(xtilde[:, 0])
            + 0.1 * z[:, 0]
        )

    def f_atoms(t, x, y, z, atoms, weights):
        return (
            -y
            + 0.4 * float(np.tanh(atoms["ytilde"]) @ weights)
            + 0.1 * np.cos(x[:, 0])
            + 0.05 * float(np.tanh(atoms["xtilde"][:, 0]) @ weights)
            + 0.1 * z[:, 0]
        )

    def h(t, x):
        return np.tanh(x[:, 0]) + 0.6 * 4.0 * t * (1.0 - t)

    def f_cross(t, x, y):
        return np.stack([np.tanh(y), np.tanh(x[:, 0])], axis=1)

    def f_base(t, x, y, z, c):
        return -y + 0.4 * c[:, 0] + 0.1 * np.cos(x[:, 0]) + 0.05 * c[:, 1] + 0.1 * z[:, 0]

    return MfProblem(
        name="pde_benchmark",
        state_dim=1,
        noise_dim=1,
        horizon=1.0,
        x0=np.zeros(1),
        b=b,
        sigma=sigma,
        terminal_Phi=phi,
        obstacle_h=h,
        has_obstacle=True,
        driver_form="full",
        driver_g=f,
        driver_g_atoms=f_atoms,
        b_atoms=b_atoms,
        terminal_Phi_atoms=phi_atoms,
        driver_cross=f_cross,
        driver_base=f_base,
        terminal_cross=lambda x: np.tanh(x[:, 0]),
        terminal_base=lambda x, c: 0.6 + np.tanh(x[:, 0]) + 0.6 * c[:, 0],
        b_mf=True,
        phi_mf=True,
        lipschitz={"b": 0.45, "sigma": 0.0, "terminal": 1.4, "driver": 1.65, "obstacle": 1.0},
        bounds={"b": 0.45, "terminal": 2.2, "obstacle": 1.6},
        bounded_coefficients=True,
        g_nondecreasing_in_ytilde=True,
    )


PROBLEMS: dict[str, Callable[..., MfProblem]] = {
    "example31": example31_problem,
    "american_put": american_put_problem,
    "deterministic_obstacle": deterministic_obstacle_problem,
    "benchmark_reflected_mf": benchmark_reflected_mf_problem,
    "pde_benchmark": pde_benchmark_problem,
}


def make_problem(name: str, **params) -> MfProblem:
    """Instantiate a canonical problem by registry name."""
    if name not in PROBLEMS:
        raise ValueError(f"unknown problem {name!r}; valid names: {sorted(PROBLEMS)}")
    return PROBLEMS[name](**params)


# ---------------------------------------------------------------------------
# validation (report-only)
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    """Outcome of empirical coefficient checks; never raises."""

    problem: str
    checks: list = field(default_factory=list)  # (name, passed, detail)

    def add(self, name: str, passed: bool, detail: str) -> None:
        self.checks.append((name, bool(passed), detail))

    @property
    def violations(self) -> list:
        return [c for c in self.checks if not c[1]]

    @property
    def passed(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        lines = [f"validate({self.problem}): {'OK' if self.passed else 'VIOLATIONS'}"]
        for name, ok, detail in self.checks:
            lines.append(f"  [{'pass' if ok else 'FAIL'}] {name}: {detail}")
        return "\n".join(lines)


def _cross_columns(values: np.ndarray) -> np.ndarray:
    """Cross-statistic output normalized to (Q, m)."""
    values = np.asarray(values, dtype=float)
    return values[:, None] if values.ndim == 1 else values


def _pair_quotient(values_a: np.ndarray, values_b: np.ndarray, dist: np.ndarray) -> float:
    """Largest |f(a)-f(b)| / |a-b| over sampled pairs."""
    va = values_a.reshape(values_a.shape[0], -1)
    vb = values_b.reshape(values_b.shape[0], -1)
    num = np.linalg.norm(va - vb, axis=1)
    mask = dist > 1e-9
    if not mask.any():
        return 0.0
    return float((num[mask] / dist[mask]).max())


def validate(problem: MfProblem, samples: int = 10_000, seed: int = 0) -> ValidationReport:
    """Empirical check of declared flags on sampled states; report only.

    Samples states around x0 at the scale the diffusion can reach, forms
    random pairs, and checks declared Lipschitz constants, declared bounds,
    obstacle-terminal compatibility h(T,x) <= Phi(x,x~), and (when flagged)
    driver monotonicity in y~.  Failures are recorded, never raised.
    """
    rng = np.random.default_rng(seed)
    n = problem.state_dim
    sig0 = problem.diffusion(0.0, problem.x0.reshape(1, -1), problem.x0.reshape(1, -1), np.array([1.0]))
    scale = max(1.0, 3.0 * float(np.abs(sig0).max()) * math.sqrt(problem.horizon))
    # own state and mean-field slot perturbed independently: xa/xb pair the
    # own slot, xc/xd pair the tilde slot
    xa, xb, xc, xd = (problem.x0 + scale * rng.standard_normal((samples, n)) for _ in range(4))
    dx = np.linalg.norm(xa - xb, axis=1)
    d_joint = np.sqrt(dx**2 + np.linalg.norm(xc - xd, axis=1) ** 2)
    times = rng.uniform(0.0, problem.horizon, size=5)
    report = ValidationReport(problem=problem.name)
    slack = 1e-9

    def check_lip(key: str, quotient: float) -> None:
        declared = problem.lipschitz.get(key)
        if declared is None:
            report.add(f"lipschitz[{key}]", True, f"empirical {quotient:.4g}, none declared")
        else:
            report.add(
                f"lipschitz[{key}]",
                quotient <= declared + slack,
                f"empirical {quotient:.4g} vs declared {declared:.4g}",
            )

    def check_bound(key: str, observed: float) -> None:
        if not np.isfinite(observed):
            report.add(f"bound[{key}]", False, "non-finite values")
            return
        declared = problem.bounds.get(key)
        if declared is None:
            report.add(f"bound[{key}]", True, f"max |value| {observed:.4g}, none declared")
        else:
            report.add(
                f"bound[{key}]",
                observed <= declared + slack,
                f"max |value| {observed:.4g} vs declared {declared:.4g}",
            )

    if problem.b is not None:
        if problem.b_mf:
            pairs = [(problem.b(t, xa, xc), problem.b(t, xb, xd), d_joint) for t in times]
        else:
            pairs = [(problem.b(t, xa, None), problem.b(t, xb, None), dx) for t in times]
        check_lip("b", max(_pair_quotient(np.asarray(a), np.asarray(bv), d) for a, bv, d in pairs))
        check_bound("b", float(np.abs(np.asarray(pairs[0][0])).max()))

    if problem.sigma is not None:
        full = (samples, n, problem.noise_dim)
        if problem.sigma_mf:
            pairs = [(problem.sigma(t, xa, xc), problem.sigma(t, xb, xd), d_joint) for t in times]
        else:
            pairs = [(problem.sigma(t, xa, None), problem.sigma(t, xb, None), dx) for t in times]
        check_lip(
            "sigma",
            max(
                _pair_quotient(
                    np.broadcast_to(np.asarray(a, dtype=float), full),
                    np.broadcast_to(np.asarray(bv, dtype=float), full),
                    d,
                )
                for a, bv, d in pairs
            ),
        )

    if problem.phi_mf:
        phi_a = np.asarray(problem.terminal_Phi(xa, xc))
        phi_b = np.asarray(problem.terminal_Phi(xb, xd))
        check_lip("terminal", _pair_quotient(phi_a, phi_b, d_joint))
    else:
        phi_a = np.asarray(problem.terminal_Phi(xa, None))
        phi_b = np.asarray(problem.terminal_Phi(xb, None))
        check_lip("terminal", _pair_quotient(phi_a, phi_b, dx))
    check_bound("terminal", float(np.abs(phi_a).max()))

    if problem.has_obstacle:
        for t in (0.0, problem.horizon / 2, problem.horizon):
            ha = np.asarray(problem.obstacle_h(t, xa))
            hb = np.asarray(problem.obstacle_h(t, xb))
            check_lip("obstacle", _pair_quotient(ha, hb, dx))
            check_bound("obstacle", float(np.abs(ha).max()))
        # terminal compatibility h(T, x) <= Phi(x, x~); phi_a already pairs
        # the own slot xa with an independently sampled tilde slot
        hT = np.asarray(problem.obstacle_h(problem.horizon, xa))
        gap = float((phi_a - hT).min())
        report.add("obstacle_compatibility", gap >= -slack, f"min Phi - h(T) = {gap:.4g}")

    if problem.driver_form != "none":
        t0 = float(times[0])
        y, y2, yt, yt2 = (rng.standard_normal(samples) for _ in range(4))
        z, z2 = (rng.standard_normal((samples, problem.noise_dim)) for _ in range(2))
        d_yz = np.sqrt((y - y2) ** 2 + np.linalg.norm(z - z2, axis=1) ** 2)
        if problem.driver_form == "yz":
            ga = np.asarray(problem.driver_g(t0, y, z))
            gb = np.asarray(problem.driver_g(t0, y2, z2))
            d = d_yz
        elif problem.driver_form == "yz_ytilde":
            ga = np.asarray(problem.driver_g(t0, y, z, yt))
            gb = np.asarray(problem.driver_g(t0, y2, z2, yt2))
            d = np.sqrt(d_yz**2 + (yt - yt2) ** 2)
        else:
            ga = np.asarray(problem.driver_g(t0, xa, xc, yt, y, z))
            gb = np.asarray(problem.driver_g(t0, xb, xd, yt2, y2, z2))
            d = np.sqrt(d_joint**2 + d_yz**2 + (yt - yt2) ** 2)
        check_lip("driver", _pair_quotient(ga, gb, d))
        if problem.g_nondecreasing_in_ytilde and problem.driver_uses_mean_field:
            lo = np.minimum(yt, yt2)
            hi = np.maximum(yt, yt2)
            if problem.driver_form == "yz_ytilde":
                glo = np.asarray(problem.driver_g(t0, y, z, lo))
                ghi = np.asarray(problem.driver_g(t0, y, z, hi))
            else:
                glo = np.asarray(problem.driver_g(t0, xa, xc, lo, y, z))
                ghi = np.asarray(problem.driver_g(t0, xa, xc, hi, y, z))
            frac = float(np.mean(ghi < glo - slack))
            report.add("driver_nondecreasing_in_ytilde", frac == 0.0, f"violation fraction {frac:.4g}")

        if problem.driver_cross is not None and problem.driver_uses_mean_field:
            # pairwise coefficient must equal base at the copy's own cross
            # statistic, and base must be affine in that statistic
            c1 = _cross_columns(problem.driver_cross(t0, xc, yt))
            c2 = _cross_columns(problem.driver_cross(t0, xd, yt2))
            if problem.driver_form == "yz_ytilde":
                gpair = np.asarray(problem.driver_g(t0, y, z, yt))
            else:
                gpair = np.asarray(problem.driver_g(t0, xa, xc, yt, y, z))
            gbase = np.asarray(problem.driver_base(t0, xa, y, z, c1))
            err = float(np.abs(gpair - gbase).max())
            tol = slack * (1.0 + float(np.abs(gpair).max()))
            report.add("driver_cross_consistency", err <= tol, f"max |pairwise - base(cross)| = {err:.4g}")
            mid = np.asarray(problem.driver_base(t0, xa, y, z, 0.5 * (c1 + c2)))
            avg = 0.5 * (gbase + np.asarray(problem.driver_base(t0, xa, y, z, c2)))
            err = float(np.abs(mid - avg).max())
            report.add("driver_base_affine", err <= tol, f"max midpoint defect = {err:.4g}")

    if problem.terminal_cross is not None and problem.phi_mf:
        c1 = _cross_columns(problem.terminal_cross(xc))
        c2 = _cross_columns(problem.terminal_cross(xd))
        ppair = np.asarray(problem.terminal_Phi(xa, xc))
        pbase = np.asarray(problem.terminal_base(xa, c1))
        err = float(np.abs(ppair - pbase).max())
        tol = slack * (1.0 + float(np.abs(ppair).max()))
        report.add("terminal_cross_consistency", err <= tol, f"max |pairwise - base(cross)| = {err:.4g}")
        mid = np.asarray(problem.terminal_base(xa, 0.5 * (c1 + c2)))
        avg = 0.5 * (pbase + np.asarray(problem.terminal_base(xa, c2)))
        err = float(np.abs(mid - avg).max())
        report.add("terminal_base_affine", err <= tol, f"max midpoint defect = {err:.4g}")

    return report

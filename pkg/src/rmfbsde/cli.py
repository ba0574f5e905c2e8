"""Experiment runner: named experiments, flat configs, seeded runs, CSV output.

Each subcommand is one experiment; its knobs come from a flat config file
(--config), RMFBSDE_* environment variables, and the --seed/--out/--threads
flags, in that precedence order.  Every run writes one CSV per result
table plus summary.txt into the output directory and exits 0 exactly when
all asserted invariants and configured thresholds passed, 1 on a failed
invariant or solver diagnostic, 2 on a config or usage error.

Heavy numeric modules are imported inside the runners so the --threads
cap is in place before any BLAS pool spins up.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import (
    ENV_PREFIX,
    EXPERIMENT_KEYS,
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    env_overrides,
    parse_config,
)
from .results import ResultTable


def _basis(cfg: ExperimentConfig):
    from .basis import RegressionBasis

    return RegressionBasis(family=cfg.basis, degree=cfg.degree, bins=cfg.bins)


def _law(problem, cfg: ExperimentConfig, particles: int, seed):
    from .forward import simulate_law_ensemble
    from .stochastic import TimeGrid, sample_brownian

    if cfg.horizon > 0.0 and abs(cfg.horizon - problem.horizon) > 1e-12:
        raise ValueError(
            f"config horizon {cfg.horizon} conflicts with problem "
            f"{problem.name!r} (T = {problem.horizon})"
        )
    grid = TimeGrid(horizon=problem.horizon, steps=cfg.steps)
    noise = sample_brownian(grid, particles, problem.noise_dim, seed)
    return grid, noise, simulate_law_ensemble(problem, grid, noise)


def _run_solve(cfg: ExperimentConfig):
    import numpy as np

    from .oracle import expected_y
    from .problems import make_problem
    from .solver import check_reflection_invariants, solve_bsde, solve_reflected
    from .stochastic import RngSeed

    problem = make_problem(cfg.problem)
    grid, noise, law = _law(problem, cfg, cfg.particles, RngSeed(cfg.seed))
    basis = _basis(cfg)
    solve = solve_reflected if problem.has_obstacle else solve_bsde
    sol = solve(problem, law, noise, basis, keep_fits=False)
    inv = check_reflection_invariants(sol, law)
    ok = inv.passed

    is_ex31 = cfg.problem == "example31"
    columns = ["t", "mean_Y", "se_mean_Y", "mean_K"]
    if is_ex31:
        columns += ["oracle_mean_Y", "rel_gap"]
    table = ResultTable(name="solution_curve", columns=tuple(columns))
    P = law.particles
    worst = 0.0
    for j in range(grid.steps + 1):
        t = grid.node(j)
        m = float(sol.Y[:, j].mean())
        se = float(sol.Y[:, j].std() / np.sqrt(P))
        k = float(sol.K[:, j].mean())
        if is_ex31:
            om = expected_y(t)
            rel = abs(m - om) / om
            worst = max(worst, rel)
            table.add_row(t, m, se, k, om, rel)
        else:
            table.add_row(t, m, se, k)

    lines = [f"solve: problem {cfg.problem}, P={P}, M={grid.steps}, T={grid.horizon}"]
    lines.append(f"Y_0 ensemble mean = {float(sol.Y[:, 0].mean()):.6f}")
    lines.append(str(inv))
    if is_ex31:
        curve_ok = worst <= cfg.tolerance
        ok = ok and curve_ok
        lines.append(
            f"mean curve vs closed form: max relative gap {worst:.4%} "
            f"(tolerance {cfg.tolerance:.2%}) -> {'pass' if curve_ok else 'FAIL'}"
        )
    return [table], "\n".join(lines), ok


def _run_converge_penalization(cfg: ExperimentConfig):
    from .penalization import penalization_sweep
    from .problems import make_problem
    from .stochastic import RngSeed

    problem = make_problem(cfg.problem)
    grid, noise, law = _law(problem, cfg, cfg.particles, RngSeed(cfg.seed))
    rep = penalization_sweep(
        problem, law, noise, _basis(cfg), levels=cfg.n_list, se_factor=cfg.se_factor
    )
    decreasing = all(b < a for a, b in zip(rep.distance, rep.distance[1:]))
    small = float(rep.distance[-1]) <= cfg.final_distance_max
    mono = all(v <= cfg.violation_max for v in rep.monotonicity_violations)
    ok = decreasing and small and mono
    table = ResultTable.from_records("penalization_ladder", rep.rows())
    lines = [
        str(rep),
        f"distances strictly decreasing -> {'pass' if decreasing else 'FAIL'}",
        f"final distance {float(rep.distance[-1]):.4g} <= {cfg.final_distance_max:.4g} "
        f"-> {'pass' if small else 'FAIL'}",
        f"monotonicity violations <= {cfg.violation_max:.2%} -> {'pass' if mono else 'FAIL'}",
    ]
    return [table], "\n".join(lines), ok


def _run_converge_particles(cfg: ExperimentConfig):
    from .particles import convergence_study
    from .problems import make_problem
    from .solver import solve_reflected
    from .stochastic import RngSeed

    problem = make_problem(cfg.problem)
    seed = RngSeed(cfg.seed)
    # the reference runs on its own stream so no universe shares its noise
    grid, noise, law = _law(problem, cfg, cfg.reference_particles, seed.child(9000))
    reference = solve_reflected(problem, law, noise, _basis(cfg), keep_fits=False)
    study = convergence_study(
        problem,
        cfg.N_list,
        reference,
        seed=seed,
        basis=_basis(cfg),
        sub_ensemble_size=cfg.sub_ensemble or None,
        total_budget=cfg.total_budget or None,
    )
    decreasing = all(b < a for a, b in zip(study.errors, study.errors[1:]))
    improved = study.errors[-1] <= study.errors[0] / cfg.improvement_min
    ok = decreasing and improved
    table = ResultTable.from_records("particle_convergence", study.rows())
    lines = [
        str(study),
        f"errors strictly decreasing -> {'pass' if decreasing else 'FAIL'}",
        f"error({study.N_list[-1]}) <= error({study.N_list[0]}) / {cfg.improvement_min:g} "
        f"-> {'pass' if improved else 'FAIL'}",
    ]
    return [table], "\n".join(lines), ok


def _run_pde_compare(cfg: ExperimentConfig):
    from .pde import (
        ProbeMcConfig,
        compare_with_probabilistic,
        default_space_grid,
        lipschitz_report,
        solve_obstacle_pde,
    )
    from .problems import make_problem
    from .stochastic import RngSeed

    problem = make_problem(cfg.problem)
    basis = _basis(cfg)
    seed = RngSeed(cfg.seed)
    probe_xs = tuple(x for _, x in cfg.probes)

    gap_table = ResultTable(
        name="pde_vs_probabilistic",
        columns=("level", "steps", "intervals", "law_particles", "flow_particles",
                 "t", "x", "u_lattice", "y_probabilistic", "gap", "se"),
    )
    max_gaps = []
    finest = None
    for level in range(cfg.refinements):
        scaled = ExperimentConfig(
            experiment=cfg.experiment,
            steps=cfg.steps * 4**level,
            horizon=cfg.horizon,
        )
        particles = cfg.particles * 8**level
        intervals = cfg.space_intervals * 4**level
        flow = cfg.flow_particles * 8**level
        grid, noise, law = _law(problem, scaled, particles, seed.child(level))
        space = default_space_grid(problem, grid, law, intervals=intervals, probes=probe_xs)
        u = solve_obstacle_pde(problem, space, law)
        if not u.valid:
            raise RuntimeError(
                f"level {level}: {u.clamped_fraction:.2%} of law states left the "
                f"space window; widen it or shrink the horizon"
            )
        mc = ProbeMcConfig(
            law=law, noise=noise, basis=basis, flow_particles=flow, seed=seed.child(100 + level)
        )
        rep = compare_with_probabilistic(u, problem, cfg.probes, mc)
        max_gaps.append(rep.max_gap)
        for r in rep.rows():
            gap_table.add_row(
                level, grid.steps, intervals, particles, flow,
                r["t"], r["x"], r["u_lattice"], r["y_probabilistic"], r["gap"], r["se"],
            )
        finest = (u, grid, law)

    u, grid, law = finest
    lip = lipschitz_report(problem, cfg.n_list, u.grid, law)
    lip_table = ResultTable.from_records("penalized_lipschitz", lip.rows())
    grid_table = ResultTable(name="pde_grid", columns=("t", "x", "u"))
    for i in range(u.grid.time.steps + 1):
        t = u.grid.time.node(i)
        for j, x in enumerate(u.grid.xs):
            grid_table.add_row(t, float(x), float(u.values[i, j]))

    shrinking = all(b < a for a, b in zip(max_gaps, max_gaps[1:]))
    small = max_gaps[-1] <= cfg.gap_max
    ok = shrinking and small
    lines = [f"lattice vs probabilistic, problem {cfg.problem}:"]
    for level, g in enumerate(max_gaps):
        lines.append(f"  refinement level {level}: max probe gap {g:.5f}")
    lines.append(
        f"final gap {max_gaps[-1]:.4g} <= {cfg.gap_max:.4g} -> {'pass' if small else 'FAIL'}"
    )
    if cfg.refinements > 1:
        lines.append(f"gaps shrink with refinement -> {'pass' if shrinking else 'FAIL'}")
    lines.append(str(lip))
    return [gap_table, lip_table, grid_table], "\n".join(lines), ok


def _run_example31_counterexample(cfg: ExperimentConfig):
    from .particles import comparison_counterexample
    from .stochastic import RngSeed, TimeGrid

    grid = TimeGrid(horizon=2.0, steps=cfg.steps)
    rep = comparison_counterexample(
        cfg.mc_size, grid, seed=RngSeed(cfg.seed), interaction=cfg.interaction
    )
    zero_exact = rep.yprime_max_abs == 0.0 and rep.kprime_terminal_max == 0.0
    close = rep.violation_gap <= cfg.gap_max
    frequent = rep.violation_fraction > cfg.violation_min
    ok = zero_exact and close and frequent
    table = ResultTable.from_records("comparison_counterexample", rep.rows())
    lines = [
        str(rep),
        f"zero-data solution identically zero -> {'pass' if zero_exact else 'FAIL'}",
        f"violation gap {rep.violation_gap:.4f} <= {cfg.gap_max:g} "
        f"-> {'pass' if close else 'FAIL'}",
        f"P(Y_1 < 0) = {rep.violation_fraction:.4f} > {cfg.violation_min:g} "
        f"-> {'pass' if frequent else 'FAIL'}",
    ]
    return [table], "\n".join(lines), ok


def _run_oracle(cfg: ExperimentConfig):
    from .oracle import binomial_american_put, example31_constants

    c = example31_constants()
    put = binomial_american_put(strike=100.0, rate=0.05, vol=0.2, spot=100.0, maturity=1.0)
    table = ResultTable(name="oracle_constants", columns=("quantity", "value"))
    rows = [
        ("example31_horizon", c.horizon),
        ("example31_terminal_mean", c.e_xi),
        ("example31_threshold", c.threshold),
        ("example31_violation_probability", c.violation_probability),
        ("american_put_binomial_2000", put),
    ]
    for name, value in rows:
        table.add_row(name, float(value))
    lines = ["closed-form oracle constants:"]
    lines += [f"  {name} = {float(value)!r}" for name, value in rows]
    return [table], "\n".join(lines), True


def _run_validate_problem(cfg: ExperimentConfig):
    import numpy as np

    from .forward import NumericalBlowupError, state_atoms
    from .problems import make_problem
    from .solver import InvariantReport
    from .stochastic import RngSeed

    problem = make_problem(cfg.problem)
    rep = InvariantReport()
    tol = cfg.bound_tolerance
    try:
        grid, noise, law = _law(problem, cfg, cfg.particles, RngSeed(cfg.seed))
        rep.add("forward ensemble finite", True, f"{law.particles} paths, {grid.steps} steps")
    except NumericalBlowupError as exc:
        rep.add("forward ensemble finite", False, str(exc))
        table = ResultTable(name="problem_validation", columns=("check", "passed", "detail"))
        for name, passed, detail in rep.checks:
            table.add_row(name, passed, detail)
        return [table], str(rep), False

    xT = law.terminal_states
    atoms, weights = state_atoms(xT)
    xi = problem.terminal(xT, atoms, weights)
    rep.add("terminal values finite", bool(np.isfinite(xi).all()), f"range {xi.min():.3g}..{xi.max():.3g}")
    if problem.has_obstacle:
        gap = float((xi - problem.obstacle_h(grid.horizon, xT)).min())
        rep.add(
            "terminal dominates obstacle at T",
            gap >= -tol * (1.0 + float(np.abs(xi).max())),
            f"min terminal - h(T) = {gap:.3g}",
        )
    if "terminal" in problem.bounds:
        b = problem.bounds["terminal"]
        worst = float(np.abs(xi).max())
        rep.add("terminal bound honored", worst <= b + tol, f"max |value| {worst:.3g} vs bound {b:g}")
    if problem.has_obstacle and "obstacle" in problem.bounds:
        b = problem.bounds["obstacle"]
        worst = max(
            float(np.abs(problem.obstacle_h(grid.node(i), law.at_node(i))).max())
            for i in range(0, grid.steps + 1, max(1, grid.steps // 8))
        )
        rep.add("obstacle bound honored", worst <= b + tol, f"max |h| {worst:.3g} vs bound {b:g}")
    if problem.b is not None and "b" in problem.bounds:
        b = problem.bounds["b"]
        x0s = law.at_node(0)
        worst = float(np.abs(problem.drift(0.0, x0s, atoms, weights)).max())
        rep.add("drift bound honored", worst <= b + tol, f"max |b~| {worst:.3g} vs bound {b:g}")

    if problem.driver_form != "none":
        batch = law.at_node(0)[:8]
        y0 = np.zeros(batch.shape[0])
        z0 = np.zeros((batch.shape[0], problem.noise_dim))
        ytilde_grid = np.linspace(-1.0, 1.0, 9)
        values = []
        for v in ytilde_grid:
            a = {"ytilde": np.array([v]), "xtilde": atoms.mean(axis=0, keepdims=True)}
            values.append(problem.driver(0.0, batch, y0, z0, a, np.array([1.0])))
        values = np.stack(values)
        rep.add("driver finite on ensemble", bool(np.isfinite(values).all()), f"{values.shape[0]} probe levels")
        if problem.g_nondecreasing_in_ytilde:
            worst = float(np.diff(values, axis=0).min())
            rep.add(
                "driver nondecreasing in mean-field value slot",
                worst >= -1e-12,
                f"min increment over y~ grid = {worst:.3g}",
            )

    table = ResultTable(name="problem_validation", columns=("check", "passed", "detail"))
    for name, passed, detail in rep.checks:
        table.add_row(name, passed, detail)
    summary = f"problem {cfg.problem}:\n" + str(rep)
    return [table], summary, rep.passed


_RUNNERS = {
    "solve": _run_solve,
    "converge-penalization": _run_converge_penalization,
    "converge-particles": _run_converge_particles,
    "pde-compare": _run_pde_compare,
    "example31-counterexample": _run_example31_counterexample,
    "oracle": _run_oracle,
    "validate-problem": _run_validate_problem,
}

_DESCRIPTIONS = {
    "solve": "one backward solve on a fresh law ensemble, with invariant checks",
    "converge-penalization": "penalty-level ladder against the reflected reference",
    "converge-particles": "interaction-size sweep against the mean-field limit",
    "pde-compare": "lattice obstacle solve cross-checked at probe points",
    "example31-counterexample": "ordered terminal data with unordered solutions",
    "oracle": "print the closed-form reference constants",
    "validate-problem": "check a registered problem's assumptions empirically",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rmfbsde",
        description="Reflected mean-field BSDE laboratory: seeded, config-driven experiments.",
        epilog=f"Any config key can be overridden via {ENV_PREFIX}<KEY> environment variables.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for name in EXPERIMENT_KEYS:
        p = sub.add_parser(name, help=_DESCRIPTIONS[name], description=_DESCRIPTIONS[name])
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--seed", metavar="U64", help="override the run seed")
        p.add_argument("--out", metavar="DIR", help="override the output directory")
        p.add_argument("--threads", metavar="N", help="cap numeric thread pools")
        if name == "validate-problem":
            p.add_argument("problem", nargs="?", help="problem name (overrides the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = Path(args.config).read_text() if args.config else ""
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        cfg = parse_config(text, default_experiment=args.experiment)
        cfg = apply_overrides(cfg, env_overrides(os.environ), "env")
        flags = {"seed": args.seed, "out": args.out, "threads": args.threads}
        if getattr(args, "problem", None):
            flags["problem"] = args.problem
        cfg = apply_overrides(cfg, {k: v for k, v in flags.items() if v is not None}, "flag")
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2

    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(cfg.threads)

    start = time.time()
    try:
        tables, summary, ok = _RUNNERS[cfg.experiment](cfg)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    wall = time.time() - start

    meta = {
        "experiment": cfg.experiment,
        "problem": cfg.problem,
        "seed": cfg.seed,
        "build": __version__,
        "wall_time_s": f"{wall:.2f}",
    }
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for table in tables:
        table.metadata = {**meta, **table.metadata}
        table.to_csv(out_dir / f"{table.name}.csv")

    status = f"experiment {cfg.experiment}: {'PASS' if ok else 'FAIL'} ({wall:.1f}s)"
    (out_dir / "summary.txt").write_text(summary + "\n" + status + "\n")
    print(summary)
    print(status)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

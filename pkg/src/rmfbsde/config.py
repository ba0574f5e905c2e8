"""Flat `key = value` experiment configs with per-experiment schemas.

A config file is UTF-8 text, one `key = value` pair per line, `#` starts
a comment, blank lines ignored.  Every key belongs to the schema of the
named experiment; unknown keys are rejected, and validation collects all
errors (with line numbers) instead of stopping at the first.

Values may be overridden without editing the file, in increasing
precedence: environment variables with the RMFBSDE_ prefix (for example
RMFBSDE_SEED=7), then command-line flags.  Overrides pass through the
same converters and validators as file lines.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

ENV_PREFIX = "RMFBSDE_"

PROBLEM_NAMES = (
    "example31",
    "american_put",
    "deterministic_obstacle",
    "benchmark_reflected_mf",
    "pde_benchmark",
)

DEFAULT_PDE_PROBES = ((0.25, -0.6), (0.25, 0.6), (0.5, 0.0), (0.5, 0.8), (0.75, -0.4), (0.75, 0.4))


class ConfigError(ValueError):
    """All validation problems of one config, each with its source location."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated knobs of one named experiment run.

    Fields not used by the experiment keep their defaults; the schema in
    EXPERIMENT_KEYS decides which keys a config file may set.  horizon 0
    means "use the problem's own horizon".
    """

    experiment: str
    problem: str = "example31"
    horizon: float = 0.0
    steps: int = 50
    particles: int = 4000
    basis: str = "piecewise_linear"
    degree: int = 3
    bins: int = 20
    seed: int = 7
    out: str = "results"
    threads: int = 1
    tolerance: float = 0.02
    n_list: tuple = (1, 4, 16, 64, 256)
    se_factor: float = 3.0
    final_distance_max: float = 5e-2
    violation_max: float = 0.01
    N_list: tuple = (8, 32, 128, 512)
    total_budget: int = 0
    sub_ensemble: int = 0
    improvement_min: float = 3.0
    reference_particles: int = 4000
    space_intervals: int = 12
    flow_particles: int = 300
    refinements: int = 3
    probes: tuple = DEFAULT_PDE_PROBES
    gap_max: float = 5e-2
    mc_size: int = 20000
    interaction: int = 32
    violation_min: float = 0.3
    bound_tolerance: float = 1e-6


def _parse_int(s: str) -> int:
    return int(s.strip())


def _parse_float(s: str) -> float:
    return float(s.strip())


def _parse_str(s: str) -> str:
    return s.strip()


def _parse_int_list(s: str) -> tuple:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _parse_probes(s: str) -> tuple:
    """Probe points as comma-separated t:x pairs, e.g. '0.25:-0.6, 0.5:0.8'."""
    pairs = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        t, _, x = part.partition(":")
        if not _:
            raise ValueError(f"probe {part!r} is not a t:x pair")
        pairs.append((float(t), float(x)))
    if not pairs:
        raise ValueError("empty probe list")
    return tuple(pairs)


def _increasing_positive(v: tuple) -> bool:
    return all(n >= 1 for n in v) and all(b > a for a, b in zip(v, v[1:]))


@dataclass(frozen=True)
class _Field:
    parse: callable
    typename: str
    check: callable = None
    constraint: str = ""


_FIELDS = {
    "experiment": _Field(_parse_str, "str"),
    "problem": _Field(
        _parse_str, "str", lambda v: v in PROBLEM_NAMES, f"must be one of {PROBLEM_NAMES}"
    ),
    "horizon": _Field(_parse_float, "float", lambda v: v >= 0.0, "must be >= 0 (0 = problem's own)"),
    "steps": _Field(_parse_int, "int", lambda v: v >= 1, "must be >= 1"),
    "particles": _Field(_parse_int, "int", lambda v: v >= 1, "must be >= 1"),
    "basis": _Field(
        _parse_str,
        "str",
        lambda v: v in ("polynomial", "piecewise_linear"),
        "must be 'polynomial' or 'piecewise_linear'",
    ),
    "degree": _Field(_parse_int, "int", lambda v: v >= 0, "must be >= 0"),
    "bins": _Field(_parse_int, "int", lambda v: v >= 2, "must be >= 2"),
    "seed": _Field(_parse_int, "int", lambda v: v >= 0, "must be >= 0"),
    "out": _Field(_parse_str, "str"),
    "threads": _Field(_parse_int, "int", lambda v: v >= 1, "must be >= 1"),
    "tolerance": _Field(_parse_float, "float", lambda v: v > 0.0, "must be > 0"),
    "n_list": _Field(
        _parse_int_list, "int list", _increasing_positive, "must be strictly increasing, all >= 1"
    ),
    "se_factor": _Field(_parse_float, "float", lambda v: v > 0.0, "must be > 0"),
    "final_distance_max": _Field(_parse_float, "float", lambda v: v > 0.0, "must be > 0"),
    "violation_max": _Field(_parse_float, "float", lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]"),
    "N_list": _Field(
        _parse_int_list, "int list", _increasing_positive, "must be strictly increasing, all >= 1"
    ),
    "total_budget": _Field(_parse_int, "int", lambda v: v >= 0, "must be >= 0 (0 = unset)"),
    "sub_ensemble": _Field(_parse_int, "int", lambda v: v >= 0, "must be >= 0 (0 = unset)"),
    "improvement_min": _Field(_parse_float, "float", lambda v: v >= 1.0, "must be >= 1"),
    "reference_particles": _Field(_parse_int, "int", lambda v: v >= 100, "must be >= 100"),
    "space_intervals": _Field(_parse_int, "int", lambda v: v >= 2, "must be >= 2"),
    "flow_particles": _Field(_parse_int, "int", lambda v: v >= 100, "must be >= 100"),
    "refinements": _Field(_parse_int, "int", lambda v: 1 <= v <= 5, "must lie in 1..5"),
    "probes": _Field(_parse_probes, "t:x pairs", lambda v: len(v) >= 1, "needs at least one probe"),
    "gap_max": _Field(_parse_float, "float", lambda v: v > 0.0, "must be > 0"),
    "mc_size": _Field(_parse_int, "int", lambda v: v >= 100, "must be >= 100"),
    "interaction": _Field(_parse_int, "int", lambda v: v >= 1, "must be >= 1"),
    "violation_min": _Field(_parse_float, "float", lambda v: 0.0 <= v < 1.0, "must lie in [0, 1)"),
    "bound_tolerance": _Field(_parse_float, "float", lambda v: v > 0.0, "must be > 0"),
}

_COMMON = (
    "experiment", "problem", "horizon", "steps", "particles",
    "basis", "degree", "bins", "seed", "out", "threads",
)

EXPERIMENT_KEYS = {
    "solve": _COMMON + ("tolerance",),
    "converge-penalization": _COMMON
    + ("n_list", "se_factor", "final_distance_max", "violation_max"),
    "converge-particles": _COMMON
    + ("N_list", "total_budget", "sub_ensemble", "improvement_min", "reference_particles"),
    "pde-compare": _COMMON
    + ("space_intervals", "flow_particles", "refinements", "probes", "gap_max", "n_list"),
    "example31-counterexample": _COMMON
    + ("mc_size", "interaction", "gap_max", "violation_min"),
    "oracle": _COMMON,
    "validate-problem": _COMMON + ("bound_tolerance",),
}

_EXPERIMENT_DEFAULTS = {
    "converge-penalization": {"problem": "benchmark_reflected_mf", "steps": 50},
    "converge-particles": {"problem": "benchmark_reflected_mf", "steps": 50},
    "pde-compare": {"problem": "pde_benchmark", "steps": 8, "particles": 300},
    "example31-counterexample": {"problem": "example31", "steps": 100},
}


def _convert(key: str, raw: str, where: str, errors: list) -> tuple:
    """(ok, value); appends a located message to errors otherwise."""
    spec = _FIELDS[key]
    try:
        value = spec.parse(raw)
    except ValueError as exc:
        errors.append(f"{where}: {key} expects {spec.typename}, got {raw!r} ({exc})")
        return False, None
    if spec.check is not None and not spec.check(value):
        errors.append(f"{where}: {key} {spec.constraint}, got {raw.strip()!r}")
        return False, None
    return True, value


def parse_config(text: str, *, default_experiment: str | None = None) -> ExperimentConfig:
    """Parse and validate one flat config; collect every error before raising.

    The experiment may come from the text (`experiment = ...`) or from
    default_experiment (the CLI subcommand); when both are present they
    must agree.
    """
    errors: list[str] = []
    seen: dict[str, tuple] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = (part.strip() for part in body.partition("="))
        if not sep or not key or not value:
            errors.append(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
            continue
        if key in seen:
            errors.append(
                f"line {lineno}: duplicate key {key!r} (first set on line {seen[key][1]})"
            )
            continue
        seen[key] = (value, lineno)

    experiment = default_experiment
    if "experiment" in seen:
        experiment = seen.pop("experiment")[0]
        if default_experiment is not None and experiment != default_experiment:
            errors.append(
                f"config names experiment {experiment!r} but the "
                f"{default_experiment!r} subcommand was invoked"
            )
    if experiment is None:
        errors.append("missing required key 'experiment'")
        raise ConfigError(errors)
    if experiment not in EXPERIMENT_KEYS:
        errors.append(
            f"unknown experiment {experiment!r}; valid: {', '.join(sorted(EXPERIMENT_KEYS))}"
        )
        raise ConfigError(errors)

    allowed = EXPERIMENT_KEYS[experiment]
    values = dict(_EXPERIMENT_DEFAULTS.get(experiment, {}))
    for key, (raw, lineno) in seen.items():
        where = f"line {lineno}"
        if key not in _FIELDS or key not in allowed:
            errors.append(f"{where}: unknown key {key!r} for experiment {experiment!r}")
            continue
        ok, value = _convert(key, raw, where, errors)
        if ok:
            values[key] = value
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(experiment=experiment, **values)


def apply_overrides(config: ExperimentConfig, pairs: dict, source: str) -> ExperimentConfig:
    """Re-validate and apply raw key=value overrides (env vars, CLI flags)."""
    errors: list[str] = []
    allowed = EXPERIMENT_KEYS[config.experiment]
    values = {}
    for key, raw in pairs.items():
        where = f"{source} {key}"
        if key not in _FIELDS or key not in allowed:
            errors.append(f"{where}: unknown key {key!r} for experiment {config.experiment!r}")
            continue
        ok, value = _convert(key, str(raw), where, errors)
        if ok:
            values[key] = value
    if errors:
        raise ConfigError(errors)
    return replace(config, **values)


def env_overrides(environ) -> dict:
    """Pick RMFBSDE_-prefixed variables that name known config keys."""
    out = {}
    for key in _FIELDS:
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            out[key] = raw
    return out


# every schema key must be an ExperimentConfig field
assert set(_FIELDS) <= {f.name for f in fields(ExperimentConfig)}

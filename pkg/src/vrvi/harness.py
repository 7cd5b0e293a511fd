"""Experiment orchestration: configs, step-size tuning, multi-seed runs,
CSV/plot emission and the bound-verification suite.

Everything is deterministic end to end: a config file maps to byte-identical
output files, except the clearly named wall-clock column (``elapsed_s`` in
per-run CSVs), which is the only nondeterministic field anywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .analysis import (
    AggregateStats,
    aggregate,
    complexity_audit,
    verify_lemma1,
    verify_lemma2,
    verify_theorem1,
    write_verification_report,
)
from .problems import (
    BilinearProblem,
    GeneratorSpec,
    check_cocoercivity,
    check_strong_monotonicity,
    generate_bilinear,
    save_problem,
)
from .solvers import (
    Method,
    SolverConfig,
    run,
    theorem_preset,
    write_run_csv,
    write_run_metadata,
)

__all__ = [
    "ComparisonTable",
    "ConfigError",
    "ExperimentConfig",
    "GridSearchError",
    "REGIME_TARGET_ELL",
    "emit_plot",
    "grid_search",
    "load_table",
    "parse_config",
    "run_experiment",
    "verify_cli",
]

REGIME_TARGET_ELL = {"small": 1e2, "medium": 1e3, "big": 1e4}

# Default step-size grids, as multiples of 1/ell.  The variance-reduced
# methods tolerate steps near 1/ell; plain SGD needs far smaller ones.
DEFAULT_GRID_VR = (2.0 / 9.0, 0.5, 1.0, 2.0)
DEFAULT_GRID_SGD = (0.01, 0.1, 0.5, 1.0)

TUNING_SEEDS = 3

AGGREGATE_CSV_HEADER = ("oracle_calls", "mean_residual_sq", "std_residual_sq",
                        "mean_dist_sq")

_PLOT_FLOOR = 1e-32


class ConfigError(ValueError):
    """Configuration file or flag rejected; message names the key and line."""


class GridSearchError(RuntimeError):
    """No step-size candidate survived tuning."""


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorSpec
    methods: tuple[Method, ...]
    regime: str
    oracle_budget: int
    seeds: tuple[int, ...]
    output_dir: Path
    checkpoint_every: int = 2000
    gamma_grid: tuple[float, ...] | None = None
    theorem_seeds: int = 100
    lemma_seeds: int = 200
    checker_trials: int = 10_000
    theorem_gamma: float | None = None


@dataclass(frozen=True)
class ComparisonTable:
    """Per-method aggregates on one oracle-call grid for one instance."""

    stats: Mapping[str, AggregateStats]
    gammas: Mapping[str, float]
    problem_hash: str
    oracle_budget: int
    regime: str


_CONFIG_VERSION = "1"

_REQUIRED_KEYS = (
    "config_version", "n", "d", "lambda", "regime", "problem_seed",
    "methods", "seeds", "oracle_budget", "output_dir",
)
_OPTIONAL_KEYS = (
    "checkpoint_every", "gamma_grid", "theorem_seeds", "lemma_seeds",
    "checker_trials", "theorem_gamma",
)
_KNOWN_KEYS = frozenset(_REQUIRED_KEYS) | frozenset(_OPTIONAL_KEYS)


def _read_raw_config(path: Path) -> dict[str, tuple[str, int]]:
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{path}: line {lineno}: unknown key '{key}'")
        if key in raw:
            raise ConfigError(f"{path}: line {lineno}: duplicate key '{key}'")
        if not value:
            raise ConfigError(f"{path}: line {lineno}: key '{key}' has no value")
        raw[key] = (value, lineno)
    return raw


class _ConfigReader:
    def __init__(self, raw: Mapping[str, tuple[str, int]], source: str):
        self.raw = raw
        self.source = source

    def _fail(self, key: str, message: str):
        line = self.raw[key][1] if key in self.raw else "?"
        raise ConfigError(f"{self.source}: line {line}: key '{key}': {message}")

    def require(self, key: str) -> str:
        if key not in self.raw:
            raise ConfigError(f"{self.source}: missing required key '{key}'")
        return self.raw[key][0]

    def optional(self, key: str, default=None):
        return self.raw[key][0] if key in self.raw else default

    def integer(self, key: str, value: str, minimum: int = 1) -> int:
        try:
            out = int(value)
        except ValueError:
            self._fail(key, f"expected an integer, got '{value}'")
        if out < minimum:
            self._fail(key, f"must be at least {minimum}, got {out}")
        return out

    def number(self, key: str, value: str, positive: bool = True) -> float:
        try:
            out = float(value)
        except ValueError:
            self._fail(key, f"expected a number, got '{value}'")
        if positive and out <= 0:
            self._fail(key, f"must be positive, got {out}")
        return out

    def int_list(self, key: str, value: str) -> tuple[int, ...]:
        try:
            items = tuple(int(tok) for tok in value.split(",") if tok.strip())
        except ValueError:
            self._fail(key, f"expected comma-separated integers, got '{value}'")
        if not items:
            self._fail(key, "list is empty")
        return items

    def float_list(self, key: str, value: str) -> tuple[float, ...]:
        try:
            items = tuple(float(tok) for tok in value.split(",") if tok.strip())
        except ValueError:
            self._fail(key, f"expected comma-separated numbers, got '{value}'")
        if not items or any(x <= 0 for x in items):
            self._fail(key, "values must be positive")
        return items


def _build_config(raw: Mapping[str, tuple[str, int]], source: str) -> ExperimentConfig:
    reader = _ConfigReader(raw, source)
    version = reader.require("config_version")
    if version != _CONFIG_VERSION:
        reader._fail("config_version", f"unsupported version '{version}'")
    regime = reader.require("regime")
    if regime not in REGIME_TARGET_ELL:
        reader._fail(
            "regime",
            f"invalid regime '{regime}' (choose from {sorted(REGIME_TARGET_ELL)})",
        )
    n = reader.integer("n", reader.require("n"))
    d = reader.integer("d", reader.require("d"))
    lam = reader.number("lambda", reader.require("lambda"))
    problem_seed = reader.integer("problem_seed", reader.require("problem_seed"), 0)
    methods = _parse_methods(reader, reader.require("methods"))
    seeds = reader.int_list("seeds", reader.require("seeds"))
    if len(set(seeds)) != len(seeds):
        reader._fail("seeds", "duplicate seeds are not allowed")
    budget = reader.integer("oracle_budget", reader.require("oracle_budget"))
    if budget < n:
        reader._fail("oracle_budget", f"must cover one full pass (n = {n})")
    output_dir = Path(reader.require("output_dir"))
    every = reader.integer("checkpoint_every", reader.optional("checkpoint_every", "2000"))
    gamma_grid = None
    if "gamma_grid" in raw:
        gamma_grid = reader.float_list("gamma_grid", raw["gamma_grid"][0])
    theorem_gamma = None
    if "theorem_gamma" in raw:
        theorem_gamma = reader.number("theorem_gamma", raw["theorem_gamma"][0])
    target_ell = REGIME_TARGET_ELL[regime]
    if target_ell < lam:
        reader._fail("lambda", f"lambda exceeds the regime target ell {target_ell}")
    return ExperimentConfig(
        generator=GeneratorSpec(n=n, d=d, lam=lam, target_ell=target_ell,
                                seed=problem_seed),
        methods=methods,
        regime=regime,
        oracle_budget=budget,
        seeds=seeds,
        output_dir=output_dir,
        checkpoint_every=every,
        gamma_grid=gamma_grid,
        theorem_seeds=reader.integer("theorem_seeds",
                                     reader.optional("theorem_seeds", "100")),
        lemma_seeds=reader.integer("lemma_seeds",
                                   reader.optional("lemma_seeds", "200")),
        checker_trials=reader.integer("checker_trials",
                                      reader.optional("checker_trials", "10000")),
        theorem_gamma=theorem_gamma,
    )


def _parse_methods(reader: _ConfigReader, value: str) -> tuple[Method, ...]:
    names = [tok.strip().lower() for tok in value.split(",") if tok.strip()]
    if not names:
        reader._fail("methods", "list is empty")
    out = []
    for name in names:
        try:
            out.append(Method(name))
        except ValueError:
            reader._fail(
                "methods",
                f"unknown method '{name}' (choose from {[m.value for m in Method]})",
            )
    if len(set(out)) != len(out):
        reader._fail("methods", "duplicate methods are not allowed")
    return tuple(out)


def parse_config(path, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Load and validate an experiment config (strict: unknown keys are errors).

    ``overrides`` maps config keys to replacement raw values (CLI flags); they
    are applied before validation.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = _read_raw_config(path)
    if overrides:
        for key, value in overrides.items():
            if key not in _KNOWN_KEYS:
                raise ConfigError(f"override: unknown key '{key}'")
            raw[key] = (value, raw[key][1] if key in raw else 0)
    return _build_config(raw, str(path))


def _vr_epoch_calls(method: Method, n: int, inner_steps: int) -> int:
    if method is Method.SARAH:
        return n + 2 * (inner_steps - 1)
    if method is Method.SVRG:
        return n + 2 * inner_steps
    return inner_steps


def _method_config(problem, method: Method, gamma: float, budget: int,
                   seed: int, checkpoint_every: int) -> SolverConfig:
    """Budgeted config with the experiment inner length K = ceil(ell/mu)."""
    inner = max(1, math.ceil(problem.ell / problem.mu))
    per_epoch = _vr_epoch_calls(method, problem.n, inner)
    epochs = max(1, math.ceil(budget / per_epoch))
    return SolverConfig(
        method=method,
        gamma=gamma,
        inner_steps=inner,
        epochs=epochs,
        seed=seed,
        checkpoint_every=checkpoint_every,
        oracle_budget=budget,
    )


def grid_search(problem, method: Method, budget: int, seeds: Sequence[int],
                gamma_grid: Sequence[float] | None = None,
                checkpoint_every: int = 2000) -> float:
    """Pick the step with the smallest mean final squared residual.

    Each candidate runs on a reduced seed set to the full budget; divergent
    candidates are excluded; exact ties resolve to the smaller step.
    """
    if gamma_grid is None:
        base = DEFAULT_GRID_VR if method is not Method.SGD else DEFAULT_GRID_SGD
        gamma_grid = tuple(c / problem.ell for c in base)
    candidates = sorted(set(float(g) for g in gamma_grid))
    if not candidates or any(g <= 0 for g in candidates):
        raise ValueError("gamma_grid must contain positive step sizes")
    tuning_seeds = tuple(seeds)[:TUNING_SEEDS]
    if not tuning_seeds:
        raise ValueError("grid search needs at least one seed")
    z0 = np.zeros(problem.dimension)
    best_gamma = None
    best_score = math.inf
    for gamma in candidates:
        finals = []
        for seed in tuning_seeds:
            config = _method_config(problem, method, gamma, budget, seed,
                                    checkpoint_every)
            record = run(problem, config, z0)
            if record.status != "ok":
                finals = None
                break
            finals.append(record.final_residual_sq)
        if finals is None:
            continue
        score = float(np.mean(finals))
        if score < best_score:
            best_gamma = gamma
            best_score = score
    if best_gamma is None:
        raise GridSearchError(
            f"all {len(candidates)} step-size candidates diverged for "
            f"{method.value}; retry with smaller gamma_grid values"
        )
    return best_gamma


class _OutputSession:
    """Tracks files created by one experiment so aborts leave no partial output."""

    def __init__(self):
        self.paths: list[Path] = []
        self.dirs: list[Path] = []

    def mkdir(self, path: Path) -> Path:
        missing = []
        probe = path
        while not probe.exists():
            missing.append(probe)
            probe = probe.parent
        if missing:
            path.mkdir(parents=True)
            self.dirs.extend(reversed(missing))
        return path

    def register(self, path: Path) -> Path:
        self.paths.append(path)
        return path

    def discard_all(self):
        for path in reversed(self.paths):
            try:
                path.unlink(missing_ok=True)
            except OSError:
                pass
        for path in reversed(self.dirs):
            try:
                path.rmdir()
            except OSError:
                pass


def _write_aggregate_csv(stats: AggregateStats, path: Path):
    lines = [",".join(AGGREGATE_CSV_HEADER)]
    for idx in range(stats.grid.shape[0]):
        lines.append(
            f"{int(stats.grid[idx])},{float(stats.mean_residual_sq[idx])!r},"
            f"{float(stats.std_residual_sq[idx])!r},{float(stats.mean_dist_sq[idx])!r}"
        )
    path.write_text("\n".join(lines) + "\n")


def _read_aggregate_csv(path: Path) -> AggregateStats:
    lines = path.read_text().splitlines()
    if not lines or tuple(lines[0].split(",")) != AGGREGATE_CSV_HEADER:
        raise ValueError(f"{path}: unexpected aggregate CSV header")
    rows = [line.split(",") for line in lines[1:]]
    grid = np.array([int(r[0]) for r in rows], dtype=np.int64)
    return AggregateStats(
        grid=grid,
        mean_residual_sq=np.array([float(r[1]) for r in rows]),
        std_residual_sq=np.array([float(r[2]) for r in rows]),
        mean_dist_sq=np.array([float(r[3]) for r in rows]),
        n_seeds=0,
    )


def run_experiment(config: ExperimentConfig) -> ComparisonTable:
    """Generate the instance, tune and run every method over all seeds, and
    write per-run CSVs, aggregate CSVs, a manifest and the comparison plot."""
    if not config.methods:
        raise ConfigError("at least one method is required")
    if len(set(config.seeds)) != len(config.seeds):
        raise ConfigError("duplicate seeds are not allowed")
    if config.oracle_budget < config.generator.n:
        raise ConfigError("oracle_budget must cover at least one full pass")

    problem = generate_bilinear(config.generator)
    z0 = np.zeros(problem.dimension)
    grid = np.arange(0, config.oracle_budget + 1, config.checkpoint_every,
                     dtype=np.int64)
    session = _OutputSession()
    try:
        out = Path(config.output_dir)
        session.mkdir(out)
        save_problem(problem, session.register(out / "problem.txt"))
        stats: dict[str, AggregateStats] = {}
        gammas: dict[str, float] = {}
        for method in config.methods:
            gamma = grid_search(problem, method, config.oracle_budget, config.seeds,
                                config.gamma_grid, config.checkpoint_every)
            run_dir = session.mkdir(out / "runs" / method.value)
            records = []
            for seed in config.seeds:
                cfg = _method_config(problem, method, gamma, config.oracle_budget,
                                     seed, config.checkpoint_every)
                record = run(problem, cfg, z0)
                if record.status != "ok":
                    raise RuntimeError(
                        f"{method.value} run with seed {seed} aborted with "
                        f"status '{record.status}' at tuned gamma {gamma:.6g}"
                    )
                records.append(record)
                write_run_csv(record, session.register(run_dir / f"seed_{seed}.csv"))
                write_run_metadata(record,
                                   session.register(run_dir / f"seed_{seed}.json"))
            method_stats = aggregate(records, grid=grid)
            _write_aggregate_csv(
                method_stats,
                session.register(out / f"aggregate_{method.value}.csv"),
            )
            stats[method.value] = method_stats
            gammas[method.value] = gamma
        table = ComparisonTable(
            stats=stats,
            gammas=gammas,
            problem_hash=problem.problem_hash(),
            oracle_budget=config.oracle_budget,
            regime=config.regime,
        )
        manifest = {
            "tool_version": __version__,
            "problem_hash": table.problem_hash,
            "problem_file": "problem.txt",
            "regime": config.regime,
            "oracle_budget": config.oracle_budget,
            "checkpoint_every": config.checkpoint_every,
            "seeds": list(config.seeds),
            "methods": {m.value: {"gamma": gammas[m.value]} for m in config.methods},
            "generator": {
                "n": config.generator.n,
                "d": config.generator.d,
                "lambda": config.generator.lam,
                "target_ell": config.generator.target_ell,
                "seed": config.generator.seed,
            },
        }
        manifest_path = session.register(out / "manifest.json")
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        emit_plot(table, session.register(out / f"comparison_{config.regime}.svg"))
    except BaseException:
        session.discard_all()
        raise
    return table


def emit_plot(table: ComparisonTable, path) -> Path:
    """Residual curves on a log scale, one series per method (SVG output is
    byte-deterministic for fixed input)."""
    if not table.stats:
        raise ValueError("comparison table has no series")
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    path = Path(path)
    with plt.rc_context({"svg.hashsalt": "vrvi"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.5))
        clamped = False
        for name in sorted(table.stats):
            stats = table.stats[name]
            if stats.grid.size == 0:
                raise ValueError(f"series for '{name}' is empty")
            series = np.maximum(stats.mean_residual_sq, _PLOT_FLOOR)
            clamped = clamped or bool(np.any(stats.mean_residual_sq < _PLOT_FLOOR))
            ax.plot(stats.grid, series, label=name)
        ax.set_yscale("log")
        ax.set_xlabel("oracle calls")
        ax.set_ylabel("mean squared residual")
        ax.set_title(f"{table.regime} regime")
        if clamped:
            ax.axhline(_PLOT_FLOOR, color="grey", linestyle=":", linewidth=1)
            ax.annotate("clamped at numeric floor", xy=(0.02, 0.04),
                        xycoords="axes fraction", fontsize=8, color="grey")
        ax.legend()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def load_table(output_dir) -> ComparisonTable:
    """Rebuild a comparison table from a previous run's aggregate CSVs."""
    out = Path(output_dir)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json under {out}")
    manifest = json.loads(manifest_path.read_text())
    stats = {}
    for name in manifest["methods"]:
        csv_path = out / f"aggregate_{name}.csv"
        if not csv_path.exists():
            raise ConfigError(f"missing aggregate CSV: {csv_path}")
        stats[name] = _read_aggregate_csv(csv_path)
    return ComparisonTable(
        stats=stats,
        gammas={name: spec["gamma"] for name, spec in manifest["methods"].items()},
        problem_hash=manifest["problem_hash"],
        oracle_budget=manifest["oracle_budget"],
        regime=manifest["regime"],
    )


def verify_cli(config: ExperimentConfig) -> int:
    """Run the assumption checkers and every bound verifier; print one
    pass/fail line per check and return 0 only if all gating checks pass."""
    problem = generate_bilinear(config.generator)
    checks: list[dict] = []

    mono = check_strong_monotonicity(problem, problem.mu,
                                     trials=config.checker_trials, seed=0)
    checks.append({
        "name": "strong_monotonicity",
        "passed": mono.violations == 0,
        "measured": mono.worst_ratio,
        "bound": 1.0,
        "details": f"{mono.violations} violations over {mono.trials} pairs",
    })

    resid = math.sqrt(problem.residual_sq(problem.exact_solution))
    scale = max(1.0, math.sqrt(problem.residual_sq(np.zeros(problem.dimension))))
    checks.append({
        "name": "exact_solution_residual",
        "passed": resid <= 1e-9 * scale,
        "measured": resid,
        "bound": 1e-9 * scale,
        "details": "||F(z*)|| against 1e-9 * max(1, ||F(0)||)",
    })

    # Per-component cocoercivity at the aggregate ell is reported, not
    # gated: the aggregate constant may understate individual components.
    coco_trials = max(1, config.checker_trials // max(1, problem.n))
    worst = 0.0
    total_violations = 0
    for i in range(problem.n):
        rep = check_cocoercivity(problem, i, problem.ell, trials=coco_trials, seed=i)
        worst = max(worst, rep.worst_ratio)
        total_violations += rep.violations
    checks.append({
        "name": "cocoercivity_components",
        "passed": None,
        "measured": worst,
        "bound": 1.0,
        "details": (
            f"informational: {total_violations} violations over "
            f"{coco_trials * problem.n} pairs at the aggregate ell"
        ),
    })

    gamma = 2.0 / (9.0 * problem.ell)
    if config.theorem_gamma is not None and not math.isclose(
            config.theorem_gamma, gamma, rel_tol=1e-9):
        raise ConfigError(
            f"theorem_gamma must equal the preset 2/(9*ell) = {gamma:.6g}, "
            f"got {config.theorem_gamma:.6g}"
        )
    inner = math.ceil(10.0 * problem.ell / problem.mu)

    lemma1 = verify_lemma1(problem, gamma, inner, config.lemma_seeds)
    checks.append({
        "name": "lemma1_direction_decay",
        "passed": lemma1.passed,
        "measured": lemma1.max_violation_ratio,
        "bound": 1.1,
        "details": f"{lemma1.n_seeds} seeds, K = {inner}",
    })

    lemma2 = verify_lemma2(problem, gamma, inner, config.lemma_seeds)
    checks.append({
        "name": "lemma2_direction_drift",
        "passed": lemma2.passed,
        "measured": lemma2.ratio,
        "bound": 1.1,
        "details": f"drift {lemma2.measured_drift:.3e} vs bound {lemma2.bound:.3e}",
    })

    theorem = verify_theorem1(problem, config.theorem_seeds,
                              gamma=config.theorem_gamma)
    worst_ratio = max(
        theorem.per_epoch_ratios[: None if theorem.floor_epoch is None
                                 else theorem.floor_epoch - 1],
        default=0.0,
    )
    checks.append({
        "name": "theorem1_contraction",
        "passed": theorem.passed,
        "measured": worst_ratio,
        "bound": theorem.pass_threshold,
        "details": (
            f"{len(theorem.per_epoch_ratios)} epochs, floor at "
            f"{theorem.floor_epoch}, {theorem.n_seeds} seeds"
        ),
    })

    z0 = np.zeros(problem.dimension)
    initial = problem.residual_sq(z0)
    epsilon = math.sqrt(initial * 2.0**-10)
    audit_epochs = 14  # halving guarantee needs 10; margin for the floor
    record = run(problem, theorem_preset(problem, epochs=audit_epochs, seed=0), z0)
    audit = complexity_audit(record, epsilon)
    audit_ok = (not audit.unreachable) and audit.actual_calls <= audit.predicted_calls
    checks.append({
        "name": "oracle_complexity_audit",
        "passed": audit_ok,
        "measured": audit.actual_calls,
        "bound": audit.predicted_calls,
        "details": (
            f"target eps^2 = 2^-10 * initial; predicted {audit.predicted_epochs} "
            f"epochs x {audit.per_epoch_calls} calls"
        ),
    })

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_verification_report(out / "verification_report.json", checks)

    width = max(len(c["name"]) for c in checks)
    for c in checks:
        status = "INFO" if c["passed"] is None else ("PASS" if c["passed"] else "FAIL")
        print(f"{c['name']:<{width}}  {status}  measured={c['measured']!r} "
              f"bound={c['bound']!r}  ({c['details']})")
    gating = [c for c in checks if c["passed"] is not None]
    all_passed = all(c["passed"] for c in gating)
    print(f"verification: {'all checks passed' if all_passed else 'FAILURES present'}")
    return 0 if all_passed else 1

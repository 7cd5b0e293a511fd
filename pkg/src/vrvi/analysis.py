"""Cross-seed aggregation and empirical verification of convergence bounds.

Expectations over the sampling randomness are estimated by sample means
across seeds.  Each verifier compares a Monte-Carlo estimate against the
corresponding analytic bound and passes only within a small stated slack
(x1.1 for the inner-loop bounds, +0.1 on the per-epoch contraction factor),
so variance is surfaced rather than hidden.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .problems import FiniteSumProblem, check_strong_monotonicity
from .solvers import Method, RunRecord, sample_indices, sarah_epoch

__all__ = [
    "AggregateStats",
    "ComplexityAudit",
    "ContractionReport",
    "Lemma1Report",
    "Lemma2Report",
    "aggregate",
    "complexity_audit",
    "predicted_epochs",
    "verify_lemma1",
    "verify_lemma2",
    "verify_theorem1",
    "write_verification_report",
]

# An epoch is "at the numeric floor" once its mean squared residual falls
# below this multiple of the initial one; contraction cannot be observed
# past round-off.
FLOOR_FACTOR = 1e3 * float(np.finfo(np.float64).eps) ** 2

LEMMA_SLACK = 1.1
CONTRACTION_THRESHOLD = 0.6  # 0.5 guarantee + 0.1 Monte-Carlo slack


@dataclass(frozen=True)
class AggregateStats:
    """Pointwise cross-seed statistics on a common oracle-call grid."""

    grid: np.ndarray
    mean_residual_sq: np.ndarray
    std_residual_sq: np.ndarray
    mean_dist_sq: np.ndarray
    n_seeds: int


@dataclass(frozen=True)
class Lemma1Report:
    """Decay of the recursive direction against (1 - gamma*mu)^k."""

    max_violation_ratio: float
    per_step_ratios: tuple[float, ...]
    n_seeds: int
    gamma: float
    inner_steps: int
    passed: bool


@dataclass(frozen=True)
class Lemma2Report:
    """Drift between the recursive direction and the true operator at the
    end of one inner loop, against gamma*ell/(2 - gamma*ell)."""

    ratio: float
    measured_drift: float
    bound: float
    n_seeds: int
    passed: bool


@dataclass(frozen=True)
class ContractionReport:
    """Per-epoch ratios of mean squared residuals under the preset step."""

    per_epoch_ratios: tuple[float, ...]
    mean_residuals: tuple[float, ...]
    floor_epoch: int | None
    n_seeds: int
    passed: bool
    theorem_bound: float = 0.5
    pass_threshold: float = CONTRACTION_THRESHOLD


@dataclass(frozen=True)
class ComplexityAudit:
    """Predicted versus measured oracle calls to reach a target residual."""

    predicted_calls: int
    predicted_epochs: int
    per_epoch_calls: int
    formula_calls: int
    recorded_calls: int
    actual_calls: int | None
    unreachable: bool

    @property
    def ratio(self) -> float | None:
        if self.actual_calls is None or self.predicted_calls == 0:
            return None
        return self.actual_calls / self.predicted_calls


def _seed_list(seeds) -> tuple[int, ...]:
    if isinstance(seeds, (int, np.integer)):
        if seeds < 1:
            raise ValueError("need at least one seed")
        return tuple(range(int(seeds)))
    out = tuple(int(s) for s in seeds)
    if not out:
        raise ValueError("need at least one seed")
    return out


def aggregate(records: Sequence[RunRecord], grid=None) -> AggregateStats:
    """Pointwise mean and sample standard deviation across seeds.

    Records must share method, step size, loop lengths, checkpoint cadence
    and problem hash.  Values are aligned onto the common grid by carrying
    the last observation forward, and records are sorted by seed first so
    the result is exactly permutation-invariant.
    """
    records = sorted(records, key=lambda r: r.config.seed)
    if len(records) < 2:
        raise ValueError("aggregate needs at least two records")
    head = records[0]
    for rec in records[1:]:
        same = (
            rec.config.method is head.config.method
            and rec.config.gamma == head.config.gamma
            and rec.config.inner_steps == head.config.inner_steps
            and rec.config.epochs == head.config.epochs
            and rec.config.checkpoint_every == head.config.checkpoint_every
            and rec.config.oracle_budget == head.config.oracle_budget
            and rec.problem_hash == head.problem_hash
        )
        if not same:
            raise ValueError("records have heterogeneous configs or problems")
    if grid is None:
        every = head.config.checkpoint_every
        last = min(rec.checkpoints[-1].oracle_calls for rec in records)
        grid = np.arange(0, last + 1, every, dtype=np.int64)
    else:
        grid = np.asarray(grid, dtype=np.int64)
    residual = np.empty((len(records), grid.shape[0]))
    dist = np.empty_like(residual)
    for row, rec in enumerate(records):
        calls = np.array([cp.oracle_calls for cp in rec.checkpoints], dtype=np.int64)
        idx = np.searchsorted(calls, grid, side="right") - 1
        if np.any(idx < 0):
            raise ValueError("grid starts before the first checkpoint")
        residual[row] = np.array([rec.checkpoints[j].residual_sq for j in idx])
        dist[row] = np.array([rec.checkpoints[j].dist_sq for j in idx])
    return AggregateStats(
        grid=grid,
        mean_residual_sq=residual.mean(axis=0),
        std_residual_sq=residual.std(axis=0, ddof=1),
        mean_dist_sq=dist.mean(axis=0),
        n_seeds=len(records),
    )


def _inner_loop_with_tail(problem, z0, gamma, inner_steps, seed, collect_norms):
    """One inner loop from a fixed start plus the analysis-only extra
    direction update (its two component evaluations stay untracked)."""
    indices = sample_indices(seed, 1, inner_steps, problem.n)
    norms: list[float] = []
    z, z_prev, v, _ = sarah_epoch(
        problem, z0, gamma, indices[:-1],
        counter=None, after_step=None,
        on_direction=norms.append if collect_norms else None,
    )
    tail = int(indices[-1])
    f_new = problem.eval_component(tail, z)
    f_old = problem.eval_component(tail, z_prev)
    v_tail = f_new + (v - f_old)
    if collect_norms:
        norms.append(float(np.dot(v_tail, v_tail)))
    return z, v_tail, norms


def _initial_residual_sq(problem, z0):
    f0 = problem.eval_full(z0)
    r0 = float(np.dot(f0, f0))
    if r0 == 0.0:
        raise ValueError("initial residual is zero; start point is degenerate")
    return r0


def _default_start(problem, z0):
    if z0 is None:
        return np.ones(problem.dimension)
    return np.asarray(z0, dtype=np.float64)


def verify_lemma1(problem: FiniteSumProblem, gamma: float, inner_steps: int,
                  seeds, z0=None) -> Lemma1Report:
    """Estimate E||v_k||^2 for k = 0..K and compare with the geometric decay
    bound (1 - gamma*mu)^k * ||F(z0)||^2; requires gamma <= 1/ell."""
    if gamma > 1.0 / problem.ell:
        raise ValueError("lemma requires gamma <= 1/ell")
    if inner_steps < 1:
        raise ValueError("inner_steps must be at least 1")
    seeds = _seed_list(seeds)
    z0 = _default_start(problem, z0)
    r0 = _initial_residual_sq(problem, z0)
    sums = np.zeros(inner_steps + 1)
    for seed in seeds:
        _, _, norms = _inner_loop_with_tail(problem, z0, gamma, inner_steps, seed, True)
        sums += norms
    means = sums / len(seeds)
    decay = (1.0 - gamma * problem.mu) ** np.arange(inner_steps + 1)
    ratios = means / (decay * r0)
    worst = float(np.max(ratios))
    return Lemma1Report(
        max_violation_ratio=worst,
        per_step_ratios=tuple(float(r) for r in ratios),
        n_seeds=len(seeds),
        gamma=gamma,
        inner_steps=inner_steps,
        passed=worst <= LEMMA_SLACK,
    )


def verify_lemma2(problem: FiniteSumProblem, gamma: float, inner_steps: int,
                  seeds, z0=None) -> Lemma2Report:
    """Estimate E||F(z_K) - v_K||^2 and compare with
    gamma*ell/(2 - gamma*ell) * ||F(z0)||^2; requires gamma < 2/ell."""
    if gamma >= 2.0 / problem.ell:
        raise ValueError("lemma requires gamma < 2/ell")
    if inner_steps < 1:
        raise ValueError("inner_steps must be at least 1")
    seeds = _seed_list(seeds)
    z0 = _default_start(problem, z0)
    r0 = _initial_residual_sq(problem, z0)
    total = 0.0
    for seed in seeds:
        z, v_tail, _ = _inner_loop_with_tail(problem, z0, gamma, inner_steps, seed, False)
        diff = problem.metric_eval(z) - v_tail
        total += float(np.dot(diff, diff))
    drift = total / len(seeds)
    bound = gamma * problem.ell / (2.0 - gamma * problem.ell) * r0
    ratio = drift / bound
    return Lemma2Report(
        ratio=ratio,
        measured_drift=drift,
        bound=bound,
        n_seeds=len(seeds),
        passed=ratio <= LEMMA_SLACK,
    )


def verify_theorem1(problem: FiniteSumProblem, seeds, *, gamma: float | None = None,
                    inner_steps: int | None = None, z0=None,
                    max_epochs: int = 400) -> ContractionReport:
    """Run the recursive method at the preset step until the numeric floor
    and report per-epoch ratios of mean squared residuals.

    Only the preset parameters gamma = 2/(9*ell), K = ceil(10*ell/mu) carry
    the halving guarantee; any other requested values are rejected.
    """
    preset_gamma = 2.0 / (9.0 * problem.ell)
    preset_steps = math.ceil(10.0 * problem.ell / problem.mu)
    if gamma is not None and not math.isclose(gamma, preset_gamma, rel_tol=1e-9):
        raise ValueError(
            f"contraction preset requires gamma = 2/(9*ell) = {preset_gamma:.6g}, "
            f"got {gamma:.6g}"
        )
    if inner_steps is not None and inner_steps != preset_steps:
        raise ValueError(
            f"contraction preset requires inner_steps = {preset_steps}, got {inner_steps}"
        )
    mono = check_strong_monotonicity(problem, problem.mu, trials=120, seed=0)
    if mono.violations:
        raise ValueError(
            f"operator failed the strong-monotonicity check ({mono.violations} "
            f"violations, worst ratio {mono.worst_ratio:.6g})"
        )
    seeds = _seed_list(seeds)
    z0 = _default_start(problem, z0)
    _initial_residual_sq(problem, z0)  # reject degenerate starts
    points = [z0.copy() for _ in seeds]
    means = [float(np.mean([problem.residual_sq(z) for z in points]))]
    floor = FLOOR_FACTOR * means[0]
    ratios: list[float] = []
    floor_epoch = None
    for epoch in range(1, max_epochs + 1):
        for row, seed in enumerate(seeds):
            indices = sample_indices(seed, epoch, preset_steps - 1, problem.n)
            points[row], _, _, _ = sarah_epoch(problem, points[row], preset_gamma,
                                               indices)
        mean_now = float(np.mean([problem.residual_sq(z) for z in points]))
        ratios.append(mean_now / means[-1])
        means.append(mean_now)
        if mean_now < floor:
            floor_epoch = epoch
            break
    pre_floor = ratios if floor_epoch is None else ratios[: floor_epoch - 1]
    passed = all(r <= CONTRACTION_THRESHOLD for r in pre_floor)
    return ContractionReport(
        per_epoch_ratios=tuple(ratios),
        mean_residuals=tuple(means),
        floor_epoch=floor_epoch,
        n_seeds=len(seeds),
        passed=passed,
    )


def predicted_epochs(initial_residual_sq: float, target_residual_sq: float) -> int:
    """Outer iterations guaranteed to reach the target under per-epoch halving."""
    if target_residual_sq <= 0 or initial_residual_sq <= 0:
        raise ValueError("residual levels must be positive")
    if target_residual_sq >= initial_residual_sq:
        return 0
    return math.ceil(math.log2(initial_residual_sq / target_residual_sq))


def complexity_audit(record: RunRecord, epsilon: float) -> ComplexityAudit:
    """Compare the guaranteed oracle-call count against a recorded run.

    The prediction charges (n + 2*(K-1)) calls for each of the
    ceil(log2(||F(z0)||^2 / eps^2)) guaranteed epochs; the measurement is
    the first checkpoint whose squared residual is at or below eps^2.
    """
    if record.config.method is not Method.SARAH:
        raise ValueError("complexity audit applies to recursive-method records")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    first = record.checkpoints[0]
    if first.oracle_calls != 0:
        raise ValueError("record lacks an initial checkpoint at zero calls")
    eps_sq = epsilon * epsilon
    per_epoch = record.problem_n + 2 * (record.config.inner_steps - 1)
    epochs = predicted_epochs(first.residual_sq, eps_sq)
    actual = None
    for cp in record.checkpoints:
        if cp.residual_sq <= eps_sq:
            actual = cp.oracle_calls
            break
    return ComplexityAudit(
        predicted_calls=per_epoch * epochs,
        predicted_epochs=epochs,
        per_epoch_calls=per_epoch,
        formula_calls=per_epoch * record.config.epochs,
        recorded_calls=record.component_calls,
        actual_calls=actual,
        unreachable=actual is None,
    )


def write_verification_report(path, checks: Sequence[dict]) -> Path:
    """Structured pass/fail report suitable for CI assertion."""
    gating = [c for c in checks if c.get("passed") is not None]
    payload = {
        "all_passed": all(c["passed"] for c in gating),
        "checks": list(checks),
    }
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path

"""Stochastic solvers for finite-sum cocoercive variational inequalities.

Three methods behind one run contract: the recursive variance-reduced
method (SARAH), the anchored variance-reduced baseline (SVRG), and plain
SGD.  All runs are deterministic given (problem, config, start point):
component indices are a pure function of (seed, epoch, step), and metric
snapshots never touch the oracle counter or the random stream.

Oracle accounting is exact per epoch: n + 2*(K-1) component calls for
SARAH, n + 2*K for SVRG, one call per SGD step.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .problems import (
    STREAM_EPOCH,
    FiniteSumProblem,
    OracleCounter,
    as_point,
    rng_for,
)

__all__ = [
    "Checkpoint",
    "Method",
    "ReplayResult",
    "RunRecord",
    "SolverConfig",
    "replay_check",
    "run",
    "run_sarah",
    "run_sgd",
    "run_svrg",
    "sample_indices",
    "theorem_preset",
    "write_run_csv",
    "write_run_metadata",
]

RUN_CSV_HEADER = ("epoch", "oracle_calls", "residual_sq", "dist_sq", "elapsed_s")

# A run aborts once the squared residual exceeds this multiple of its
# initial value (and a small absolute floor, so runs started at the
# solution are not flagged by round-off noise).
DIVERGENCE_FACTOR = 1e12
_DIVERGENCE_ABS_FLOOR = 1e-12


class Method(str, Enum):
    SARAH = "sarah"
    SVRG = "svrg"
    SGD = "sgd"


@dataclass(frozen=True)
class SolverConfig:
    """Run recipe shared by all methods.

    ``inner_steps`` is the inner loop length K (for SGD just the grouping
    of steps into epochs) and ``epochs`` the outer count S; SGD takes
    epochs*inner_steps single-component steps in total.  ``checkpoint_every``
    is an oracle-call interval.  ``oracle_budget``, when set, stops the run
    at the first step that reaches it (overshoot at most n calls).
    """

    method: Method
    gamma: float
    inner_steps: int = 1
    epochs: int = 1
    seed: int | None = None
    checkpoint_every: int = 1000
    oracle_budget: int | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be at least 1")
        if self.oracle_budget is not None and self.oracle_budget < 1:
            raise ValueError("oracle_budget must be positive when set")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


class Checkpoint(NamedTuple):
    epoch: int
    oracle_calls: int
    residual_sq: float
    dist_sq: float
    elapsed_s: float


@dataclass(frozen=True)
class RunRecord:
    """Per-checkpoint series plus everything needed to replay the run."""

    checkpoints: tuple[Checkpoint, ...]
    final_point: np.ndarray
    config: SolverConfig
    problem_hash: str
    problem_n: int
    status: str  # "ok" | "diverged" | "nonfinite"
    initial_point: np.ndarray
    component_calls: int
    full_passes: int
    inner_norm_series: tuple[float, ...] | None = None

    @property
    def total_oracle_calls(self) -> int:
        return self.component_calls

    @property
    def final_residual_sq(self) -> float:
        return self.checkpoints[-1].residual_sq


@dataclass(frozen=True)
class ReplayResult:
    ok: bool
    first_divergence: int | None = None

    def __bool__(self) -> bool:
        return self.ok


def sample_indices(seed: int, epoch: int, count: int, n: int) -> list[int]:
    """Uniform component indices; a pure function of (seed, epoch, position)."""
    if count <= 0:
        return []
    return rng_for(seed, STREAM_EPOCH + epoch).integers(0, n, size=count).tolist()


class _RunMonitor:
    """Checkpoint, budget and divergence bookkeeping for one run."""

    def __init__(self, problem: FiniteSumProblem, config: SolverConfig,
                 counter: OracleCounter):
        self.problem = problem
        self.counter = counter
        self.every = config.checkpoint_every
        self.next_mark = config.checkpoint_every
        self.budget = config.oracle_budget
        self.checkpoints: list[Checkpoint] = []
        self.status = "ok"
        self.epoch = 0
        self.initial_residual_sq: float | None = None
        self._start = time.perf_counter()

    def _snapshot(self, z) -> bool:
        """Record a checkpoint at the current state; True means abort."""
        calls = self.counter.component_calls
        if self.checkpoints and self.checkpoints[-1].oracle_calls == calls:
            return False  # no oracle progress since the last snapshot
        residual_sq = self.problem.residual_sq(z)
        cp = Checkpoint(self.epoch, calls, residual_sq, self.problem.distance_sq(z),
                        time.perf_counter() - self._start)
        self.checkpoints.append(cp)
        if not math.isfinite(residual_sq):
            self.status = "nonfinite"
            return True
        if (self.initial_residual_sq is not None
                and residual_sq > DIVERGENCE_FACTOR * self.initial_residual_sq
                and residual_sq > _DIVERGENCE_ABS_FLOOR):
            self.status = "diverged"
            return True
        return False

    def start(self, z):
        self._snapshot(z)
        self.initial_residual_sq = self.checkpoints[0].residual_sq

    def after_step(self, z) -> bool:
        calls = self.counter.component_calls
        stop = False
        if calls >= self.next_mark:
            self.next_mark = (calls // self.every + 1) * self.every
            stop = self._snapshot(z)
        if self.budget is not None and calls >= self.budget:
            stop = True
        return stop

    def finish(self, z):
        self._snapshot(z)


def sarah_epoch(
    problem: FiniteSumProblem,
    z: np.ndarray,
    gamma: float,
    indices: Sequence[int],
    counter: OracleCounter | None = None,
    after_step: Callable[[np.ndarray], bool] | None = None,
    on_direction: Callable[[float], None] | None = None,
):
    """One outer epoch of the recursive method: K = len(indices)+1 steps.

    Starts with a full-operator step, then recursive updates
    v <- F_i(z_new) + (v - F_i(z_old)).  The grouping keeps the n = 1
    telescoping identity exact in floating point, so single-component
    problems reproduce the deterministic iteration bit for bit.

    Returns (z_K, z_{K-1}, v_{K-1}, stopped).
    """
    v = problem.eval_full(z, counter)
    if on_direction is not None:
        on_direction(float(np.dot(v, v)))
    z_prev = z
    z = z - gamma * v
    if after_step is not None and after_step(z):
        return z, z_prev, v, True
    components = problem.components  # hot loop: indices come pre-validated
    for i in indices:
        f_new = components[i](z)
        f_old = components[i](z_prev)
        if counter is not None:
            counter.component_calls += 2
        v = f_new + (v - f_old)
        if on_direction is not None:
            on_direction(float(np.dot(v, v)))
        z_prev = z
        z = z - gamma * v
        if after_step is not None and after_step(z):
            return z, z_prev, v, True
    return z, z_prev, v, False


def _svrg_epoch(problem, z, gamma, indices, counter, after_step):
    """One anchored epoch: full operator at the anchor, K corrected steps."""
    anchor = z
    f_anchor = problem.eval_full(anchor, counter)
    components = problem.components
    for i in indices:
        f_z = components[i](z)
        f_a = components[i](anchor)
        counter.component_calls += 2
        v = f_z + (f_anchor - f_a)
        z = z - gamma * v
        if after_step(z):
            return z, True
    return z, False


def _require(config: SolverConfig, method: Method, problem: FiniteSumProblem):
    if config.method is not method:
        raise ValueError(f"config.method is {config.method}, expected {method}")
    if config.seed is None:
        raise ValueError("config.seed must be set before running")


def run_sarah(problem: FiniteSumProblem, config: SolverConfig, z0,
              *, record_inner_norms: bool = False) -> RunRecord:
    """Recursive variance-reduced run: S epochs of one full pass plus K-1
    two-call recursive steps each (n + 2*(K-1) component calls per epoch)."""
    _require(config, Method.SARAH, problem)
    z = as_point(z0, problem.dimension)
    start = z.copy()
    counter = OracleCounter()
    monitor = _RunMonitor(problem, config, counter)
    monitor.start(z)
    norms: list[float] | None = [] if record_inner_norms else None
    collect = norms.append if record_inner_norms else None
    for s in range(1, config.epochs + 1):
        monitor.epoch = s
        indices = sample_indices(config.seed, s, config.inner_steps - 1, problem.n)
        z, _, _, stopped = sarah_epoch(
            problem, z, config.gamma, indices, counter, monitor.after_step, collect
        )
        if stopped:
            break
    monitor.finish(z)
    return _finish_record(problem, config, monitor, counter, z, start,
                          None if norms is None else tuple(norms))


def run_svrg(problem: FiniteSumProblem, config: SolverConfig, z0) -> RunRecord:
    """Anchored variance-reduced run (n + 2*K component calls per epoch)."""
    _require(config, Method.SVRG, problem)
    z = as_point(z0, problem.dimension)
    start = z.copy()
    counter = OracleCounter()
    monitor = _RunMonitor(problem, config, counter)
    monitor.start(z)
    for s in range(1, config.epochs + 1):
        monitor.epoch = s
        indices = sample_indices(config.seed, s, config.inner_steps, problem.n)
        z, stopped = _svrg_epoch(problem, z, config.gamma, indices, counter,
                                 monitor.after_step)
        if stopped:
            break
    monitor.finish(z)
    return _finish_record(problem, config, monitor, counter, z, start, None)


def run_sgd(problem: FiniteSumProblem, config: SolverConfig, z0) -> RunRecord:
    """Plain stochastic run: epochs*inner_steps single-component steps."""
    _require(config, Method.SGD, problem)
    z = as_point(z0, problem.dimension)
    start = z.copy()
    counter = OracleCounter()
    monitor = _RunMonitor(problem, config, counter)
    monitor.start(z)
    gamma = config.gamma
    components = problem.components
    after_step = monitor.after_step
    stopped = False
    for s in range(1, config.epochs + 1):
        monitor.epoch = s
        for i in sample_indices(config.seed, s, config.inner_steps, problem.n):
            z = z - gamma * components[i](z)
            counter.component_calls += 1
            if after_step(z):
                stopped = True
                break
        if stopped:
            break
    monitor.finish(z)
    return _finish_record(problem, config, monitor, counter, z, start, None)


def _finish_record(problem, config, monitor, counter, z, start, norms):
    z = z.copy()
    z.setflags(write=False)
    start.setflags(write=False)
    return RunRecord(
        checkpoints=tuple(monitor.checkpoints),
        final_point=z,
        config=config,
        problem_hash=problem.problem_hash(),
        problem_n=problem.n,
        status=monitor.status,
        initial_point=start,
        component_calls=counter.component_calls,
        full_passes=counter.full_passes,
        inner_norm_series=norms,
    )


_RUNNERS = {Method.SARAH: run_sarah, Method.SVRG: run_svrg, Method.SGD: run_sgd}


def run(problem: FiniteSumProblem, config: SolverConfig, z0, **kwargs) -> RunRecord:
    """Dispatch to the configured method."""
    return _RUNNERS[config.method](problem, config, z0, **kwargs)


def theorem_preset(problem: FiniteSumProblem, *, epochs: int = 1,
                   seed: int | None = None,
                   checkpoint_every: int | None = None) -> SolverConfig:
    """SARAH configuration with the guaranteed-contraction step and loop
    length: gamma = 2/(9*ell), K = ceil(10*ell/mu)."""
    gamma = 2.0 / (9.0 * problem.ell)
    inner_steps = math.ceil(10.0 * problem.ell / problem.mu)
    if checkpoint_every is None:
        checkpoint_every = problem.n + 2 * (inner_steps - 1)  # one per epoch
    return SolverConfig(
        method=Method.SARAH,
        gamma=gamma,
        inner_steps=inner_steps,
        epochs=epochs,
        seed=seed,
        checkpoint_every=checkpoint_every,
    )


def _checkpoints_match(a: Checkpoint, b: Checkpoint) -> bool:
    # elapsed_s is wall clock and excluded from the identity contract
    if a.epoch != b.epoch or a.oracle_calls != b.oracle_calls:
        return False
    for x, y in ((a.residual_sq, b.residual_sq), (a.dist_sq, b.dist_sq)):
        if not (x == y or (math.isnan(x) and math.isnan(y))):
            return False
    return True


def replay_check(record: RunRecord, problem: FiniteSumProblem) -> ReplayResult:
    """Re-run the recorded configuration and require a bit-identical run."""
    if record.config.seed is None:
        raise ValueError("record config carries no seed; cannot replay")
    fresh = run(problem, record.config, record.initial_point)
    for idx, (a, b) in enumerate(zip(record.checkpoints, fresh.checkpoints)):
        if not _checkpoints_match(a, b):
            return ReplayResult(ok=False, first_divergence=idx)
    if len(record.checkpoints) != len(fresh.checkpoints):
        return ReplayResult(
            ok=False,
            first_divergence=min(len(record.checkpoints), len(fresh.checkpoints)),
        )
    if not np.array_equal(record.final_point, fresh.final_point):
        return ReplayResult(ok=False, first_divergence=len(record.checkpoints))
    return ReplayResult(ok=True)


def write_run_csv(record: RunRecord, path) -> Path:
    """One CSV per run; elapsed_s is the only wall-clock column."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RUN_CSV_HEADER)
        for cp in record.checkpoints:
            writer.writerow([cp.epoch, cp.oracle_calls, repr(cp.residual_sq),
                             repr(cp.dist_sq), f"{cp.elapsed_s:.6f}"])
    return path


def write_run_metadata(record: RunRecord, path) -> Path:
    """JSON sidecar describing the run."""
    meta = {
        "method": record.config.method.value,
        "gamma": record.config.gamma,
        "inner_steps": record.config.inner_steps,
        "epochs": record.config.epochs,
        "seed": record.config.seed,
        "checkpoint_every": record.config.checkpoint_every,
        "oracle_budget": record.config.oracle_budget,
        "problem_hash": record.problem_hash,
        "problem_n": record.problem_n,
        "status": record.status,
        "component_calls": record.component_calls,
        "full_passes": record.full_passes,
    }
    path = Path(path)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def config_with_seed(config: SolverConfig, seed: int) -> SolverConfig:
    return replace(config, seed=seed)

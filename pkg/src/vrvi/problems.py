"""Finite-sum operator problems for cocoercive variational inequalities.

A problem is an average F(z) = (1/n) sum_i F_i(z) of component operators on
R^D, with known cocoercivity constant ``ell`` and strong-monotonicity
constant ``mu``.  The built-in family is the regularized bilinear
saddle-point game

    g(x, y) = (1/n) sum_i [ x^T A_i y + a_i^T x + b_i^T y
                            + (lam/2)||x||^2 - (lam/2)||y||^2 ],

whose component operators are affine:

    F_i(x, y) = (A_i y + a_i + lam*x,  lam*y - A_i^T x - b_i).

Points are 1-D float64 arrays of length D (= 2d for bilinear instances,
x first, then y).  Component operators also accept a 2-D stack of row
points and return a matching stack; solvers only ever use the 1-D form.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AssumptionReport",
    "BilinearComponent",
    "BilinearProblem",
    "FiniteSumProblem",
    "GenerationError",
    "GeneratorSpec",
    "OracleCounter",
    "SpectralNormError",
    "check_cocoercivity",
    "check_strong_monotonicity",
    "generate_bilinear",
    "load_problem",
    "rng_for",
    "save_problem",
    "solve_exact",
    "spectral_norm",
]

# Relative slack used by the assumption checkers and the exact-solution
# residual contract.
REL_TOL = 1e-9

# Sampling scales for assumption checkers: affine operators are
# scale-covariant, so multiple scales only guard implementation bugs.
_CHECKER_SCALES = (0.1, 1.0, 10.0)

_MAX_GENERATION_ATTEMPTS = 8

# Stream tags keep the counter-based streams of unrelated consumers
# (instance generation, solver epochs, checkers) disjoint even if the same
# seed value is reused across them.
STREAM_GENERATOR = 1 << 32
STREAM_EPOCH = 2 << 32
STREAM_CHECKER = 3 << 32


def rng_for(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator for an independent, replayable substream."""
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class SpectralNormError(RuntimeError):
    """Power iteration did not converge; carries the last estimate and gap."""

    def __init__(self, message: str, estimate: float, gap: float):
        super().__init__(message)
        self.estimate = estimate
        self.gap = gap


class GenerationError(RuntimeError):
    """Random instance generation failed after bounded retries."""


@dataclass
class OracleCounter:
    """Tally of component-operator evaluations charged to one run.

    A full-operator evaluation costs n component calls and is additionally
    counted as one full pass.  Counters are per run and never shared.
    """

    component_calls: int = 0
    full_passes: int = 0


def as_point(z, dimension: int) -> np.ndarray:
    """Validate and copy a point: 1-D, float64, finite, correct length."""
    arr = np.array(z, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != dimension:
        raise ValueError(
            f"point must be a 1-D vector of length {dimension}, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("point has non-finite entries")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def spectral_norm(matrix, tol: float = 1e-6, max_iter: int = 100_000) -> float:
    """Largest singular value of a dense matrix, within relative error tol.

    Power iteration on M^T M from a deterministic start (normalized
    all-ones; falls back to basis vectors if that start is annihilated).
    Adequate for well-separated top singular values; the iteration cap
    guards pathological ties.
    """
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or M.size == 0:
        raise ValueError("matrix must be 2-D and non-empty")
    if not np.any(M):
        raise ValueError("matrix must be nonzero")
    if tol <= 0:
        raise ValueError("tol must be positive")

    cols = M.shape[1]
    starts = [np.full(cols, 1.0 / math.sqrt(cols))]
    starts.extend(np.eye(cols)[j] for j in range(cols))

    for v in starts:
        sigma = 0.0
        gap = math.inf
        for _ in range(max_iter):
            w = M @ v
            norm_w = float(np.linalg.norm(w))  # = ||M v|| with v unit
            if norm_w == 0.0:
                break  # start vector annihilated; try the next one
            gap = abs(norm_w - sigma)
            sigma = norm_w
            if gap <= tol * sigma:
                return sigma
            u = M.T @ w
            v = u / float(np.linalg.norm(u))
        else:
            raise SpectralNormError(
                f"power iteration did not converge within {max_iter} iterations "
                f"(estimate {sigma:.6g}, last gap {gap:.3g})",
                estimate=sigma,
                gap=gap,
            )
    raise SpectralNormError(
        "all deterministic start vectors were annihilated", estimate=0.0, gap=math.inf
    )


class BilinearComponent:
    """One affine saddle component z = (x, y) -> (A y + a + lam*x, lam*y - A^T x - b)."""

    __slots__ = ("A", "a", "b", "lam", "_op", "_shift")

    def __init__(self, A, a, b, lam: float):
        A = np.array(A, dtype=np.float64)
        a = np.array(a, dtype=np.float64)
        b = np.array(b, dtype=np.float64)
        if lam <= 0:
            raise ValueError("lam must be positive")
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be a square matrix")
        d = A.shape[0]
        if a.shape != (d,) or b.shape != (d,):
            raise ValueError("a and b must be length-d vectors matching A")
        self.A = _freeze(A)
        self.a = _freeze(a)
        self.b = _freeze(b)
        self.lam = float(lam)
        # Dense block form used for evaluation: F_i(z) = op @ z + shift.
        op = np.zeros((2 * d, 2 * d))
        op[:d, :d] = lam * np.eye(d)
        op[:d, d:] = A
        op[d:, :d] = -A.T
        op[d:, d:] = lam * np.eye(d)
        shift = np.concatenate([a, -b])
        self._op = _freeze(op)
        self._shift = _freeze(shift)

    @property
    def dim(self) -> int:
        return self._op.shape[0]

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if z.ndim == 1:
            return self._op @ z + self._shift
        return z @ self._op.T + self._shift


class FiniteSumProblem:
    """Average of n component operators with known problem constants.

    Immutable after construction; safe to share across concurrent readers.
    Oracle counters are supplied per evaluation call, never stored here.
    """

    def __init__(
        self,
        components: Sequence[Callable[[np.ndarray], np.ndarray]],
        dimension: int,
        ell: float,
        mu: float,
        exact_solution=None,
    ):
        components = tuple(components)
        if len(components) < 1:
            raise ValueError("need at least one component operator")
        if dimension < 1:
            raise ValueError("dimension must be positive")
        if not mu > 0:
            raise ValueError("mu must be positive")
        if ell < mu:
            raise ValueError("ell must satisfy ell >= mu")
        self.components = components
        self.dimension = int(dimension)
        self.ell = float(ell)
        self.mu = float(mu)
        self._hash_cache: str | None = None
        if exact_solution is not None:
            exact_solution = _freeze(as_point(exact_solution, dimension))
            resid = math.sqrt(self.residual_sq(exact_solution))
            scale = max(1.0, math.sqrt(self.residual_sq(np.zeros(dimension))))
            if resid > REL_TOL * scale:
                raise ValueError(
                    f"claimed exact solution has residual {resid:.3g} "
                    f"(allowed {REL_TOL * scale:.3g})"
                )
        self.exact_solution = exact_solution

    @property
    def n(self) -> int:
        return len(self.components)

    def _check_shape(self, z: np.ndarray):
        if z.shape[-1] != self.dimension:
            raise ValueError(
                f"point dimension {z.shape[-1]} != problem dimension {self.dimension}"
            )

    def eval_component(self, i: int, z: np.ndarray, counter: OracleCounter | None = None):
        """Evaluate F_i(z); charges exactly one oracle call per point."""
        if not 0 <= i < len(self.components):
            raise IndexError(f"component index {i} out of range [0, {self.n})")
        self._check_shape(z)
        out = self.components[i](z)
        if counter is not None:
            counter.component_calls += 1 if z.ndim == 1 else z.shape[0]
        return out

    def eval_full(self, z: np.ndarray, counter: OracleCounter | None = None):
        """Evaluate F(z) as the uniform component average; charges n calls."""
        self._check_shape(z)
        comps = self.components
        acc = comps[0](z)
        for f in comps[1:]:
            acc = acc + f(z)
        acc = acc / len(comps)
        if counter is not None:
            counter.component_calls += self.n * (1 if z.ndim == 1 else z.shape[0])
            counter.full_passes += 1 if z.ndim == 1 else z.shape[0]
        return acc

    def metric_eval(self, z: np.ndarray) -> np.ndarray:
        """Untracked full-operator evaluation used for metrics and reports."""
        return self.eval_full(z)

    def residual_sq(self, z: np.ndarray) -> float:
        f = self.metric_eval(z)
        return float(np.dot(f, f))

    def distance_sq(self, z: np.ndarray) -> float:
        if self.exact_solution is None:
            return math.nan
        diff = z - self.exact_solution
        return float(np.dot(diff, diff))

    def problem_hash(self) -> str:
        if self._hash_cache is None:
            self._hash_cache = self._compute_hash()
        return self._hash_cache

    def _compute_hash(self) -> str:
        tag = (
            f"{type(self).__name__}:{self.n}:{self.dimension}:"
            f"{self.ell:.17g}:{self.mu:.17g}"
        )
        return hashlib.sha256(tag.encode()).hexdigest()


class BilinearProblem(FiniteSumProblem):
    """Finite-sum bilinear saddle instance with dense affine components."""

    def __init__(
        self,
        A,
        a,
        b,
        lam: float,
        *,
        ell: float,
        exact_solution,
        seed: int | None = None,
        target_ell: float | None = None,
    ):
        A = np.array(A, dtype=np.float64)
        a = np.array(a, dtype=np.float64)
        b = np.array(b, dtype=np.float64)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValueError("A must have shape (n, d, d)")
        n, d, _ = A.shape
        if a.shape != (n, d) or b.shape != (n, d):
            raise ValueError("a and b must have shape (n, d)")
        self.A = _freeze(A)
        self.a = _freeze(a)
        self.b = _freeze(b)
        self.lam = float(lam)
        self.d = d
        self.seed = seed
        self.target_ell = target_ell
        components = [BilinearComponent(A[i], a[i], b[i], lam) for i in range(n)]
        # Aggregate affine form: F(z) = mean_op @ z + mean_shift.
        mean_op = np.zeros((2 * d, 2 * d))
        mean_A = A.mean(axis=0)
        mean_op[:d, :d] = lam * np.eye(d)
        mean_op[:d, d:] = mean_A
        mean_op[d:, :d] = -mean_A.T
        mean_op[d:, d:] = lam * np.eye(d)
        self.mean_op = _freeze(mean_op)
        self.mean_shift = _freeze(np.concatenate([a.mean(axis=0), -b.mean(axis=0)]))
        super().__init__(components, 2 * d, ell=ell, mu=lam, exact_solution=exact_solution)

    @classmethod
    def from_arrays(cls, A, a, b, lam, *, seed=None, target_ell=None) -> "BilinearProblem":
        """Build an instance; derives ell = ||mean A||_2^2 / lam (floored at lam)."""
        A = np.array(A, dtype=np.float64)
        mean_A = A.mean(axis=0)
        if np.any(mean_A):
            ell = max(float(lam), spectral_norm(mean_A) ** 2 / lam)
        else:
            ell = float(lam)
        partial = cls(A, a, b, lam, ell=ell, exact_solution=None,
                      seed=seed, target_ell=target_ell)
        solution = _solve_affine(partial.mean_op, partial.mean_shift)
        return cls(A, a, b, lam, ell=ell, exact_solution=solution,
                   seed=seed, target_ell=target_ell)

    def metric_eval(self, z: np.ndarray) -> np.ndarray:
        if z.ndim == 1:
            return self.mean_op @ z + self.mean_shift
        return z @ self.mean_op.T + self.mean_shift

    def _compute_hash(self) -> str:
        return hashlib.sha256(problem_to_text(self).encode()).hexdigest()


@dataclass(frozen=True)
class GeneratorSpec:
    """Recipe for one random bilinear instance."""

    n: int
    d: int
    lam: float
    target_ell: float
    seed: int

    def validate(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.target_ell < self.lam:
            raise ValueError("target_ell must be at least lam (ell >= mu)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


def generate_bilinear(spec: GeneratorSpec) -> BilinearProblem:
    """Draw a random instance and rescale it to the requested conditioning.

    Entries of A_i, a_i, b_i are i.i.d. standard normal from a counter-based
    seeded stream; all A_i are then rescaled by a single global scalar so
    that ||mean A||_2^2 / lam matches ``target_ell`` (within the spectral
    norm tolerance, far inside 1%).  Pure function of the spec: the same
    spec yields a bit-identical instance.
    """
    spec.validate()
    for attempt in range(_MAX_GENERATION_ATTEMPTS):
        rng = rng_for(spec.seed, STREAM_GENERATOR + attempt)
        A = rng.standard_normal((spec.n, spec.d, spec.d))
        a = rng.standard_normal((spec.n, spec.d))
        b = rng.standard_normal((spec.n, spec.d))
        mean_A = A.mean(axis=0)
        if np.any(mean_A):
            norm = spectral_norm(mean_A)
            if norm > 0.0:
                break
    else:
        raise GenerationError(
            f"mean matrix was zero in {_MAX_GENERATION_ATTEMPTS} consecutive draws"
        )
    A *= math.sqrt(spec.target_ell * spec.lam) / norm
    return BilinearProblem.from_arrays(
        A, a, b, spec.lam, seed=spec.seed, target_ell=spec.target_ell
    )


def _solve_affine(op: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Solve op @ z = -shift by dense LU factorization with partial pivoting."""
    try:
        solution = np.linalg.solve(op, -shift)
    except np.linalg.LinAlgError as exc:  # cannot occur for lam > 0; defensive
        raise ValueError(f"affine system is singular: {exc}") from exc
    return solution


def solve_exact(problem: BilinearProblem) -> np.ndarray:
    """Root of the aggregate affine operator of a bilinear problem."""
    if not isinstance(problem, BilinearProblem):
        raise ValueError("solve_exact requires a bilinear (affine) problem")
    solution = solve_exact_arrays(problem.mean_op, problem.mean_shift)
    resid = math.sqrt(problem.residual_sq(solution))
    scale = max(1.0, math.sqrt(problem.residual_sq(np.zeros(problem.dimension))))
    if resid > REL_TOL * scale:  # defensive: dense solve should always hit this
        raise ValueError(f"solver residual {resid:.3g} exceeds tolerance")
    return solution


def solve_exact_arrays(op: np.ndarray, shift: np.ndarray) -> np.ndarray:
    return _solve_affine(op, shift)


@dataclass(frozen=True)
class AssumptionReport:
    """Outcome of sampling one operator inequality over random point pairs.

    ``worst_ratio`` is the most adverse ratio of the constrained side to the
    bounding side: for cocoercivity the max of ||dF||^2 / (ell * <dF, dz>),
    for strong monotonicity the min of <dF, dz> / (mu * ||dz||^2).
    """

    violations: int
    worst_ratio: float
    trials: int


def _sample_pairs(dimension: int, trials: int, seed: int):
    rng = rng_for(seed, STREAM_CHECKER)
    scales = np.array([_CHECKER_SCALES[t % len(_CHECKER_SCALES)] for t in range(trials)])
    u = rng.standard_normal((trials, dimension)) * scales[:, None]
    v = rng.standard_normal((trials, dimension)) * scales[:, None]
    return u, v


def _scan_cocoercive(lhs: np.ndarray, inner: np.ndarray, ell: float):
    """Count violations of lhs <= ell*inner beyond relative slack; worst ratio."""
    rhs = ell * inner
    slack = REL_TOL * np.maximum(lhs, np.abs(rhs))
    violations = int(np.count_nonzero(lhs > rhs + slack))
    worst = 0.0
    positive = rhs > 0
    if np.any(positive):
        worst = float(np.max(lhs[positive] / rhs[positive]))
    degenerate_bad = ~positive & (lhs > slack)
    if np.any(degenerate_bad):
        worst = math.inf
    return violations, worst


def _scan_monotone(inner: np.ndarray, dist_sq: np.ndarray, mu: float):
    """Count violations of inner >= mu*dist_sq beyond relative slack; worst ratio."""
    rhs = mu * dist_sq
    slack = REL_TOL * np.maximum(np.abs(inner), rhs)
    violations = int(np.count_nonzero(inner < rhs - slack))
    positive = dist_sq > 0
    worst = float(np.min(inner[positive] / rhs[positive])) if np.any(positive) else 1.0
    return violations, worst


def check_cocoercivity(
    problem: FiniteSumProblem, i: int, ell: float, trials: int, seed: int
) -> AssumptionReport:
    """Sample point pairs and test ||F_i(u)-F_i(v)||^2 <= ell*<F_i(u)-F_i(v), u-v>."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if ell <= 0:
        raise ValueError("ell must be positive")
    u, v = _sample_pairs(problem.dimension, trials, seed)
    df = problem.eval_component(i, u) - problem.eval_component(i, v)
    dz = u - v
    lhs = np.einsum("ij,ij->i", df, df)
    inner = np.einsum("ij,ij->i", df, dz)
    violations, worst = _scan_cocoercive(lhs, inner, ell)
    return AssumptionReport(violations=violations, worst_ratio=worst, trials=trials)


def check_strong_monotonicity(
    problem: FiniteSumProblem, mu: float, trials: int, seed: int
) -> AssumptionReport:
    """Sample point pairs and test <F(u)-F(v), u-v> >= mu*||u-v||^2."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if mu <= 0:
        raise ValueError("mu must be positive")
    u, v = _sample_pairs(problem.dimension, trials, seed)
    df = problem.eval_full(u) - problem.eval_full(v)
    dz = u - v
    inner = np.einsum("ij,ij->i", df, dz)
    dist_sq = np.einsum("ij,ij->i", dz, dz)
    violations, worst = _scan_monotone(inner, dist_sq, mu)
    return AssumptionReport(violations=violations, worst_ratio=worst, trials=trials)


# ---------------------------------------------------------------------------
# Problem file format: self-describing structured text, value-exact on
# round-trip (payload floats carry 17 significant digits).

_FORMAT_TAG = "vrvi-problem/1"


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _fmt_vector(values: np.ndarray) -> str:
    return " ".join(_fmt(x) for x in values)


def problem_to_text(problem: BilinearProblem) -> str:
    lines = [
        f"format {_FORMAT_TAG}",
        f"n {problem.n}",
        f"d {problem.d}",
        f"lambda {_fmt(problem.lam)}",
        f"seed {'-' if problem.seed is None else problem.seed}",
        f"target_ell {'-' if problem.target_ell is None else _fmt(problem.target_ell)}",
        f"ell {_fmt(problem.ell)}",
        f"mu {_fmt(problem.mu)}",
    ]
    for i in range(problem.n):
        lines.append(f"A[{i}] {_fmt_vector(problem.A[i].ravel())}")
    for i in range(problem.n):
        lines.append(f"a[{i}] {_fmt_vector(problem.a[i])}")
    for i in range(problem.n):
        lines.append(f"b[{i}] {_fmt_vector(problem.b[i])}")
    lines.append(f"solution {_fmt_vector(problem.exact_solution)}")
    return "\n".join(lines) + "\n"


def save_problem(problem: BilinearProblem, path) -> Path:
    path = Path(path)
    path.write_text(problem_to_text(problem))
    return path


def load_problem(path) -> BilinearProblem:
    """Parse a problem file; rebuilds the instance value-exactly."""
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        if not value:
            raise ValueError(f"line {lineno}: expected 'key value'")
        if key in fields:
            raise ValueError(f"line {lineno}: duplicate key '{key}'")
        fields[key] = value
    if fields.get("format") != _FORMAT_TAG:
        raise ValueError(f"unsupported problem format {fields.get('format')!r}")
    n = int(fields["n"])
    d = int(fields["d"])
    lam = float(fields["lambda"])
    seed = None if fields["seed"] == "-" else int(fields["seed"])
    target_ell = None if fields["target_ell"] == "-" else float(fields["target_ell"])
    def parse_vector(key: str, length: int) -> np.ndarray:
        out = np.fromiter((float(tok) for tok in fields[key].split()), dtype=np.float64)
        if out.shape[0] != length:
            raise ValueError(f"payload '{key}' has {out.shape[0]} values, expected {length}")
        return out

    A = np.empty((n, d, d))
    a = np.empty((n, d))
    b = np.empty((n, d))
    for i in range(n):
        A[i] = parse_vector(f"A[{i}]", d * d).reshape(d, d)
        a[i] = parse_vector(f"a[{i}]", d)
        b[i] = parse_vector(f"b[{i}]", d)
    solution = parse_vector("solution", 2 * d)
    return BilinearProblem(
        A, a, b, lam,
        ell=float(fields["ell"]),
        exact_solution=solution,
        seed=seed,
        target_ell=target_ell,
    )

"""Shared synthetic operators for the test suite.

These stay affine so the library's constants are exact: the identity family
is 1-cocoercive and 1-strongly monotone with equality, and the scaled
family has per-component cocoercivity constants exactly equal to the
scaling factors.
"""

import numpy as np
import pytest

from vrvi import FiniteSumProblem


def identity_problem(dim: int = 2) -> FiniteSumProblem:
    """F(z) = z; solution at the origin."""
    return FiniteSumProblem(
        [lambda z: z], dim, ell=1.0, mu=1.0, exact_solution=np.zeros(dim)
    )


def shifted_identity_problem(dim: int = 2, shift: float = 1.0) -> FiniteSumProblem:
    """F(z) = z - shift; solution at shift * ones."""
    target = np.full(dim, shift)
    return FiniteSumProblem(
        [lambda z: z - target], dim, ell=1.0, mu=1.0, exact_solution=target
    )


def scaled_components_problem(dim: int = 8, n: int = 6, seed: int = 0) -> FiniteSumProblem:
    """F_i(z) = c_i z + d_i with c_i in [1, 4]: each component is exactly
    c_i-cocoercive, so the problem satisfies the component-wise assumption
    at ell = max c_i."""
    rng = np.random.default_rng(seed)
    factors = np.linspace(1.0, 4.0, n)
    offsets = rng.standard_normal((n, dim))
    components = [
        (lambda c, d: (lambda z: c * z + d))(c, d)
        for c, d in zip(factors, offsets)
    ]
    solution = -offsets.mean(axis=0) / factors.mean()
    return FiniteSumProblem(
        components, dim,
        ell=float(factors.max()),
        mu=float(factors.mean()),
        exact_solution=solution,
    )


@pytest.fixture
def identity():
    return identity_problem()

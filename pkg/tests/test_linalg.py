from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from prmc_sense.errors import SingularMatrix
from prmc_sense.linalg import STATS, Factorization, as_sparse, factorize, solve, solve_transposed
from prmc_sense.oracle import exact_solve


def test_trivial_systems():
    assert np.allclose(solve(sp.identity(3), [1.0, 2.0, 3.0]), [1, 2, 3])
    assert np.allclose(solve([[2, 0], [0, 4]], [2, 8]), [1, 2])


def test_three_state_chain_matches_exact_rationals():
    # s0 -> s1 (1/2), stays (1/2); s1 -> s2 (1/3), back to s0 (2/3); s2 terminal
    P = [[Fraction(1, 2), Fraction(1, 2), 0], [Fraction(2, 3), 0, Fraction(1, 3)], [0, 0, 0]]
    r = [1, 2, 0]
    M = [[(1 if i == j else 0) - P[i][j] for j in range(3)] for i in range(3)]
    exact = exact_solve(M, r)
    # x0 = 1 + x0/2 + x1/2 and x1 = 2 + 2x0/3 give x0 = 12, x1 = 10
    assert exact[0] == Fraction(12) and exact[1] == Fraction(10)
    x = solve(np.array(M, dtype=float), np.array(r, dtype=float))
    assert np.allclose(x, [float(v) for v in exact], rtol=1e-14)


def test_symmetric_transpose():
    A = np.array([[4.0, 1, 0], [1, 3, 1], [0, 1, 2]])
    b = np.array([1.0, 2, 3])
    assert np.allclose(solve_transposed(A, b), solve(A, b))


def test_singular_raises():
    with pytest.raises(SingularMatrix):
        Factorization(np.array([[1.0, 2], [2, 4]]))
    with pytest.raises(ValueError):
        Factorization(np.ones((2, 3)))


def test_as_sparse_merges_duplicates():
    M = as_sparse(sp.coo_matrix(([1.0, 2.0, 3.0], ([0, 0, 1], [1, 1, 0])), shape=(2, 2)))
    assert M[0, 1] == 3.0 and M.has_sorted_indices


def test_factorization_reused_for_many_rhs():
    rng = np.random.default_rng(0)
    A = sp.random(60, 60, density=0.05, random_state=1) + 10 * sp.identity(60)
    STATS.reset()
    fac = factorize(A)
    cols = [rng.normal(size=60) for _ in range(7)]
    serial = fac.solve_many(cols)
    threaded = fac.solve_many(cols, threads=3)
    assert STATS.factorizations == 1 and STATS.solves == 14
    for s, t, b in zip(serial, threaded, cols):
        assert np.array_equal(s, t)
        assert np.abs(A @ s - b).max() <= 1e-10


def _well_conditioned(seed, n=20):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    A += np.diag(np.abs(A).sum(axis=1) + 1.0)
    return A, rng


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_transposed_residual(seed):
    A, rng = _well_conditioned(seed)
    b = rng.normal(size=20)
    x = Factorization(A).solve_transposed(b)
    assert np.abs(A.T @ x - b).max() <= 1e-8


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_adjoint_identity(seed):
    # cᵀ A⁻¹ b = bᵀ A⁻ᵀ c
    A, rng = _well_conditioned(seed)
    b, c = rng.normal(size=20), rng.normal(size=20)
    fac = Factorization(A)
    assert c @ fac.solve(b) == pytest.approx(b @ fac.solve_transposed(c), abs=1e-8)

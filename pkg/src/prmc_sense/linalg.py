"""Sparse direct solves for the square systems of the analyses.

Storage is CSR/CSC from scipy; factorization is SuperLU with partial
pivoting.  A factorization is computed once and reused for any number of
right-hand sides, in either orientation.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularMatrix

PIVOT_TOL = 1e-12


@dataclass
class SolverStats:
    factorizations: int = 0
    solves: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, attr: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, attr, getattr(self, attr) + n)

    def reset(self) -> None:
        with self._lock:
            self.factorizations = 0
            self.solves = 0


# process-wide counters; tests use them to check factorization sharing
STATS = SolverStats()


def as_sparse(A) -> sp.csr_matrix:
    """CSR copy with sorted, unique column indices and finite values."""
    M = sp.csr_matrix(A, dtype=float)
    M.sum_duplicates()
    M.sort_indices()
    if not np.all(np.isfinite(M.data)):
        raise ValueError("matrix has non-finite entries")
    return M


class Factorization:
    """LU factors of a square sparse matrix.

    Immutable after construction; ``solve`` may be called concurrently from
    several threads.
    """

    def __init__(self, A, pivot_tol: float = PIVOT_TOL):
        M = sp.csc_matrix(A, dtype=float)
        n, m = M.shape
        if n != m:
            raise ValueError(f"matrix must be square, got {M.shape}")
        self.n = n
        if n == 0:
            self._lu = None
        else:
            if not np.all(np.isfinite(M.data)):
                raise ValueError("matrix has non-finite entries")
            try:
                lu = spla.splu(M, permc_spec="COLAMD", diag_pivot_thresh=1.0)
            except RuntimeError as exc:
                raise SingularMatrix(str(exc)) from None
            d = np.abs(lu.U.diagonal())
            if d.size and d.min() < pivot_tol:
                raise SingularMatrix(f"pivot {d.min():.3e} below {pivot_tol:g}")
            self._lu = lu
        STATS.bump("factorizations")

    def solve(self, b, trans: bool = False) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"rhs has {b.shape[0]} rows, expected {self.n}")
        STATS.bump("solves", 1 if b.ndim == 1 else b.shape[1])
        if self.n == 0:
            return b.copy()
        return self._lu.solve(b, trans="T" if trans else "N")

    def solve_transposed(self, b) -> np.ndarray:
        return self.solve(b, trans=True)

    def solve_many(self, columns, threads: int = 1, trans: bool = False) -> list[np.ndarray]:
        """Solve for each right-hand side in ``columns``; order preserved."""
        columns = list(columns)
        if threads <= 1 or len(columns) < 2:
            return [self.solve(c, trans) for c in columns]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda c: self.solve(c, trans), columns))


def factorize(A) -> Factorization:
    return Factorization(A)


def solve(A, b) -> np.ndarray:
    return Factorization(A).solve(b)


def solve_transposed(A, b) -> np.ndarray:
    return Factorization(A).solve_transposed(b)

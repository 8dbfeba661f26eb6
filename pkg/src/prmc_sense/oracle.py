"""Independent checks: finite differences, sorting, vertex enumeration,
exact arithmetic and simulation.

Nothing here reuses the sparse factorizations, the simplex code or the
policy iteration it is meant to check; dense numpy, HiGHS and brute force
are used instead.
"""
from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np

from . import expr as ex
from .expr import as_values


def _dense_pmc(m, u):
    u = as_values(u)
    n = m.n_states
    P = np.zeros((n, n))
    for s, row in enumerate(m.transitions):
        for t, e in row:
            P[s, t] += ex.evaluate(e, u)
    return P


def dense_pmc_value(m, u) -> float:
    """s_Iᵀ x with x from a dense solve of (I − P) x = r."""
    P = _dense_pmc(m, u)
    n = m.n_states
    r = np.where(m.terminal, 0.0, m.rewards)
    x = np.linalg.solve(np.eye(n) - P, r)
    return float(m.initial @ x)


def fd_gradient_pmc(m, u, h: float = 1e-5, params=None) -> np.ndarray:
    """Central differences of the pMC solution, one dense solve per point."""
    u = np.array(as_values(u), dtype=float)
    idx = range(m.n_params) if params is None else params
    out = []
    for i in idx:
        up, dn = u.copy(), u.copy()
        up[i] += h
        dn[i] -= h
        out.append((dense_pmc_value(m, up) - dense_pmc_value(m, dn)) / (2 * h))
    return np.asarray(out, dtype=float)


def highs_robust_value(m, u) -> float:
    from .models import instantiate_prmc
    from .prmc import robust_solve_rmc

    return robust_solve_rmc(instantiate_prmc(m, u), method="lp", engine="highs").sol_R


def fd_gradient_prmc(m, u, h: float = 1e-4, params=None) -> np.ndarray:
    """Central differences of the robust solution; each point re-solves the
    dualized LP with HiGHS."""
    u = np.array(as_values(u), dtype=float)
    idx = range(m.n_params) if params is None else params
    out = []
    for i in idx:
        up, dn = u.copy(), u.copy()
        up[i] += h
        dn[i] -= h
        out.append((highs_robust_value(m, up) - highs_robust_value(m, dn)) / (2 * h))
    return np.asarray(out, dtype=float)


def brute_topk(gradient, k: int, direction: str = "highest") -> np.ndarray:
    """Indices of the k largest (smallest) entries; ties to the lowest index."""
    g = np.asarray(gradient, dtype=float)
    if not 0 <= k <= g.size:
        raise ValueError("k out of range")
    key = -g if direction == "highest" else g
    return np.sort(np.argsort(key, kind="stable")[:k])


def same_selection(a, b, gradient, tol: float = 1e-9) -> bool:
    """True if two index sets agree up to exchanging entries with tied values."""
    a, b = set(map(int, a)), set(map(int, b))
    if a == b:
        return True
    if len(a) != len(b):
        return False
    g = np.asarray(gradient, dtype=float)
    scale = max(1.0, float(np.abs(g).max(initial=0.0)))
    va = np.sort(g[sorted(a)])
    vb = np.sort(g[sorted(b)])
    return bool(np.all(np.abs(va - vb) <= tol * scale))


def mc_estimate(mc, runs: int, seed: int = 0, max_steps: int = 1_000_000):
    """Mean and standard error of the cumulative reward over simulated runs.

    Returns (mean, stderr, capped) where ``capped`` reports whether any run
    hit ``max_steps`` before absorption.
    """
    rng = np.random.default_rng(seed)
    P = mc.P.tocsr()
    n = P.shape[0]
    row_of = np.repeat(np.arange(n), np.diff(P.indptr))
    within = np.zeros(P.data.size)
    for s in range(n):
        a, b = P.indptr[s], P.indptr[s + 1]
        within[a:b] = np.cumsum(P.data[a:b])
    keys = row_of + within
    rew = np.where(mc.terminal, 0.0, mc.rewards)
    state = rng.choice(n, size=runs, p=np.asarray(mc.initial) / np.sum(mc.initial))
    total = np.zeros(runs)
    alive = ~mc.terminal[state]
    steps = 0
    while alive.any() and steps < max_steps:
        idx = np.flatnonzero(alive)
        s = state[idx]
        total[idx] += rew[s]
        draw = s + rng.random(idx.size) * (within[np.minimum(P.indptr[s + 1] - 1, P.data.size - 1)])
        j = np.searchsorted(keys, draw, side="right")
        j = np.minimum(j, P.indptr[s + 1] - 1)
        state[idx] = P.indices[j]
        alive[idx] = ~mc.terminal[state[idx]]
        steps += 1
    capped = bool(alive.any())
    mean = float(total.mean())
    se = float(total.std(ddof=1) / np.sqrt(runs)) if runs > 1 else 0.0
    return mean, se, capped


def exact_solve(A, b) -> list[Fraction]:
    """Gaussian elimination over the rationals."""
    n = len(A)
    M = [[Fraction(x) for x in row] + [Fraction(b[i])] for i, row in enumerate(A)]
    for col in range(n):
        piv = next((r for r in range(col, n) if M[r][col] != 0), None)
        if piv is None:
            raise ZeroDivisionError("singular system")
        M[col], M[piv] = M[piv], M[col]
        for r in range(n):
            if r != col and M[r][col] != 0:
                f = M[r][col] / M[col][col]
                M[r] = [x - f * y for x, y in zip(M[r], M[col])]
    return [M[i][n] / M[i][i] for i in range(n)]


def polytope_vertices(A, b, tol: float = 1e-10) -> np.ndarray:
    """Vertices of {p : A p ≤ b, 1ᵀp = 1} by enumerating active row subsets."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, k = A.shape
    verts = []
    for rows in itertools.combinations(range(m), k - 1):
        M = np.vstack([A[list(rows)], np.ones((1, k))])
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        p = np.linalg.solve(M, np.concatenate([b[list(rows)], [1.0]]))
        if np.all(A @ p <= b + tol) and not any(np.allclose(p, q, atol=1e-9) for q in verts):
            verts.append(p)
    return np.array(verts).reshape(-1, k)


def robust_value_iteration(rmc, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Robust values by value iteration over enumerated polytope vertices."""
    n = rmc.n_states
    verts = [None if p is None else polytope_vertices(p.A, p.b) for p in rmc.polytopes]
    r = np.where(rmc.terminal, 0.0, rmc.rewards)
    x = np.zeros(n)
    for _ in range(max_iter):
        y = x.copy()
        for s, V in enumerate(verts):
            if V is not None:
                y[s] = r[s] + (V @ x[rmc.polytopes[s].support]).min()
        if np.abs(y - x).max() <= tol * (1 + np.abs(y).max()):
            return y
        x = y
    raise RuntimeError("value iteration did not converge")

"""Expected-reward solutions of pMCs and their partial derivatives.

With P = P[u] (terminal rows zeroed) the value vector solves
(I − P) x = r and sol = s_Iᵀ x.  Differentiating gives, per parameter v,
(I − P) ∂x/∂v = (∂P/∂v) x, so all derivatives share one factorization.
The adjoint g with (I − P)ᵀ g = s_I turns each derivative into gᵀ d_v.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order

from . import expr as ex
from .errors import LpError, ReachabilityError
from .expr import as_values
from .linalg import Factorization
from .lp import LinearProgram, select_binary, solve_lp
from .models import PMC, ConcreteMC, instantiate_pmc

CHUNK = 64


@dataclass
class PmcSolution:
    x_star: np.ndarray
    sol: float
    mc: ConcreteMC = field(repr=False)
    factorization: Factorization = field(repr=False)


@dataclass
class GradientReport:
    values: np.ndarray
    params: np.ndarray  # parameter ids the values belong to
    method: str
    names: tuple[str, ...] = ()
    verdict: object = None

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}


@dataclass
class TopkResult:
    selected: np.ndarray
    k: int
    direction: str
    objective: float
    z: np.ndarray = field(repr=False)
    n_fractional: int = 0
    values: np.ndarray | None = None
    names: tuple[str, ...] = ()


def reachable_from(P: sp.csr_matrix, sources) -> np.ndarray:
    """Boolean mask of states reachable from ``sources`` along P's nonzeros."""
    n = P.shape[0]
    seen = np.zeros(n, dtype=bool)
    G = sp.csr_matrix(P, copy=True)
    G.data[:] = 1.0
    for s in np.flatnonzero(np.asarray(sources)):
        if seen[s]:
            continue
        seen[breadth_first_order(G, int(s), directed=True, return_predecessors=False)] = True
    return seen


def check_terminal_reachability(P: sp.csr_matrix, initial, terminal) -> None:
    """Raise unless every state reachable from supp(s_I) can reach S_T."""
    fwd = reachable_from(P, np.asarray(initial) > 0)
    back = reachable_from(P.T.tocsr(), terminal)
    bad = np.flatnonzero(fwd & ~back)
    if bad.size:
        raise ReachabilityError(f"state {bad[0]} is reachable but cannot reach a terminal state "
                                f"({bad.size} such states)")


def system_matrix(mc: ConcreteMC) -> sp.csc_matrix:
    n = mc.n_states
    return (sp.identity(n, format="csr") - mc.P).tocsc()


def solve_mc(mc: ConcreteMC, check: bool = True) -> PmcSolution:
    if check:
        check_terminal_reachability(mc.P, mc.initial, mc.terminal)
    fac = Factorization(system_matrix(mc))
    x = fac.solve(mc.effective_rewards())
    x[mc.terminal] = 0.0
    return PmcSolution(x_star=x, sol=float(mc.initial @ x), mc=mc, factorization=fac)


def solve_expected_reward(m: PMC, u) -> PmcSolution:
    return solve_mc(instantiate_pmc(m, u))


def derivative_matrix(m: PMC, u, x_star) -> sp.csc_matrix:
    """Column v holds ∂(P x*)/∂v at u (n_states × n_params)."""
    r, c, p, dex = m.derivative_entries()
    vals = ex.evaluate_all(dex, as_values(u)) if dex else np.zeros(0)
    D = sp.csc_matrix((vals * np.asarray(x_star)[c], (r, p)), shape=(m.n_states, m.n_params))
    D.sum_duplicates()
    return D


def derivative_rhs(m: PMC, u, x_star, v) -> np.ndarray:
    """Entry s is Σ_t ∂P(s,t)/∂v · x*_t; zero on terminal states."""
    i = v.id if isinstance(v, ex.Parameter) else int(v)
    return derivative_matrix(m, u, x_star)[:, i].toarray().ravel()


def _names(m, idx) -> tuple[str, ...]:
    return tuple(m.params.names[i] for i in idx)


def _column_solves(fac: Factorization, D: sp.csc_matrix, cols, threads: int) -> np.ndarray:
    """Dense block of solutions for the selected columns of D."""
    cols = np.asarray(cols, dtype=np.int64)
    out = np.zeros((D.shape[0], cols.size))
    chunks = [cols[i:i + CHUNK] for i in range(0, cols.size, CHUNK)]

    def work(ci):
        block = D[:, chunks[ci]].toarray()
        return ci, fac.solve(block)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(len(chunks))))
    else:
        results = [work(ci) for ci in range(len(chunks))]
    for ci, sol in results:
        start = ci * CHUNK
        out[:, start:start + sol.shape[1]] = sol
    return out


def gradient_explicit(m: PMC, u, threads: int = 1, solution: PmcSolution | None = None) -> GradientReport:
    """All partial derivatives via one factorization and ℓ right-hand sides."""
    sol = solution or solve_expected_reward(m, u)
    D = derivative_matrix(m, u, sol.x_star)
    idx = np.arange(m.n_params)
    dX = _column_solves(sol.factorization, D, idx, threads)
    vals = sol.mc.initial @ dX if idx.size else np.zeros(0)
    return GradientReport(np.asarray(vals, dtype=float), idx, "explicit", _names(m, idx))


def gradient_adjoint(m: PMC, u, solution: PmcSolution | None = None) -> GradientReport:
    """All partial derivatives via one transposed solve: ∂sol/∂v = gᵀ d_v."""
    sol = solution or solve_expected_reward(m, u)
    g = sol.factorization.solve_transposed(np.asarray(sol.mc.initial, dtype=float))
    D = derivative_matrix(m, u, sol.x_star)
    vals = np.asarray(D.T @ g, dtype=float).ravel()
    idx = np.arange(m.n_params)
    return GradientReport(vals, idx, "adjoint", _names(m, idx))


def derivatives_for_subset(m: PMC, u, subset, solution: PmcSolution | None = None,
                           threads: int = 1) -> GradientReport:
    sol = solution or solve_expected_reward(m, u)
    idx = np.asarray(sorted(int(getattr(v, "id", v)) for v in subset), dtype=np.int64)
    if idx.size == 0:
        return GradientReport(np.zeros(0), idx, "subset", ())
    D = derivative_matrix(m, u, sol.x_star)
    dX = _column_solves(sol.factorization, D, idx, threads)
    return GradientReport(np.asarray(sol.mc.initial @ dX, dtype=float), idx, "subset", _names(m, idx))


def topk_from_coefficients(coef, k: int, direction: str = "highest", engine: str = "simplex"):
    """Solve max/min coefᵀz s.t. Σz = k, 0 ≤ z ≤ 1 and resolve ties."""
    coef = np.asarray(coef, dtype=float)
    ell = coef.size
    lp = LinearProgram(c=coef, A_eq=np.ones((1, ell)), b_eq=[float(k)], lb=np.zeros(ell), ub=np.ones(ell),
                       sense="max" if direction == "highest" else "min")
    res = solve_lp(lp, engine=engine)
    if not res.ok:
        raise LpError(f"top-k relaxation returned {res.status}")
    sel, nfrac = select_binary(res.x, coef, k, direction)
    return sel, res.x, float(res.objective), nfrac


def _check_k(k, ell, direction):
    if not 1 <= k <= ell:
        raise ValueError(f"k must lie in [1, {ell}], got {k}")
    if direction not in ("highest", "lowest"):
        raise ValueError("direction must be 'highest' or 'lowest'")


def topk(m: PMC, u, k: int, direction: str = "highest", method: str = "reduced",
         engine: str = "auto", with_values: bool = False, solution: PmcSolution | None = None) -> TopkResult:
    """Select the k parameters with extremal derivatives via the LP relaxation.

    ``method="direct"`` solves the relaxation over (y, z) with the equality
    (I − P) y = Σ z_v d_v; ``method="reduced"`` eliminates y with one
    transposed solve first, leaving an LP over z alone.
    """
    _check_k(k, m.n_params, direction)
    sol = solution or solve_expected_reward(m, u)
    D = derivative_matrix(m, u, sol.x_star)
    if method == "reduced":
        g = sol.factorization.solve_transposed(np.asarray(sol.mc.initial, dtype=float))
        coef = np.asarray(D.T @ g, dtype=float).ravel()
        sel, z, obj, nfrac = topk_from_coefficients(coef, k, direction,
                                                    engine="simplex" if engine == "auto" else engine)
    elif method == "direct":
        sel, z, obj, nfrac = _topk_direct(sol.mc, D, k, direction, engine)
    else:
        raise ValueError(f"unknown method {method!r}")
    res = TopkResult(sel, k, direction, obj, z, nfrac, names=_names(m, sel))
    if with_values:
        res.values = derivatives_for_subset(m, u, sel, solution=sol).values
    return res


def _topk_direct(mc: ConcreteMC, D: sp.csc_matrix, k, direction, engine):
    n, ell = D.shape
    M = sp.identity(n, format="csr") - mc.P
    A = sp.vstack([
        sp.hstack([M, -D]),
        sp.hstack([sp.csr_matrix((1, n)), sp.csr_matrix(np.ones((1, ell)))]),
    ], format="csr")
    b = np.zeros(n + 1)
    b[-1] = k
    c = np.concatenate([np.asarray(mc.initial, dtype=float), np.zeros(ell)])
    lp = LinearProgram(c=c, A_eq=A, b_eq=b,
                       lb=np.concatenate([np.full(n, -np.inf), np.zeros(ell)]),
                       ub=np.concatenate([np.full(n, np.inf), np.ones(ell)]),
                       sense="max" if direction == "highest" else "min")
    res = solve_lp(lp, engine=engine)
    if not res.ok:
        raise LpError(f"top-k relaxation returned {res.status}")
    z = res.x[n:]
    # tie scores are the LP's own reduced costs shifted by the Σz multiplier
    scores = res.reduced_costs[n:] + res.duals_eq[-1]
    sel, nfrac = select_binary(z, scores, k, direction)
    return sel, z, float(res.objective), nfrac

"""Linear programming with vertex optima.

The default engine is a bounded-variable two-phase revised primal simplex
(dense basis factorization, suited to programs with up to a few hundred
rows).  Larger programs can be routed to the HiGHS dual simplex shipped with
scipy; both return basic solutions, which the top-k relaxation relies on.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

FEAS_TOL = 1e-8
OPT_TOL = 1e-9
PIVOT_TOL = 1e-11
HARRIS_TOL = 1e-9
DEGENERATE_GUARD = 50

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"


@dataclass
class LinearProgram:
    """min/max cᵀx  s.t.  A_eq x = b_eq,  A_ub x ≤ b_ub,  lb ≤ x ≤ ub.

    Inequality rows are turned into equalities with nonnegative slacks
    appended after the structural variables.
    """

    c: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray | None = None
    A_ub: object = None
    b_ub: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    sense: str = "min"
    names: list[str] | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        if self.sense not in ("min", "max"):
            raise ValueError("sense must be 'min' or 'max'")
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n)
        self.A_ub, self.b_ub = _rows(self.A_ub, self.b_ub, n)
        self.lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(-1).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(-1).copy()
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bound vectors must match the number of variables")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")
        if np.any(np.isposinf(self.lb)) or np.any(np.isneginf(self.ub)):
            raise ValueError("invalid infinite bound")
        for arr in (self.c, self.A_eq.data, self.b_eq, self.A_ub.data, self.b_ub):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LP data must be finite")

    @property
    def n(self) -> int:
        return self.c.size

    def standard_form(self):
        """Equality form (c, A, b, lb, ub) with slacks for inequality rows."""
        m_ub = self.A_ub.shape[0]
        A = sp.vstack([
            sp.hstack([self.A_eq, sp.csr_matrix((self.A_eq.shape[0], m_ub))]),
            sp.hstack([self.A_ub, sp.identity(m_ub, format="csr")]),
        ], format="csr")
        b = np.concatenate([self.b_eq, self.b_ub])
        c = np.concatenate([self.c, np.zeros(m_ub)])
        lb = np.concatenate([self.lb, np.zeros(m_ub)])
        ub = np.concatenate([self.ub, np.full(m_ub, np.inf)])
        if self.sense == "max":
            c = -c
        return c, A, b, lb, ub

    def dump(self) -> str:
        """Plain-text listing, one constraint per line."""
        names = self.names or [f"x{j}" for j in range(self.n)]
        out = io.StringIO()
        out.write(f"{self.sense} {_linear(self.c, names)}\n")
        out.write("subject to\n")
        for A, b, op, tag in ((self.A_eq, self.b_eq, "=", "e"), (self.A_ub, self.b_ub, "<=", "u")):
            for i in range(A.shape[0]):
                row = A.getrow(i)
                terms = " ".join(f"{v:+.17g} {names[j]}" for j, v in zip(row.indices, row.data))
                out.write(f"{tag}{i}: {terms or '0'} {op} {b[i]:.17g}\n")
        out.write("bounds\n")
        for j in range(self.n):
            out.write(f"{self.lb[j]:.17g} <= {names[j]} <= {self.ub[j]:.17g}\n")
        out.write("end\n")
        return out.getvalue()


def _linear(c, names) -> str:
    return " ".join(f"{v:+.17g} {names[j]}" for j, v in enumerate(c) if v != 0) or "0"


def _rows(A, b, n):
    if A is None:
        return sp.csr_matrix((0, n)), np.zeros(0)
    A = sp.csr_matrix(A, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.shape[1] != n or A.shape[0] != b.size:
        raise ValueError(f"constraint shape {A.shape} inconsistent with {n} variables / {b.size} rhs")
    return A, b


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    basis: np.ndarray | None = None  # bool mask over structural + slack variables
    duals_eq: np.ndarray | None = None  # multipliers of equality rows (objective sense)
    duals_ub: np.ndarray | None = None  # multipliers of inequality rows, ≤ 0 for min
    reduced_costs: np.ndarray | None = None
    slack: np.ndarray | None = None
    iterations: int = 0
    engine: str = "simplex"
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def solve_lp(lp: LinearProgram, engine: str = "simplex", max_iter: int = 100_000) -> LpSolution:
    """Solve ``lp`` and return a basic optimal solution when one exists.

    ``engine`` is "simplex" (own implementation), "highs" (scipy's HiGHS
    dual simplex) or "auto" (HiGHS above 400 rows).
    """
    if engine == "auto":
        rows = lp.A_eq.shape[0] + lp.A_ub.shape[0]
        engine = "highs" if rows > 400 else "simplex"
    if engine == "highs":
        return _solve_highs(lp)
    if engine != "simplex":
        raise ValueError(f"unknown engine {engine!r}")
    c, A, b, lb, ub = lp.standard_form()
    res = _simplex(c, A.toarray(), b, lb, ub, max_iter)
    return _finish(lp, res)


def _finish(lp: LinearProgram, res: dict) -> LpSolution:
    sol = LpSolution(status=res["status"], iterations=res["iterations"], message=res.get("message", ""))
    if res["status"] != OPTIMAL:
        return sol
    n = lp.n
    m_eq = lp.A_eq.shape[0]
    sign = -1.0 if lp.sense == "max" else 1.0
    x = res["x"]
    sol.x = x[:n].copy()
    sol.slack = x[n:].copy()
    sol.objective = float(lp.c @ sol.x)
    sol.basis = res["basis"]
    y = sign * res["y"]
    sol.duals_eq = y[:m_eq]
    sol.duals_ub = y[m_eq:]
    sol.reduced_costs = sign * res["d"][:n]
    return sol


def _simplex(c, A, b, lb, ub, max_iter):
    """Bounded-variable two-phase revised simplex on min cᵀx, Ax=b, lb≤x≤ub."""
    m, n = A.shape
    x = np.where(np.isfinite(lb), lb, np.where(np.isfinite(ub), ub, 0.0))
    r = b - A @ x
    # artificials: one per row, sign chosen so that they start nonnegative
    sgn = np.where(r >= 0, 1.0, -1.0)
    Afull = np.hstack([A, np.diag(sgn)])
    lo = np.concatenate([lb, np.zeros(m)])
    hi = np.concatenate([ub, np.full(m, np.inf)])
    xf = np.concatenate([x, np.abs(r)])
    basis = list(range(n, n + m))
    iters = 0

    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    st, basis, xf, iters = _iterate(c1, Afull, b, lo, hi, xf, basis, iters, max_iter)
    if st != OPTIMAL:
        return {"status": st, "iterations": iters}
    infeas = xf[n:].sum()
    if infeas > FEAS_TOL * (1.0 + np.abs(b).max(initial=0.0)):
        return {"status": INFEASIBLE, "iterations": iters, "message": f"phase-1 residual {infeas:.3e}"}
    # artificials are pinned at zero for phase 2
    hi[n:] = 0.0
    xf[n:] = 0.0
    c2 = np.concatenate([c, np.zeros(m)])
    st, basis, xf, iters = _iterate(c2, Afull, b, lo, hi, xf, basis, iters, max_iter)
    if st != OPTIMAL:
        return {"status": st, "iterations": iters}
    B = Afull[:, basis]
    lu = sla.lu_factor(B, check_finite=False) if m else None
    if m:
        y = sla.lu_solve(lu, c2[basis], trans=1, check_finite=False)
    else:
        y = np.zeros(0)
    d = c2 - Afull.T @ y
    d[basis] = 0.0
    mask = np.zeros(n + m, dtype=bool)
    mask[basis] = True
    return {"status": OPTIMAL, "x": xf[:n], "y": y, "d": d[:n], "basis": mask[:n], "iterations": iters}


def _basic_values(Afull, b, xf, basis, lu, nonbasic_mask):
    rhs = b - Afull[:, nonbasic_mask] @ xf[nonbasic_mask]
    return sla.lu_solve(lu, rhs, check_finite=False)


def _iterate(cost, Afull, b, lo, hi, xf, basis, iters, max_iter):
    m, N = Afull.shape
    bland = False
    degenerate_run = 0
    if m == 0:
        # no rows: each variable sits at its best bound
        for j in range(N):
            if cost[j] > 0:
                if not np.isfinite(lo[j]):
                    return UNBOUNDED, basis, xf, iters
                xf[j] = lo[j]
            elif cost[j] < 0:
                if not np.isfinite(hi[j]):
                    return UNBOUNDED, basis, xf, iters
                xf[j] = hi[j]
        return OPTIMAL, basis, xf, iters
    while True:
        if iters >= max_iter:
            return ITERATION_LIMIT, basis, xf, iters
        B = Afull[:, basis]
        lu = sla.lu_factor(B, check_finite=False)
        nonbasic = np.ones(N, dtype=bool)
        nonbasic[basis] = False
        xb = _basic_values(Afull, b, xf, basis, lu, nonbasic)
        xf[basis] = xb
        y = sla.lu_solve(lu, cost[basis], trans=1, check_finite=False)
        d = cost - Afull.T @ y
        fixed = hi - lo <= 0.0
        at_lo = xf <= lo
        at_hi = xf >= hi
        can_inc = nonbasic & ~fixed & ~at_hi
        can_dec = nonbasic & ~fixed & ~at_lo
        elig = (can_inc & (d < -OPT_TOL)) | (can_dec & (d > OPT_TOL))
        cand = np.flatnonzero(elig)
        if cand.size == 0:
            return OPTIMAL, basis, xf, iters
        if bland:
            j = int(cand[0])
        else:
            j = int(cand[np.argmax(np.abs(d[cand]))])
        direction = 1.0 if d[j] < 0 else -1.0
        w = sla.lu_solve(lu, Afull[:, j], check_finite=False)
        # x_B(t) = x_B - direction * t * w
        dw = direction * w
        t_best = hi[j] - lo[j]  # bound flip of the entering variable
        leave = -1
        leave_to_hi = False
        lob = lo[basis]
        hib = hi[basis]
        # Harris two-pass ratio test: find the largest step allowed with the
        # bounds relaxed by HARRIS_TOL, then among rows blocking within it take
        # the largest pivot element to keep the basis well conditioned
        ptol = max(PIVOT_TOL, 1e-9 * np.abs(dw).max(initial=0.0))
        dec = dw > ptol
        inc = dw < -ptol
        exact = np.full(m, np.inf)
        relaxed = np.full(m, np.inf)
        with np.errstate(invalid="ignore", divide="ignore"):
            exact[dec] = (xb[dec] - lob[dec]) / dw[dec]
            relaxed[dec] = (xb[dec] - lob[dec] + HARRIS_TOL) / dw[dec]
            exact[inc] = (hib[inc] - xb[inc]) / (-dw[inc])
            relaxed[inc] = (hib[inc] - xb[inc] + HARRIS_TOL) / (-dw[inc])
        exact = np.maximum(exact, 0.0)
        tmax = max(relaxed.min(initial=np.inf), 0.0)
        if exact.min(initial=np.inf) < t_best:
            ties = np.flatnonzero(exact <= min(tmax, t_best))
            if bland:
                # lowest index among the blocking rows, but never a tiny pivot
                big = ties[np.abs(dw[ties]) >= 1e-2 * np.abs(dw[ties]).max()]
                k = int(min(big, key=lambda i: basis[i]))
            else:
                k = int(ties[np.argmax(np.abs(dw[ties]))])
            t_best = exact[k]
            leave = k
            leave_to_hi = bool(inc[k])
        if not np.isfinite(t_best):
            return UNBOUNDED, basis, xf, iters
        iters += 1
        if t_best <= 1e-12:
            degenerate_run += 1
            if degenerate_run > DEGENERATE_GUARD:
                bland = True
        else:
            degenerate_run = 0
        xf[j] += direction * t_best
        xf[basis] = xb - dw * t_best
        if leave < 0:
            # entering variable moved to its opposite bound
            xf[j] = hi[j] if direction > 0 else lo[j]
            continue
        out = basis[leave]
        xf[out] = hi[out] if leave_to_hi else lo[out]
        basis[leave] = j


def _solve_highs(lp: LinearProgram) -> LpSolution:
    from scipy.optimize import linprog

    sign = -1.0 if lp.sense == "max" else 1.0
    res = linprog(
        sign * lp.c,
        A_ub=lp.A_ub if lp.A_ub.shape[0] else None,
        b_ub=lp.b_ub if lp.A_ub.shape[0] else None,
        A_eq=lp.A_eq if lp.A_eq.shape[0] else None,
        b_eq=lp.b_eq if lp.A_eq.shape[0] else None,
        bounds=np.column_stack([
            np.where(np.isfinite(lp.lb), lp.lb, -np.inf),
            np.where(np.isfinite(lp.ub), lp.ub, np.inf),
        ]),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10,
                 "presolve": True},
    )
    status = {0: OPTIMAL, 2: INFEASIBLE, 3: UNBOUNDED, 1: ITERATION_LIMIT}.get(res.status, ITERATION_LIMIT)
    sol = LpSolution(status=status, engine="highs", message=res.message, iterations=int(res.nit or 0))
    if status != OPTIMAL:
        return sol
    sol.x = np.asarray(res.x, dtype=float)
    sol.objective = float(lp.c @ sol.x)
    sol.slack = lp.b_ub - lp.A_ub @ sol.x
    sol.duals_eq = sign * np.asarray(res.eqlin.marginals) if lp.A_eq.shape[0] else np.zeros(0)
    sol.duals_ub = sign * np.asarray(res.ineqlin.marginals) if lp.A_ub.shape[0] else np.zeros(0)
    rc = lp.c - (lp.A_eq.T @ sol.duals_eq + lp.A_ub.T @ sol.duals_ub)
    sol.reduced_costs = rc
    return sol


def residuals(lp: LinearProgram, sol: LpSolution) -> dict[str, float]:
    """Primal feasibility violations of an optimal solution."""
    x = sol.x
    eq = np.abs(lp.A_eq @ x - lp.b_eq).max(initial=0.0)
    ub = np.maximum(lp.A_ub @ x - lp.b_ub, 0.0).max(initial=0.0)
    bnd = max(np.maximum(lp.lb - x, 0.0).max(initial=0.0), np.maximum(x - lp.ub, 0.0).max(initial=0.0))
    return {"eq": float(eq), "ub": float(ub), "bounds": float(bnd)}


def select_binary(z, scores, k: int, direction: str = "highest", tie_tol: float = 1e-9):
    """Resolve a top-k relaxation optimum into a binary selection.

    Fractional entries are pushed to bounds preserving Σz = k, lowest index
    first, and selected/unselected pairs with tied scores are exchanged so
    that the lower index is selected.  Non-tied entries are left untouched.
    Returns (selected indices, number of fractional entries seen).
    """
    z = np.asarray(z, dtype=float)
    scores = np.asarray(scores, dtype=float)
    ones = set(np.flatnonzero(z > 1 - 1e-7).tolist())
    frac = [i for i in np.flatnonzero((z >= 1e-7) & (z <= 1 - 1e-7)).tolist()]
    n_frac = len(frac)
    need = k - len(ones)
    if need < 0:
        raise ValueError("relaxation selected more than k entries")
    take = sorted(frac)[:need]
    ones.update(take)
    if len(ones) < k:
        # only possible with an infeasible/garbled input; fill lowest zeros
        rest = [i for i in range(z.size) if i not in ones]
        ones.update(rest[: k - len(ones)])
    sel = sorted(ones)
    chosen = np.zeros(z.size, dtype=bool)
    chosen[sel] = True
    scale = max(1.0, float(np.abs(scores).max(initial=0.0)))
    changed = True
    while changed:
        changed = False
        out_idx = np.flatnonzero(~chosen)
        for i in np.flatnonzero(chosen)[::-1]:
            tied = out_idx[(out_idx < i) & (np.abs(scores[out_idx] - scores[i]) <= tie_tol * scale)]
            if tied.size:
                j = int(tied[0])
                chosen[i] = False
                chosen[j] = True
                changed = True
                break
    return np.flatnonzero(chosen), n_frac

"""Robust solutions of prMCs, their derivatives and top-k selection.

For a minimizing adversary the robust value satisfies, per non-terminal s,
x_s = r_s + min{pᵀ x_post(s) : A_s p ≤ b_s, 1ᵀp = 1}.  Dualizing the inner
problem gives multipliers α_s ≥ 0, β_s with

    x_s = r_s − (b_sᵀ α_s + β_s),   A_sᵀ α_s + x_post(s) + β_s 1 = 0.

Differentiating these identities on the active rows E_s (α_s > τ) yields a
square sparse system C whenever |post(s)| = |E_s| + 1 for every relevant
state; its right-hand sides are −α_Eᵀ ∂b_E and −(α_Eᵀ ∂A_E)ᵀ.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import expr as ex
from .errors import EmptyUncertaintySet, LpError, NotDifferentiable, NumericalError, SingularMatrix
from .expr import as_values
from .linalg import Factorization
from .lp import LinearProgram, select_binary, solve_lp
from .models import PRMC, ConcreteMC, ConcreteRMC, instantiate_prmc
from .pmc import GradientReport, TopkResult, check_terminal_reachability, reachable_from, topk_from_coefficients

TAU_ACTIVE = 1e-9
TIGHT_TOL = 1e-9
SLACK_DERIV_TOL = 1e-9
IMPROVE_TOL = 1e-12
MAX_POLICY_ITERS = 500

UNDERDETERMINED = "underdetermined"
OVERDETERMINED = "overdetermined"
SINGULAR = "singular"


# ---------------------------------------------------------------------------
# concrete model layout


class _Layout:
    """Interval states grouped by successor count, plus general polytopes."""

    def __init__(self, rmc: ConcreteRMC):
        n = rmc.n_states
        self.n = n
        self.rmc = rmc
        by_k: dict[int, list[int]] = {}
        self.general: list[int] = []
        for s, poly in enumerate(rmc.polytopes):
            if poly is None:
                continue
            if poly.is_interval:
                by_k.setdefault(poly.support.size, []).append(s)
            else:
                self.general.append(s)
        self.groups = []
        for k in sorted(by_k):
            st = np.asarray(by_k[k], dtype=np.int64)
            succ = np.stack([rmc.polytopes[s].support for s in st])
            lo = np.stack([rmc.polytopes[s].lower for s in st])
            hi = np.stack([rmc.polytopes[s].upper for s in st])
            self.groups.append((k, st, succ, lo, hi))
        rows, cols = [], []
        for s, poly in enumerate(rmc.polytopes):
            if poly is not None:
                rows.append(np.full(poly.support.size, s))
                cols.append(poly.support)
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        self.support_graph = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))


def _greedy_group(X, lo, hi):
    """Vectorized interval inner problem for a group of states.

    Successors are filled in increasing order of x (stable by position)
    from their lower bounds; the successor absorbing the remaining budget is
    the pivot.  Returns p, pivot position (in successor order) and the sort
    order.
    """
    nS, k = X.shape
    order = np.argsort(X, axis=1, kind="stable")
    lo_o = np.take_along_axis(lo, order, axis=1)
    hi_o = np.take_along_axis(hi, order, axis=1)
    cap = np.maximum(hi_o - lo_o, 0.0)
    budget = np.maximum(1.0 - lo.sum(axis=1), 0.0)
    cum = np.cumsum(cap, axis=1)
    prev = cum - cap
    add = np.clip(budget[:, None] - prev, 0.0, cap)
    reached = cum >= budget[:, None] - 1e-14
    fpos = np.where(reached.any(axis=1), reached.argmax(axis=1), k - 1)
    p_o = lo_o + add
    p = np.empty_like(p_o)
    np.put_along_axis(p, order, p_o, axis=1)
    pivot = order[np.arange(nS), fpos]
    return p, pivot, order, fpos


def _interval_duals(X, order, fpos):
    """Vertex duals of the greedy solution; rows are (upper_j, lower_j) pairs."""
    nS, k = X.shape
    xf = X[np.arange(nS), order[np.arange(nS), fpos]]
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(k), (nS, k)).copy(), axis=1)
    before = rank < fpos[:, None]
    after = rank > fpos[:, None]
    alpha = np.zeros((nS, 2 * k))
    alpha[:, 0::2] = np.where(before, np.maximum(xf[:, None] - X, 0.0), 0.0)
    alpha[:, 1::2] = np.where(after, np.maximum(X - xf[:, None], 0.0), 0.0)
    beta = -xf
    return alpha, beta


def _inner_general(poly, xpost):
    """min pᵀ xpost over the concrete polytope; returns p, α, β."""
    k = poly.support.size
    lp = LinearProgram(c=xpost, A_eq=np.ones((1, k)), b_eq=[1.0], A_ub=poly.A, b_ub=poly.b,
                       lb=np.full(k, -np.inf), ub=np.full(k, np.inf))
    res = solve_lp(lp)
    if res.status == "infeasible":
        raise EmptyUncertaintySet(-1)
    if not res.ok:
        raise LpError(f"inner problem returned {res.status}")
    alpha = np.maximum(-res.duals_ub, 0.0)
    beta = float(-res.duals_eq[0])
    return res.x, alpha, beta


# ---------------------------------------------------------------------------
# solutions


@dataclass
class RobustSolution:
    x_star: np.ndarray
    alpha: list  # per state, length m_s (None on terminal states)
    beta: np.ndarray  # nan on terminal states
    sol_R: float
    active: list  # per state boolean masks E_s
    p_star: list  # per state worst-case distribution over post(s)
    rmc: ConcreteRMC = field(repr=False)
    method: str = "policy"
    iterations: int = 0
    policy: object = field(default=None, repr=False)
    layout: object = field(default=None, repr=False)

    def worst_case_mc(self) -> ConcreteMC:
        rows, cols, vals = [], [], []
        for s, poly in enumerate(self.rmc.polytopes):
            if poly is not None:
                rows.append(np.full(poly.support.size, s))
                cols.append(poly.support)
                vals.append(self.p_star[s])
        n = self.rmc.n_states
        P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        return ConcreteMC(P=P, initial=self.rmc.initial, rewards=self.rmc.rewards, terminal=self.rmc.terminal)


class _Policy:
    def __init__(self, group_p, general_p):
        self.group_p = group_p
        self.general_p = general_p

    def same_as(self, other) -> bool:
        if other is None:
            return False
        return (all(np.array_equal(a, b) for a, b in zip(self.group_p, other.group_p))
                and all(np.array_equal(self.general_p[s], other.general_p[s]) for s in self.general_p))


def _evaluate_policy(lay: _Layout, pol: _Policy, r):
    n = lay.n
    rows, cols, vals = [], [], []
    for (k, st, succ, lo, hi), p in zip(lay.groups, pol.group_p):
        rows.append(np.repeat(st, k))
        cols.append(succ.ravel())
        vals.append(p.ravel())
    for s, p in pol.general_p.items():
        rows.append(np.full(p.size, s))
        cols.append(lay.rmc.polytopes[s].support)
        vals.append(p)
    if rows:
        P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    else:
        P = sp.csr_matrix((n, n))
    M = (sp.identity(n, format="csr") - P).tocsc()
    x = Factorization(M).solve(r)
    x[lay.rmc.terminal] = 0.0
    return x


def _greedy_policy(lay: _Layout, x):
    gp = []
    for k, st, succ, lo, hi in lay.groups:
        p, _, _, _ = _greedy_group(x[succ], lo, hi)
        gp.append(p)
    genp = {}
    for s in lay.general:
        poly = lay.rmc.polytopes[s]
        genp[s] = _inner_general(poly, x[poly.support])[0]
    return _Policy(gp, genp)


def _improve(lay: _Layout, pol: _Policy, x) -> tuple[_Policy, bool]:
    """Switch to the greedy distribution only where it strictly improves."""
    cand = _greedy_policy(lay, x)
    changed = False
    new_gp = []
    for (k, st, succ, lo, hi), pc, pn in zip(lay.groups, pol.group_p, cand.group_p):
        X = x[succ]
        qc = (pc * X).sum(axis=1)
        qn = (pn * X).sum(axis=1)
        better = qn < qc - IMPROVE_TOL * (1.0 + np.abs(qc))
        if better.any():
            changed = True
            pc = np.where(better[:, None], pn, pc)
        new_gp.append(pc)
    new_gen = {}
    for s in lay.general:
        xs = x[lay.rmc.polytopes[s].support]
        qc, qn = pol.general_p[s] @ xs, cand.general_p[s] @ xs
        if qn < qc - IMPROVE_TOL * (1.0 + abs(qc)):
            new_gen[s] = cand.general_p[s]
            changed = True
        else:
            new_gen[s] = pol.general_p[s]
    return _Policy(new_gp, new_gen), changed


def _initial_policy(lay: _Layout, r):
    # greedy against the immediate rewards: a cheap, proper starting point
    return _greedy_policy(lay, np.where(lay.rmc.terminal, 0.0, r))


def _policy_iteration(lay: _Layout, r, warm: _Policy | None):
    pol = warm if warm is not None else _initial_policy(lay, r)
    it = 0
    x = _evaluate_policy(lay, pol, r)
    while True:
        it += 1
        if it > MAX_POLICY_ITERS:
            raise NumericalError("robust policy iteration did not converge")
        pol, changed = _improve(lay, pol, x)
        if not changed:
            break
        x = _evaluate_policy(lay, pol, r)
    # canonical final step: the reported policy depends on x only, so warm
    # and cold starts end at the same point
    for _ in range(20):
        canon = _greedy_policy(lay, x)
        if canon.same_as(pol):
            break
        pol = canon
        x = _evaluate_policy(lay, pol, r)
        it += 1
    return x, pol, it


def _duals_from_x(lay: _Layout, x, pol: _Policy | None):
    n = lay.n
    alpha: list = [None] * n
    pstar: list = [None] * n
    beta = np.full(n, np.nan)
    for k, st, succ, lo, hi in lay.groups:
        X = x[succ]
        p, pivot, order, fpos = _greedy_group(X, lo, hi)
        a, b = _interval_duals(X, order, fpos)
        for i, s in enumerate(st):
            alpha[s] = a[i]
            pstar[s] = p[i]
        beta[st] = b
    for s in lay.general:
        poly = lay.rmc.polytopes[s]
        p, a, b = _inner_general(poly, x[poly.support])
        alpha[s], beta[s], pstar[s] = a, b, p
    return alpha, beta, pstar


def robust_solve_rmc(rmc: ConcreteRMC, method: str = "policy", warm=None, engine: str = "auto",
                     check: bool = True) -> RobustSolution:
    lay = _Layout(rmc)
    if check:
        check_terminal_reachability(lay.support_graph, rmc.initial, rmc.terminal)
    r = rmc.effective_rewards()
    if method == "policy":
        wp = warm.policy if isinstance(warm, RobustSolution) else warm
        try:
            x, pol, it = _policy_iteration(lay, r, wp)
            alpha, beta, pstar = _duals_from_x(lay, x, pol)
        except SingularMatrix:
            # a policy that traps mass away from the terminals; the LP does
            # not evaluate policies and so does not hit this
            return robust_solve_rmc(rmc, "lp", engine=engine, check=False)
    elif method == "lp":
        x, alpha, beta, it = _solve_dual_lp(rmc, engine)
        pol = None
        pstar = _duals_from_x(lay, x, None)[2]
    else:
        raise ValueError(f"unknown method {method!r}")
    active = [None if a is None else a > TAU_ACTIVE for a in alpha]
    return RobustSolution(x_star=x, alpha=alpha, beta=beta, sol_R=float(rmc.initial @ x), active=active,
                          p_star=pstar, rmc=rmc, method=method, iterations=it, policy=pol, layout=lay)


def robust_solve(m: PRMC, u, method: str = "policy", warm=None, engine: str = "auto") -> RobustSolution:
    """Worst-case expected reward under a minimizing adversary.

    ``method="policy"`` runs robust policy iteration with exact inner
    solutions; ``method="lp"`` solves the dualized LP over (x, α, β).
    """
    return robust_solve_rmc(instantiate_prmc(m, u), method=method, warm=warm, engine=engine)


def dual_lp(rmc: ConcreteRMC) -> tuple[LinearProgram, list]:
    """The dualized robust LP over (x, α_s, β_s); also returns the α offsets."""
    n = rmc.n_states
    offs = [None] * n
    nv = n
    for s, poly in enumerate(rmc.polytopes):
        if poly is not None:
            offs[s] = (nv, nv + poly.b.size)  # α block, then β index
            nv += poly.b.size + 1
    rows, cols, vals, rhs = [], [], [], []
    row = 0
    r = rmc.effective_rewards()
    for s, poly in enumerate(rmc.polytopes):
        if poly is None:
            rows.append(row); cols.append(s); vals.append(1.0); rhs.append(0.0)
            row += 1
            continue
        a0, bi = offs[s]
        m, k = poly.A.shape
        # x_s + b_sᵀα_s + β_s = r_s
        rows += [row] * (m + 2)
        cols += [s] + list(range(a0, a0 + m)) + [bi]
        vals += [1.0] + poly.b.tolist() + [1.0]
        rhs.append(r[s])
        row += 1
        # A_sᵀα_s + x_post + β_s 1 = 0
        for j in range(k):
            nz = np.flatnonzero(poly.A[:, j])
            rows += [row] * (nz.size + 2)
            cols += (a0 + nz).tolist() + [int(poly.support[j]), bi]
            vals += poly.A[nz, j].tolist() + [1.0, 1.0]
            rhs.append(0.0)
            row += 1
    A = sp.csr_matrix((vals, (rows, cols)), shape=(row, nv))
    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    for s, o in enumerate(offs):
        if o is not None:
            lb[o[0]:o[1]] = 0.0
    c = np.zeros(nv)
    c[:n] = rmc.initial
    return LinearProgram(c=c, A_eq=A, b_eq=np.asarray(rhs), lb=lb, ub=ub, sense="max"), offs


def _solve_dual_lp(rmc: ConcreteRMC, engine: str):
    lp, offs = dual_lp(rmc)
    res = solve_lp(lp, engine=engine)
    if res.status == "infeasible":
        raise EmptyUncertaintySet(-1, "dualized robust LP is infeasible")
    if res.status == "unbounded":
        raise NumericalError("dualized robust LP is unbounded: terminal states are not reached almost surely")
    if not res.ok:
        raise LpError(f"dualized robust LP returned {res.status}")
    n = rmc.n_states
    x = res.x[:n].copy()
    x[rmc.terminal] = 0.0
    alpha: list = [None] * n
    beta = np.full(n, np.nan)
    for s, o in enumerate(offs):
        if o is not None:
            alpha[s] = np.maximum(res.x[o[0]:o[1]], 0.0)
            beta[s] = res.x[o[1]]
    return x, alpha, beta, res.iterations


def extract_active_sets(sol: RobustSolution, tau: float = TAU_ACTIVE) -> list:
    """E_s = [α*_s > τ] per state (None on terminal states)."""
    return [None if a is None else np.asarray(a) > tau for a in sol.alpha]


# ---------------------------------------------------------------------------
# differentiability and the derivative system


@dataclass
class StateDiagnostic:
    state: int
    n_active: int
    n_successors: int
    reason: str
    params: tuple = ()


@dataclass
class DifferentiabilityVerdict:
    ok: bool
    reason: str | None = None  # first failure class, None when ok
    failures: list = field(default_factory=list)  # StateDiagnostic per failing state
    flagged_params: frozenset = frozenset()
    counts: dict = field(default_factory=dict)  # state -> (ΣE_s, |post(s)| − 1)

    @property
    def failing_states(self) -> list[int]:
        return [f.state for f in self.failures]


def _flat_derivs(m: PRMC):
    """Symbolic derivative entries of all polytopes as flat arrays (cached)."""
    cached = getattr(m, "_flat_derivs", None)
    if cached is None:
        st, isb, ii, jj, vv, dd = [], [], [], [], [], []
        for s, ents in enumerate(m.derivative_entries()):
            for kind, i, j, v, d in ents:
                st.append(s)
                isb.append(kind == "b")
                ii.append(i)
                jj.append(j)
                vv.append(v)
                dd.append(d)
        cached = (np.asarray(st, dtype=np.int64), np.asarray(isb, dtype=bool), np.asarray(ii, dtype=np.int64),
                  np.asarray(jj, dtype=np.int64), np.asarray(vv, dtype=np.int64), dd)
        m._flat_derivs = cached
    return cached


def prepare_derivatives(m: PRMC) -> None:
    """Run the symbolic differentiation of all polytope entries up front."""
    _flat_derivs(m)


class _Context:
    """Numeric data shared by the verdict, C and its right-hand sides."""

    def __init__(self, m: PRMC, sol: RobustSolution, u):
        self.m = m
        self.sol = sol
        self.u = as_values(u)
        rmc = sol.rmc
        self.lay = sol.layout if sol.layout is not None else _Layout(rmc)
        n = rmc.n_states
        rel = reachable_from(self.lay.support_graph, rmc.initial > 0) & ~rmc.terminal
        self.rel = rel
        self.row_off = np.full(n, -1, dtype=np.int64)
        sizes = np.array([0 if p is None else p.b.size for p in rmc.polytopes], dtype=np.int64)
        offs = np.concatenate([[0], np.cumsum(sizes)])
        nt = ~rmc.terminal
        self.row_off[nt] = offs[:-1][nt]
        self.R = int(offs[-1])
        st, isb, ii, jj, vv, dd = _flat_derivs(m)
        vals = ex.evaluate_all(dd, self.u) if dd else np.zeros(0)
        bsel = isb
        self.Db = sp.csr_matrix((vals[bsel], (self.row_off[st[bsel]] + ii[bsel], vv[bsel])),
                                shape=(self.R, m.n_params))
        self.Db.sum_duplicates()
        asel = ~isb
        self.dA: dict[int, list] = {}
        for s, i, j, v, val in zip(st[asel], ii[asel], jj[asel], vv[asel], vals[asel]):
            self.dA.setdefault(int(s), []).append((int(i), int(j), int(v), float(val)))
        # interval states whose active set has the regular shape are handled
        # in vectorized form; everything else goes through the generic path
        self.fast = []  # per group: (k, st, succ, lo, hi, E, f, p)
        self.generic: list[int] = []
        self.count_fail: list[StateDiagnostic] = []
        self.counts: dict = {}
        interval_states = set()
        for k, gst, succ, lo, hi in self.lay.groups:
            sel = rel[gst]
            gst, succ, lo, hi = gst[sel], succ[sel], lo[sel], hi[sel]
            if gst.size == 0:
                continue
            interval_states.update(gst.tolist())
            E = np.stack([sol.active[s] for s in gst])
            up, dn = E[:, 0::2], E[:, 1::2]
            cnt = E.sum(axis=1)
            none_ = ~(up | dn)
            regular = (cnt == k - 1) & ~(up & dn).any(axis=1) & (none_.sum(axis=1) == 1)
            for a in np.flatnonzero(~regular):
                self._count_check(int(gst[a]), int(cnt[a]), k)
            if regular.any():
                r = regular
                f = none_[r].argmax(axis=1)
                p = np.where(up[r], hi[r], np.where(dn[r], lo[r], 0.0))
                idx = np.arange(f.size)
                p[idx, f] = 0.0
                p[idx, f] = 1.0 - p.sum(axis=1)
                self.fast.append((k, gst[r], succ[r], lo[r], hi[r], E[r], f, p))
                for s in gst[r]:
                    self.counts[int(s)] = (k - 1, k - 1)
        for s in np.flatnonzero(rel):
            if int(s) not in interval_states:
                poly = rmc.polytopes[s]
                self._count_check(int(s), int(sol.active[s].sum()), poly.support.size)

    def _count_check(self, s, nE, k):
        self.counts[s] = (nE, k - 1)
        allp = tuple(range(self.m.n_params))
        if nE < k - 1:
            self.count_fail.append(StateDiagnostic(s, nE, k, UNDERDETERMINED, allp))
        elif nE > k - 1:
            self.count_fail.append(StateDiagnostic(s, nE, k, OVERDETERMINED, allp))
        else:
            self.generic.append(s)

    # -- verdict -------------------------------------------------------------

    def verdict(self) -> DifferentiabilityVerdict:
        failures = list(self.count_fail)
        for grp in self.fast:
            failures += self._fast_tight(grp)
        for s in self.generic:
            d = self._generic_state(s)
            if d is not None:
                failures.append(d)
        failures.sort(key=lambda d: d.state)
        flagged: set[int] = set()
        for d in failures:
            flagged.update(d.params)
        return DifferentiabilityVerdict(ok=not failures, reason=failures[0].reason if failures else None,
                                        failures=failures, flagged_params=frozenset(flagged), counts=self.counts)

    def _fast_tight(self, grp) -> list[StateDiagnostic]:
        k, gst, succ, lo, hi, E, f, p = grp
        nS = gst.size
        up, dn = E[:, 0::2], E[:, 1::2]
        scale = 1.0 + np.maximum(np.abs(lo), np.abs(hi)).max(axis=1, keepdims=True)
        tight_up = ~up & (np.abs(hi - p) <= TIGHT_TOL * scale)
        tight_dn = ~dn & (np.abs(p - lo) <= TIGHT_TOL * scale)
        if not (tight_up.any() or tight_dn.any()):
            return []
        base = self.row_off[gst]
        # dp_j as combinations of rows of Db: +row_up (upper active) or
        # −row_lo (lower active); the pivot takes minus the sum of the others
        cols = base[:, None] + 2 * np.arange(k)[None, :] + np.where(up, 0, 1)
        coef = np.where(up, 1.0, -1.0)
        notf = np.ones((nS, k), dtype=bool)
        notf[np.arange(nS), f] = False
        trows, tcols, tvals, tstate, tscale = [], [], [], [], []
        t = 0
        for a, j, is_up in [(a, j, True) for a, j in zip(*np.nonzero(tight_up))] + \
                           [(a, j, False) for a, j in zip(*np.nonzero(tight_dn))]:
            own = base[a] + 2 * j + (0 if is_up else 1)
            # up: d(hi_j) − dp_j ; lower: dp_j + d(b_lo,j)
            sgn = -1.0 if is_up else 1.0
            trows.append(t); tcols.append(own); tvals.append(1.0)
            if notf[a, j]:
                trows.append(t); tcols.append(cols[a, j]); tvals.append(sgn * coef[a, j])
            else:
                others = np.flatnonzero(notf[a])
                trows += [t] * others.size
                tcols += cols[a, others].tolist()
                tvals += (-sgn * coef[a, others]).tolist()
            tstate.append(a)
            tscale.append(scale[a, 0])
            t += 1
        W = sp.csr_matrix((tvals, (trows, tcols)), shape=(t, self.R))
        DS = (W @ self.Db).tocsr()
        DS.sum_duplicates()
        bad: dict[int, set] = {}
        tscale = np.asarray(tscale)
        for r in range(t):
            a, b = DS.indptr[r], DS.indptr[r + 1]
            big = DS.indices[a:b][np.abs(DS.data[a:b]) > SLACK_DERIV_TOL * tscale[r]]
            if big.size:
                bad.setdefault(int(gst[tstate[r]]), set()).update(big.tolist())
        return [StateDiagnostic(s, k - 1, k, OVERDETERMINED, tuple(sorted(v))) for s, v in sorted(bad.items())]

    def _local(self, s):
        poly = self.sol.rmc.polytopes[s]
        E = self.sol.active[s]
        k = poly.support.size
        M = np.vstack([poly.A[E], np.ones((1, k))])
        try:
            lu = sla.lu_factor(M, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        if np.abs(np.diag(lu[0])).min(initial=np.inf) < 1e-12:
            return None
        return lu

    def _state_dAdb(self, s):
        poly = self.sol.rmc.polytopes[s]
        o = self.row_off[s]
        Dbs = self.Db[o:o + poly.b.size].tocsc()
        dA: dict[int, np.ndarray] = {}
        for i, j, v, val in self.dA.get(s, ()):
            dA.setdefault(v, np.zeros_like(poly.A))[i, j] += val
        params = sorted(set(Dbs.indices.tolist()) | set(dA))
        return Dbs, dA, params

    def _generic_state(self, s) -> StateDiagnostic | None:
        poly = self.sol.rmc.polytopes[s]
        E = self.sol.active[s]
        k = poly.support.size
        nE = int(E.sum())
        lu = self._local(s)
        if lu is None:
            return StateDiagnostic(s, nE, k, SINGULAR, tuple(range(self.m.n_params)))
        p = sla.lu_solve(lu, np.concatenate([poly.b[E], [1.0]]), check_finite=False)
        scale = 1.0 + np.abs(poly.b).max()
        tight = np.flatnonzero(~E & (np.abs(poly.b - poly.A @ p) <= TIGHT_TOL * scale))
        if tight.size == 0:
            return None
        Dbs, dA, params = self._state_dAdb(s)
        bad = []
        for v in params:
            dAv = dA.get(v, np.zeros_like(poly.A))
            dbv = Dbs[:, v].toarray().ravel()
            rhs = np.concatenate([(dbv - dAv @ p)[E], [0.0]])
            dp = sla.lu_solve(lu, rhs, check_finite=False)
            dslack = dbv[tight] - dAv[tight] @ p - poly.A[tight] @ dp
            if np.abs(dslack).max() > SLACK_DERIV_TOL * scale:
                bad.append(v)
        if bad:
            return StateDiagnostic(s, nE, k, OVERDETERMINED, tuple(bad))
        return None

    # -- the square system -----------------------------------------------------

    def build(self):
        """Assemble C, the right-hand side matrix D and the seed vector."""
        rmc = self.sol.rmc
        n = rmc.n_states
        rel_states = np.flatnonzero(self.rel)
        xidx = np.full(n, -1, dtype=np.int64)
        xidx[rel_states] = np.arange(rel_states.size)
        nx = rel_states.size
        rows, cols, vals = [], [], []
        srows, scols, svals = [], [], []  # S with D = S @ Db (+ dA terms)
        drows, dcols, dvals = [], [], []
        r0, c0 = 0, nx
        for k, gst, succ, lo, hi, E, f, p in self.fast:
            nS = gst.size
            up = E[:, 0::2]
            rb = r0 + (k + 1) * np.arange(nS)
            cb = c0 + k * np.arange(nS)
            r0 += (k + 1) * nS
            c0 += k * nS
            jgrid = np.broadcast_to(np.arange(k), (nS, k))
            notf = jgrid != f[:, None]
            pos = np.where(jgrid < f[:, None], jgrid, jgrid - 1)
            acol = cb[:, None] + 1 + pos
            bval = np.where(up, hi, -lo)
            arow = self.row_off[gst][:, None] + 2 * jgrid + np.where(up, 0, 1)
            alpha = np.stack([self.sol.alpha[s] for s in gst])
            aval = np.where(up, alpha[:, 0::2], alpha[:, 1::2])
            # eq1: ∂x_s + b_Eᵀ∂α_E + ∂β_s
            rows += [rb, rb, np.broadcast_to(rb[:, None], (nS, k))[notf]]
            cols += [xidx[gst], cb, acol[notf]]
            vals += [np.ones(nS), np.ones(nS), bval[notf]]
            srows.append(np.broadcast_to(rb[:, None], (nS, k))[notf])
            scols.append(arow[notf])
            svals.append(-aval[notf])
            # eq2 row j: ±∂α_(row of j) + ∂x_succ(j) + ∂β_s
            er = rb[:, None] + 1 + jgrid
            rows += [er[notf], er.ravel()]
            cols += [acol[notf], np.repeat(cb, k)]
            vals += [np.where(up, 1.0, -1.0)[notf], np.ones(nS * k)]
            xs = xidx[succ]
            has = xs >= 0
            rows.append(er[has])
            cols.append(xs[has])
            vals.append(np.ones(int(has.sum())))
        for s in self.generic:
            poly = rmc.polytopes[s]
            Emask = self.sol.active[s]
            E = np.flatnonzero(Emask)
            k = poly.support.size
            rb, cb = r0, c0
            r0 += 1 + k
            c0 += 1 + E.size
            acols = cb + 1 + np.arange(E.size)
            rows.append(np.full(E.size + 2, rb))
            cols.append(np.concatenate([[xidx[s], cb], acols]))
            vals.append(np.concatenate([[1.0, 1.0], poly.b[E]]))
            alpha = self.sol.alpha[s]
            srows.append(np.full(E.size, rb))
            scols.append(self.row_off[s] + E)
            svals.append(-alpha[E])
            AE = poly.A[E]
            for j in range(k):
                nz = np.flatnonzero(AE[:, j])
                t = poly.support[j]
                rr = [rb + 1 + j] * (nz.size + 1)
                cc = acols[nz].tolist() + [cb]
                vv = AE[nz, j].tolist() + [1.0]
                if xidx[t] >= 0:
                    rr.append(rb + 1 + j); cc.append(xidx[t]); vv.append(1.0)
                rows.append(np.asarray(rr)); cols.append(np.asarray(cc)); vals.append(np.asarray(vv))
            for i, j, v, val in self.dA.get(s, ()):
                if Emask[i]:
                    drows.append(rb + 1 + j); dcols.append(v); dvals.append(-alpha[i] * val)
        if r0 != c0:
            raise SingularMatrix(f"derivative system is {r0}×{c0}, not square")
        q = r0
        cat = lambda xs, dt=float: np.concatenate([np.asarray(x, dtype=dt).ravel() for x in xs]) if xs else np.zeros(0, dtype=dt)
        C = sp.csc_matrix((cat(vals), (cat(rows, np.int64), cat(cols, np.int64))), shape=(q, q))
        C.sum_duplicates()
        S = sp.csr_matrix((cat(svals), (cat(srows, np.int64), cat(scols, np.int64))), shape=(q, self.R))
        D = (S @ self.Db).tocsc()
        if drows:
            D = D + sp.csc_matrix((dvals, (drows, dcols)), shape=D.shape)
        D.sum_duplicates()
        seed = np.zeros(q)
        seed[:nx] = rmc.initial[rel_states]
        return C, D, seed


def _structural(verdict: DifferentiabilityVerdict) -> bool:
    """True if some failure prevents building a square C at all."""
    return any(f.reason != OVERDETERMINED or f.n_active != f.n_successors - 1 for f in verdict.failures)


def check_differentiability(m: PRMC, sol: RobustSolution, u, build: bool = True) -> DifferentiabilityVerdict:
    """Classify whether the derivative system is square and nonsingular.

    Per relevant state (reachable from the initial support, non-terminal)
    the active count must equal |post(s)| − 1.  Rows that are tight at the
    worst-case point without a positive multiplier are accepted only if
    their slack stays zero to first order; parameters that move such a
    slack are flagged as overdetermined.  Finally C is factorized.
    """
    ctx = _Context(m, sol, u)
    verdict = ctx.verdict()
    if build and not _structural(verdict):
        try:
            C, _, _ = ctx.build()
            Factorization(C)
        except SingularMatrix:
            _mark_singular(verdict, m)
    return verdict


def _mark_singular(verdict, m):
    verdict.ok = False
    verdict.reason = verdict.reason or SINGULAR
    verdict.failures.append(StateDiagnostic(-1, -1, -1, SINGULAR, tuple(range(m.n_params))))
    verdict.flagged_params = frozenset(range(m.n_params))


class _System:
    def __init__(self, m, sol, u, partial=False):
        ctx = _Context(m, sol, u)
        self.verdict = ctx.verdict()
        if not self.verdict.ok and (not partial or _structural(self.verdict)):
            raise NotDifferentiable(self.verdict)
        try:
            self.C, self.D, self.seed = ctx.build()
            self.fac = Factorization(self.C)
        except SingularMatrix:
            _mark_singular(self.verdict, m)
            raise NotDifferentiable(self.verdict) from None


def robust_gradient_all(m: PRMC, u, sol: RobustSolution | None = None, partial: bool = False,
                        threads: int = 1) -> GradientReport:
    """All ∂sol_R/∂v via one factorization of C and one solve per parameter.

    With ``partial=True`` a verdict that only flags individual parameters
    (tight inactive rows whose slack moves) still returns values; flagged
    entries are NaN.
    """
    u = as_values(u)
    sol = sol or robust_solve(m, u)
    names = tuple(m.params.names)
    idx = np.arange(m.n_params)
    sysm = _System(m, sol, u, partial)
    cols = [sysm.D[:, i].toarray().ravel() for i in idx]
    sols = sysm.fac.solve_many(cols, threads=threads)
    vals = np.array([sysm.seed @ z for z in sols], dtype=float)
    if sysm.verdict.flagged_params:
        vals[sorted(sysm.verdict.flagged_params)] = np.nan
    return GradientReport(vals, idx, "robust", names, sysm.verdict)


def robust_gradient(m: PRMC, u, sol: RobustSolution, v) -> float:
    """∂sol_R/∂v for a single parameter."""
    u = as_values(u)
    i = v.id if isinstance(v, ex.Parameter) else int(v)
    sysm = _System(m, sol, u, partial=True)
    if i in sysm.verdict.flagged_params:
        raise NotDifferentiable(sysm.verdict)
    return float(sysm.seed @ sysm.fac.solve(sysm.D[:, i].toarray().ravel()))


def topk_robust(m: PRMC, u, k: int, direction: str = "highest", sol: RobustSolution | None = None,
                method: str = "reduced", engine: str = "auto", with_values: bool = False) -> TopkResult:
    """k parameters with extremal robust derivatives via the LP relaxation.

    ``method="reduced"`` eliminates (∂x, ∂α, ∂β) with one transposed solve
    of C; ``method="direct"`` keeps them as free LP variables.
    """
    if not 1 <= k <= m.n_params:
        raise ValueError(f"k must lie in [1, {m.n_params}], got {k}")
    if direction not in ("highest", "lowest"):
        raise ValueError("direction must be 'highest' or 'lowest'")
    u = as_values(u)
    sol = sol or robust_solve(m, u)
    sysm = _System(m, sol, u)
    D = sysm.D
    if method == "reduced":
        g = sysm.fac.solve_transposed(sysm.seed)
        coef = np.asarray(D.T @ g, dtype=float).ravel()
        sel, z, obj, nfrac = topk_from_coefficients(coef, k, direction,
                                                    engine="simplex" if engine == "auto" else engine)
    elif method == "direct":
        q, ell = D.shape
        A = sp.vstack([
            sp.hstack([sysm.C, -D]),
            sp.hstack([sp.csr_matrix((1, q)), sp.csr_matrix(np.ones((1, ell)))]),
        ], format="csr")
        b = np.zeros(q + 1)
        b[-1] = k
        lp = LinearProgram(c=np.concatenate([sysm.seed, np.zeros(ell)]), A_eq=A, b_eq=b,
                           lb=np.concatenate([np.full(q, -np.inf), np.zeros(ell)]),
                           ub=np.concatenate([np.full(q, np.inf), np.ones(ell)]),
                           sense="max" if direction == "highest" else "min")
        res = solve_lp(lp, engine=engine)
        if not res.ok:
            raise LpError(f"robust top-k relaxation returned {res.status}")
        z = res.x[q:]
        sel, nfrac = select_binary(z, res.reduced_costs[q:] + res.duals_eq[-1], k, direction)
        obj = float(res.objective)
    else:
        raise ValueError(f"unknown method {method!r}")
    out = TopkResult(sel, k, direction, obj, z, nfrac, names=tuple(m.params.names[i] for i in sel))
    if with_values:
        out.values = np.array([sysm.seed @ sysm.fac.solve(D[:, i].toarray().ravel()) for i in sel])
    return out

"""Parametric Markov chain data structures, instantiation and validation.

A :class:`PMC` stores one sparse row of ``(successor, Expr)`` pairs per
state.  A :class:`PRMC` stores one :class:`ParametricPolytope` per
non-terminal state; the simplex equality ``1ᵀp = 1`` is never stored in the
polytope, the analyses add it themselves.  Terminal states have no outgoing
transitions and their value is pinned to zero.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import expr as ex
from .errors import EmptyUncertaintySet, GraphPreservationError, ValidationError
from .expr import Expr, Instantiation, ParameterSet, as_values

FORMAT_TAG = "prmc-sense-v1"
ROW_SUM_TOL = 1e-9
INIT_SUM_TOL = 1e-12


def _check_common(n_states, initial, rewards, terminal):
    if n_states < 1:
        raise ValidationError("model needs at least one state")
    initial = np.asarray(initial, dtype=float).reshape(-1)
    rewards = np.asarray(rewards, dtype=float).reshape(-1)
    if initial.size != n_states or rewards.size != n_states:
        raise ValidationError("initial/rewards length must equal the number of states")
    if np.any(initial < 0) or abs(initial.sum() - 1.0) > INIT_SUM_TOL:
        raise ValidationError("initial distribution must be nonnegative and sum to 1")
    if not np.all(np.isfinite(rewards)):
        raise ValidationError("rewards must be finite")
    term = np.zeros(n_states, dtype=bool)
    for t in terminal:
        if not 0 <= int(t) < n_states:
            raise ValidationError(f"terminal state {t} out of range")
        term[int(t)] = True
    initial.setflags(write=False)
    rewards.setflags(write=False)
    term.setflags(write=False)
    return initial, rewards, term


def _check_params(e: Expr, params: ParameterSet, where: str):
    for i in e.params():
        if i >= len(params):
            raise ValidationError(f"{where}: parameter index {i} not declared")


@dataclass(frozen=True)
class ConcreteMC:
    """Numeric Markov chain; rows of terminal states are zero."""

    P: sp.csr_matrix
    initial: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    def effective_rewards(self) -> np.ndarray:
        return np.where(self.terminal, 0.0, self.rewards)


class PMC:
    """Parametric Markov chain with expected cumulative reward objective."""

    def __init__(self, params: ParameterSet, n_states: int, initial, rewards, terminal: Iterable[int],
                 transitions: Sequence[Sequence[tuple[int, Expr]]]):
        self.params = params
        self.n_states = int(n_states)
        self.initial, self.rewards, self.terminal = _check_common(self.n_states, initial, rewards, terminal)
        if len(transitions) != self.n_states:
            raise ValidationError("need one transition row per state")
        rows, cols, exprs = [], [], []
        self.transitions: tuple[tuple[tuple[int, Expr], ...], ...] = tuple(
            tuple((int(t), ex._lift(e)) for t, e in row) for row in transitions)
        for s, row in enumerate(self.transitions):
            if self.terminal[s]:
                if row:
                    raise ValidationError(f"terminal state {s} has outgoing transitions")
                continue
            if not row:
                raise ValidationError(f"non-terminal state {s} has no outgoing transitions")
            seen = set()
            for t, e in row:
                if not 0 <= t < self.n_states:
                    raise ValidationError(f"state {s}: successor {t} out of range")
                if t in seen:
                    raise ValidationError(f"state {s}: duplicate successor {t}")
                seen.add(t)
                _check_params(e, params, f"transition ({s},{t})")
                rows.append(s)
                cols.append(t)
                exprs.append(e)
        self._rows = np.asarray(rows, dtype=np.int64)
        self._cols = np.asarray(cols, dtype=np.int64)
        self._exprs = exprs
        self._deriv = None

    @property
    def n_params(self) -> int:
        return len(self.params)

    @property
    def n_transitions(self) -> int:
        return len(self._exprs)

    def transition_values(self, u) -> np.ndarray:
        return ex.evaluate_all(self._exprs, as_values(u))

    def derivative_entries(self):
        """Flat arrays (row, col, param, dexpr) of nonzero symbolic derivatives."""
        if self._deriv is None:
            r, c, p, d = [], [], [], []
            memo: dict = {}
            for k, e in enumerate(self._exprs):
                for i in sorted(e.params()):
                    de = ex.differentiate(e, i, memo.setdefault(i, {}))
                    if isinstance(de, ex.Const) and de.value == 0:
                        continue
                    r.append(self._rows[k])
                    c.append(self._cols[k])
                    p.append(i)
                    d.append(de)
            self._deriv = (np.asarray(r, dtype=np.int64), np.asarray(c, dtype=np.int64),
                           np.asarray(p, dtype=np.int64), d)
        return self._deriv

    def to_json(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "kind": "pmc",
            "parameters": list(self.params.names),
            "states": self.n_states,
            "initial": self.initial.tolist(),
            "rewards": self.rewards.tolist(),
            "terminal": np.flatnonzero(self.terminal).tolist(),
            "pmc_rows": [[[t, ex.to_json(e)] for t, e in row] for row in self.transitions],
        }


def instantiate_pmc(m: PMC, u) -> ConcreteMC:
    """Numeric transition matrix at ``u`` after graph-preservation checks."""
    u = as_values(u)
    if u.size != m.n_params:
        raise ValidationError(f"instantiation has {u.size} values, model has {m.n_params} parameters")
    vals = m.transition_values(u)
    bad = np.flatnonzero(~((vals > 0.0) & (vals <= 1.0)))
    if bad.size:
        k = int(bad[0])
        raise GraphPreservationError(
            f"transition ({m._rows[k]},{m._cols[k]}) has probability {vals[k]!r} outside (0,1]")
    n = m.n_states
    sums = np.bincount(m._rows, weights=vals, minlength=n)
    dev = np.abs(sums - 1.0)
    dev[m.terminal] = 0.0
    if dev.max(initial=0.0) > ROW_SUM_TOL:
        s = int(np.argmax(dev))
        raise GraphPreservationError(f"row {s} sums to {sums[s]!r}")
    P = sp.csr_matrix((vals, (m._rows, m._cols)), shape=(n, n))
    return ConcreteMC(P=P, initial=m.initial, rewards=m.rewards, terminal=m.terminal)


# ---------------------------------------------------------------------------
# robust models


class ParametricPolytope:
    """{p : A p ≤ b} over the ordered successor list ``support``.

    Polytopes built from intervals also remember the bound expressions so
    that solvers can use a specialized inner problem.
    """

    def __init__(self, support: Sequence[int], A: Sequence[Sequence], b: Sequence,
                 lower: Sequence | None = None, upper: Sequence | None = None):
        self.support = np.asarray(support, dtype=np.int64)
        self.support.setflags(write=False)
        k = self.support.size
        if k == 0:
            raise ValidationError("polytope needs at least one successor")
        if len(set(self.support.tolist())) != k:
            raise ValidationError("duplicate successor in polytope support")
        self.A = tuple(tuple(ex._lift(a) for a in row) for row in A)
        self.b = tuple(ex._lift(x) for x in b)
        if len(self.A) < 1 or len(self.A) != len(self.b):
            raise ValidationError("polytope needs m ≥ 1 rows and one rhs per row")
        if any(len(row) != k for row in self.A):
            raise ValidationError("polytope row length must equal the number of successors")
        self.is_interval = lower is not None
        self.lower = tuple(ex._lift(x) for x in lower) if lower is not None else None
        self.upper = tuple(ex._lift(x) for x in upper) if upper is not None else None
        self._const_A = None
        self._deriv = None
        self._params = None
        self._inst = None  # (values of own parameters, ConcretePolytope)
        if all(isinstance(a, ex.Const) for row in self.A for a in row):
            self._const_A = np.array([[a.fvalue for a in row] for row in self.A])

    @classmethod
    def from_intervals(cls, support, lower, upper) -> "ParametricPolytope":
        k = len(support)
        if len(lower) != k or len(upper) != k:
            raise ValidationError("interval bounds must match the support length")
        A, b = [], []
        for j in range(k):
            up = [0] * k
            up[j] = 1
            lo = [0] * k
            lo[j] = -1
            A.append(up)
            b.append(ex._lift(upper[j]))
            A.append(lo)
            b.append(-ex._lift(lower[j]))
        return cls(support, A, b, lower=lower, upper=upper)

    @property
    def m(self) -> int:
        return len(self.b)

    def derivative_entries(self, memo: dict | None = None) -> list:
        """Nonzero (kind, row, col, param, dexpr) entries, cached on the polytope.

        Polytopes are immutable, so models that share a polytope share its
        symbolic derivatives.
        """
        if self._deriv is None:
            memo = {} if memo is None else memo
            ent = []
            for i, row in enumerate(self.A):
                for j, a in enumerate(row):
                    for v in sorted(a.params()):
                        d = ex.differentiate(a, v, memo.setdefault(v, {}))
                        if not (isinstance(d, ex.Const) and d.value == 0):
                            ent.append(("A", i, j, v, d))
            for i, e in enumerate(self.b):
                for v in sorted(e.params()):
                    d = ex.differentiate(e, v, memo.setdefault(v, {}))
                    if not (isinstance(d, ex.Const) and d.value == 0):
                        ent.append(("b", i, -1, v, d))
            self._deriv = ent
        return self._deriv

    def exprs(self) -> Iterable[Expr]:
        for row in self.A:
            yield from row
        yield from self.b

    def params(self) -> frozenset[int]:
        if self._params is None:
            out: set[int] = set()
            for e in self.exprs():
                out |= e.params()
            self._params = frozenset(out)
            self._param_idx = np.array(sorted(out), dtype=np.int64)
        return self._params

    def to_json(self) -> dict:
        if self.is_interval:
            return {"support": self.support.tolist(),
                    "lower": [ex.to_json(e) for e in self.lower],
                    "upper": [ex.to_json(e) for e in self.upper]}
        return {"support": self.support.tolist(),
                "A": [[ex.to_json(a) for a in row] for row in self.A],
                "b": [ex.to_json(e) for e in self.b]}


@dataclass(frozen=True)
class ConcretePolytope:
    support: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    @property
    def is_interval(self) -> bool:
        return self.lower is not None


@dataclass(frozen=True)
class ConcreteRMC:
    """Numeric robust Markov chain (polytope per non-terminal state)."""

    polytopes: tuple
    initial: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray

    @property
    def n_states(self) -> int:
        return self.initial.size

    def effective_rewards(self) -> np.ndarray:
        return np.where(self.terminal, 0.0, self.rewards)


class PRMC:
    """Parametric robust Markov chain with a minimizing adversary."""

    def __init__(self, params: ParameterSet, n_states: int, initial, rewards, terminal: Iterable[int],
                 polytopes: Sequence[ParametricPolytope | None], adversary: str = "min"):
        if adversary != "min":
            raise ValidationError("only minimizing adversaries are supported")
        self.params = params
        self.n_states = int(n_states)
        self.initial, self.rewards, self.terminal = _check_common(self.n_states, initial, rewards, terminal)
        if len(polytopes) != self.n_states:
            raise ValidationError("need one polytope entry per state")
        self.polytopes = tuple(polytopes)
        for s, poly in enumerate(self.polytopes):
            if self.terminal[s]:
                if poly is not None:
                    raise ValidationError(f"terminal state {s} has an uncertainty set")
                continue
            if poly is None:
                raise ValidationError(f"non-terminal state {s} has no uncertainty set")
            if poly.support.min() < 0 or poly.support.max() >= self.n_states:
                raise ValidationError(f"state {s}: successor out of range")
            for e in poly.exprs():
                _check_params(e, params, f"polytope of state {s}")
        self._deriv = None

    @property
    def n_params(self) -> int:
        return len(self.params)

    @property
    def n_transitions(self) -> int:
        return sum(p.support.size for p in self.polytopes if p is not None)

    def derivative_entries(self):
        """Per-state lists of (kind, row, col, param, dexpr); kind 'A' or 'b'."""
        if self._deriv is None:
            memo: dict = {}
            self._deriv = [[] if p is None else p.derivative_entries(memo) for p in self.polytopes]
        return self._deriv

    def to_json(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "kind": "prmc",
            "parameters": list(self.params.names),
            "states": self.n_states,
            "initial": self.initial.tolist(),
            "rewards": self.rewards.tolist(),
            "terminal": np.flatnonzero(self.terminal).tolist(),
            "prmc_rows": [None if p is None else p.to_json() for p in self.polytopes],
        }


def _polytope_nonempty(A: np.ndarray, b: np.ndarray) -> bool:
    from .lp import LinearProgram, solve_lp

    k = A.shape[1]
    lp = LinearProgram(c=np.zeros(k), A_eq=np.ones((1, k)), b_eq=[1.0], A_ub=A, b_ub=b,
                       lb=np.full(k, -np.inf), ub=np.full(k, np.inf))
    return solve_lp(lp).ok


def instantiate_polytope(poly: ParametricPolytope, u, memo: dict | None = None) -> ConcretePolytope:
    u = as_values(u)
    poly.params()
    key = u[poly._param_idx].tobytes()
    if poly._inst is not None and poly._inst[0] == key:
        return poly._inst[1]
    cp = _instantiate_polytope(poly, u, memo)
    poly._inst = (key, cp)
    return cp


def _instantiate_polytope(poly, u, memo):
    if memo is None:
        memo = {}
    if poly._const_A is not None:
        A = poly._const_A
    else:
        A = np.array([[ex.evaluate(a, u, memo) for a in row] for row in poly.A])
    b = np.array([ex.evaluate(e, u, memo) for e in poly.b])
    lo = hi = None
    if poly.is_interval:
        lo = np.array([ex.evaluate(e, u, memo) for e in poly.lower])
        hi = np.array([ex.evaluate(e, u, memo) for e in poly.upper])
    for arr in (A, b, lo, hi):
        if arr is not None:
            arr.setflags(write=False)
    return ConcretePolytope(poly.support, A, b, lo, hi)


def instantiate_prmc(m: PRMC, u) -> ConcreteRMC:
    """Numeric polytopes at ``u``; each is checked to contain a distribution."""
    u = as_values(u)
    if u.size != m.n_params:
        raise ValidationError(f"instantiation has {u.size} values, model has {m.n_params} parameters")
    memo: dict = {}
    polys = []
    for s, poly in enumerate(m.polytopes):
        if poly is None:
            polys.append(None)
            continue
        cp = instantiate_polytope(poly, u, memo)
        if cp.is_interval:
            tol = 1e-12
            ok = (np.all(cp.lower <= cp.upper + tol) and cp.lower.sum() <= 1 + tol
                  and cp.upper.sum() >= 1 - tol)
        else:
            ok = _polytope_nonempty(cp.A, cp.b)
        if not ok:
            raise EmptyUncertaintySet(s)
        polys.append(cp)
    return ConcreteRMC(polytopes=tuple(polys), initial=m.initial, rewards=m.rewards, terminal=m.terminal)


def interval_prmc(params: ParameterSet, n_states: int, initial, rewards, terminal: Iterable[int],
                  skeleton: Sequence[Sequence[int]], lowers: Sequence[Sequence], uppers: Sequence[Sequence],
                  nominal=None) -> PRMC:
    """Interval prMC: per successor one +e_j row for the upper and one −e_j
    row for the lower bound (m_s = 2|post(s)|).

    ``skeleton[s]`` lists the successors of s; ``lowers``/``uppers`` give the
    bound expressions in the same order.  If ``nominal`` is given, each
    lower ≤ upper is checked there.
    """
    if not (len(skeleton) == len(lowers) == len(uppers) == n_states):
        raise ValidationError("skeleton and bounds must have one entry per state")
    term = set(int(t) for t in terminal)
    polys = []
    for s in range(n_states):
        if s in term:
            if len(skeleton[s]):
                raise ValidationError(f"terminal state {s} has successors")
            polys.append(None)
            continue
        if not (len(skeleton[s]) == len(lowers[s]) == len(uppers[s])):
            raise ValidationError(f"state {s}: bound count does not match successor count")
        polys.append(ParametricPolytope.from_intervals(skeleton[s], lowers[s], uppers[s]))
    m = PRMC(params, n_states, initial, rewards, sorted(term), polys)
    if nominal is not None:
        v = as_values(nominal)
        for s, poly in enumerate(polys):
            if poly is None:
                continue
            for lo, hi in zip(poly.lower, poly.upper):
                if ex.evaluate(lo, v) > ex.evaluate(hi, v):
                    raise ValidationError(f"state {s}: lower bound exceeds upper bound at the nominal point")
    return m


def point_interval_prmc(m: PMC) -> PRMC:
    """Interval prMC whose intervals collapse to the pMC's transition functions."""
    skel = [[t for t, _ in row] for row in m.transitions]
    bounds = [[e for _, e in row] for row in m.transitions]
    return interval_prmc(m.params, m.n_states, m.initial, m.rewards, np.flatnonzero(m.terminal),
                         skel, bounds, bounds)


def admits_negative(poly: ConcretePolytope, tol: float = 1e-9) -> bool:
    """True if some distribution in the polytope has a negative coordinate."""
    if poly.is_interval:
        return bool(np.any(poly.lower < -tol))
    from .lp import LinearProgram, solve_lp

    k = poly.A.shape[1]
    for j in range(k):
        c = np.zeros(k)
        c[j] = 1.0
        lp = LinearProgram(c=c, A_eq=np.ones((1, k)), b_eq=[1.0], A_ub=poly.A, b_ub=poly.b,
                           lb=np.full(k, -np.inf), ub=np.full(k, np.inf))
        sol = solve_lp(lp)
        if sol.status == "unbounded" or (sol.ok and sol.objective < -tol):
            return True
    return False


def validate_model(m, u) -> list[str]:
    """Instantiate ``m`` at ``u``; return warnings, raise on hard errors."""
    notes: list[str] = []
    if isinstance(m, PMC):
        instantiate_pmc(m, u)
    else:
        rmc = instantiate_prmc(m, u)
        for s, p in enumerate(rmc.polytopes):
            if p is not None and admits_negative(p):
                notes.append(f"state {s}: polytope admits negative probabilities")
    for msg in notes:
        warnings.warn(msg)
    return notes


# ---------------------------------------------------------------------------
# JSON


def model_from_json(data: dict):
    if data.get("format") != FORMAT_TAG:
        raise ValidationError(f"unsupported model format {data.get('format')!r}")
    if data.get("adversary", "min") != "min":
        raise ValidationError("only minimizing adversaries are supported")
    params = ParameterSet(data.get("parameters", []))
    n = int(data["states"])
    common = (params, n, data["initial"], data["rewards"], data.get("terminal", []))
    if "pmc_rows" in data:
        rows = [[(int(t), ex.from_json(e, params)) for t, e in row] for row in data["pmc_rows"]]
        return PMC(*common, rows)
    if "prmc_rows" in data:
        polys = []
        for row in data["prmc_rows"]:
            if row is None:
                polys.append(None)
            elif "lower" in row:
                polys.append(ParametricPolytope.from_intervals(
                    row["support"], [ex.from_json(e, params) for e in row["lower"]],
                    [ex.from_json(e, params) for e in row["upper"]]))
            else:
                polys.append(ParametricPolytope(
                    row["support"], [[ex.from_json(a, params) for a in r] for r in row["A"]],
                    [ex.from_json(e, params) for e in row["b"]]))
        return PRMC(*common, polys)
    raise ValidationError("model has neither pmc_rows nor prmc_rows")


def load_model(path):
    with open(path) as fh:
        return model_from_json(json.load(fh))


def save_model(m, path) -> None:
    with open(path, "w") as fh:
        json.dump(m.to_json(), fh)


def load_instantiation(path, params: ParameterSet) -> Instantiation:
    with open(path) as fh:
        return Instantiation.from_mapping(params, json.load(fh))

"""Shared model builders for the test suite."""
from __future__ import annotations

import numpy as np
import pytest

from prmc_sense import expr as ex
from prmc_sense.models import PMC, interval_prmc

# slip-route example: MLE counts and true slip probabilities of five terrains
ROUTE = [0] * 4 + [1] + [3] * 5 + [4] * 3
ROUTE_N = np.array([12, 36, 30, 60, 22])
ROUTE_K = np.array([6, 15, 19, 32, 9])
ROUTE_TRUE = np.array([0.25, 0.40, 0.45, 0.50, 0.35])


def slip_route(route=ROUTE, n_terrains: int = 5) -> PMC:
    """Chain of cells; in a cell of terrain t the vehicle stays with prob. v_t."""
    params = ex.ParameterSet(f"v{t + 1}" for t in range(n_terrains))
    n = len(route) + 1
    rows = []
    for s, t in enumerate(route):
        v = params.par(params.names[t])
        rows.append([(s, v), (s + 1, ex.add(1, ex.mul(-1, v)))])
    rows.append([])
    init = np.zeros(n)
    init[0] = 1.0
    rew = np.ones(n)
    rew[-1] = 0.0
    return PMC(params, n, init, rew, [n - 1], rows)


def self_loop(p=None) -> PMC:
    """s0 loops with v (or the constant ``p``) and exits to the terminal s1."""
    params = ex.ParameterSet(["v"] if p is None else [])
    v = params.par("v") if p is None else ex.const(p)
    return PMC(params, 2, [1, 0], [1, 0], [1], [[(0, v), (1, ex.add(1, ex.mul(-1, v)))], []])


def three_way(lo, hi, rewards=(1.0, 0.0, 0.0, 0.0), xs=None, params=None):
    """One decision state s0 with successors s1, s2, s3.

    Successor s_j (j = 1..3) is a chain state that collects ``xs[j-1]`` in
    one step before absorbing in the terminal s4.  Bounds may be Exprs.
    """
    xs = (1.0, 2.0, 3.0) if xs is None else xs
    params = params or ex.ParameterSet([])
    n = 5
    rew = [rewards[0], *xs, 0.0]
    skel = [[1, 2, 3], [4], [4], [4], []]
    lows = [list(lo), [1], [1], [1], []]
    ups = [list(hi), [1], [1], [1], []]
    return interval_prmc(params, n, [1, 0, 0, 0, 0], rew, [4], skel, lows, ups)


@pytest.fixture
def route_pmc():
    return slip_route()


def random_lp(rng: np.random.Generator, n: int | None = None, sense: str | None = None):
    """Feasible, bounded LP with equality and inequality rows.

    A random interior point x0 fixes b_eq and leaves slack in b_ub, and
    finite boxes keep the objective bounded in both senses.
    """
    from prmc_sense.lp import LinearProgram

    n = n or int(rng.integers(2, 16))
    m_eq = int(rng.integers(0, max(1, n // 2) + 1))
    m_ub = int(rng.integers(1, n + 4))
    lb = np.where(rng.random(n) < 0.2, -rng.uniform(0, 3, n), 0.0)
    ub = np.where(rng.random(n) < 0.8, rng.uniform(1, 5, n), np.inf)
    x0 = lb + rng.uniform(0.1, 0.9, n) * np.minimum(ub - lb, 4.0)
    A_eq = np.where(rng.random((m_eq, n)) < 0.6, rng.normal(size=(m_eq, n)), 0.0)
    A_ub = np.where(rng.random((m_ub, n)) < 0.6, rng.normal(size=(m_ub, n)), 0.0)
    # keep unbounded-above variables bounded through a budget row
    A_ub = np.vstack([A_ub, np.ones(n)])
    b_ub = A_ub @ x0 + rng.uniform(0, 2, m_ub + 1)
    return LinearProgram(c=rng.normal(size=n), A_eq=A_eq, b_eq=A_eq @ x0, A_ub=A_ub, b_ub=b_ub,
                         lb=lb, ub=ub, sense=sense or ("min" if rng.random() < 0.5 else "max"))


def lp_dual_objective(lp, sol) -> float:
    """Dual objective from the reported multipliers (objective sense)."""
    d = sol.reduced_costs
    sign = 1.0 if lp.sense == "min" else -1.0
    bound = np.where(sign * d > 0, lp.lb, lp.ub)
    bound = np.where(d == 0, 0.0, bound)
    return float(lp.b_eq @ sol.duals_eq + lp.b_ub @ sol.duals_ub + d @ bound)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import lp_dual_objective, random_lp
from prmc_sense.benchgen import random_pmc, random_point
from prmc_sense.lp import LinearProgram, residuals, select_binary, solve_lp
from prmc_sense.pmc import gradient_explicit, topk


def test_single_variable_max():
    sol = solve_lp(LinearProgram(c=[1.0], A_ub=[[1.0]], b_ub=[3.0], sense="max"))
    assert sol.ok and sol.x[0] == pytest.approx(3.0) and sol.objective == pytest.approx(3.0)


def test_simplex_vertex():
    sol = solve_lp(LinearProgram(c=[1.0, 2.0], A_eq=[[1.0, 1.0]], b_eq=[1.0]))
    assert np.allclose(sol.x, [1.0, 0.0]) and sol.objective == pytest.approx(1.0)


def test_infeasible_and_unbounded():
    inf = solve_lp(LinearProgram(c=[1.0], A_eq=[[1.0]], b_eq=[-1.0]))
    assert inf.status == "infeasible"
    unb = solve_lp(LinearProgram(c=[1.0], A_ub=[[-1.0]], b_ub=[0.0], sense="max"))
    assert unb.status == "unbounded"


def test_free_variables_and_degenerate_rows():
    # x free, y ≥ 0; the duplicated row makes the vertex degenerate
    lp = LinearProgram(c=[1.0, 1.0], A_ub=[[-1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]], b_ub=[-2.0, -2.0, 0.0],
                       lb=[-np.inf, 0.0])
    sol = solve_lp(lp)
    ref = solve_lp(lp, engine="highs")
    assert sol.ok and sol.objective == pytest.approx(ref.objective, abs=1e-9)


def test_dump_lists_every_row():
    lp = LinearProgram(c=[1.0, -2.0], A_eq=[[1.0, 1.0]], b_eq=[1.0], A_ub=[[1.0, 0.0]], b_ub=[0.5],
                       names=["a", "b"])
    text = lp.dump()
    assert "e0: +1 a +1 b = 1" in text and "u0: +1 a <= 0.5" in text and text.endswith("end\n")


def test_topk_relaxation_is_integral_on_random_pmc():
    m = random_pmc(50, 8, 3, seed=11)
    u = random_point(m, seed=11)
    g = gradient_explicit(m, u).values
    res = topk(m, u, 3, method="direct")
    assert res.n_fractional == 0 or set(res.z.round(7)) <= {0.0, 1.0}
    best = max(itertools.combinations(range(8), 3), key=lambda c: g[list(c)].sum())
    assert g[res.selected].sum() == pytest.approx(g[list(best)].sum(), abs=1e-9)



def test_long_degenerate_phase_one_keeps_the_basis_regular():
    # zero right-hand sides make every phase-1 pivot degenerate long enough
    # for the anti-cycling rule to engage; it must not accept tiny pivots
    m = random_pmc(172, 14, 2, seed=1164)
    u = random_point(m, seed=1164)
    g = gradient_explicit(m, u).values
    for k in (1, 3, 10):
        res = topk(m, u, k, method="direct")
        assert np.isfinite(res.objective)
        assert res.objective == pytest.approx(np.sort(g)[::-1][:k].sum(), rel=1e-9)

def test_select_binary_tie_rules():
    sel, nfrac = select_binary([0.5, 0.5, 1.0, 0.0], [1.0, 1.0, 2.0, 0.0], 2)
    assert list(sel) == [0, 2] and nfrac == 2
    # a tied unselected lower index is preferred
    sel, _ = select_binary([0, 1, 0], [1.0, 1.0, 0.5], 1)
    assert list(sel) == [0]
    # non-tied entries are never exchanged
    sel, _ = select_binary([0, 1, 0], [1.0, 2.0, 0.5], 1)
    assert list(sel) == [1]


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6))
def test_optimal_solutions_are_feasible_and_dual_tight(seed):
    lp = random_lp(np.random.default_rng(seed))
    sol = solve_lp(lp)
    assert sol.ok
    assert max(residuals(lp, sol).values()) <= 1e-8
    scale = 1.0 + abs(sol.objective)
    assert lp_dual_objective(lp, sol) == pytest.approx(sol.objective, abs=1e-8 * scale)
    ref = solve_lp(lp, engine="highs")
    assert sol.objective == pytest.approx(ref.objective, abs=1e-7 * scale)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_dual_signs(seed):
    lp = random_lp(np.random.default_rng(seed), sense="min")
    sol = solve_lp(lp)
    # min form: multipliers of ≤ rows are nonpositive, reduced costs point into the box
    assert np.all(sol.duals_ub <= 1e-9)
    at_lb = np.isclose(sol.x, lp.lb, atol=1e-9)
    at_ub = np.isclose(sol.x, lp.ub, atol=1e-9)
    interior = ~at_lb & ~at_ub
    assert np.all(np.abs(sol.reduced_costs[interior]) <= 1e-8)
    assert np.all(sol.reduced_costs[at_lb & ~at_ub] >= -1e-8)
    assert np.all(sol.reduced_costs[at_ub & ~at_lb] <= 1e-8)


def test_reruns_are_bit_identical():
    lp = random_lp(np.random.default_rng(5), n=12)
    a, b = solve_lp(lp), solve_lp(lp)
    assert a.x.tobytes() == b.x.tobytes() and a.duals_eq.tobytes() == b.duals_eq.tobytes()
    assert a.iterations == b.iterations

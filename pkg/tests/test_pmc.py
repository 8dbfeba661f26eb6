from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ROUTE_K, ROUTE_N, ROUTE_TRUE, self_loop, slip_route
from prmc_sense import expr as ex
from prmc_sense.benchgen import random_pmc, random_point
from prmc_sense.errors import ReachabilityError
from prmc_sense.linalg import STATS
from prmc_sense.models import PMC, instantiate_pmc
from prmc_sense.oracle import brute_topk, dense_pmc_value, fd_gradient_pmc, mc_estimate, same_selection
from prmc_sense.pmc import (derivative_rhs, derivatives_for_subset, gradient_adjoint, gradient_explicit,
                            solve_expected_reward, topk)


def test_single_step():
    m = PMC(ex.ParameterSet([]), 2, [1, 0], [1, 0], [1], [[(1, 1)], []])
    sol = solve_expected_reward(m, [])
    assert sol.sol == 1.0 and sol.x_star[1] == 0.0


def test_geometric_self_loop():
    m = self_loop()
    sol = solve_expected_reward(m, [0.5])
    assert sol.sol == pytest.approx(2.0, rel=1e-14)
    mean, se, capped = mc_estimate(sol.mc, 1_000_000, seed=1)
    assert not capped and abs(mean - 2.0) <= 0.01 * 2.0


def test_residual_and_terminal_zero():
    m = random_pmc(80, 6, 3, seed=2)
    sol = solve_expected_reward(m, random_point(m, seed=2))
    P = sol.mc.P.toarray()
    r = sol.mc.effective_rewards()
    assert np.abs(sol.x_star - P @ sol.x_star - r).max() <= 1e-8
    assert np.all(sol.x_star[sol.mc.terminal] == 0)


def test_unreachable_terminal_rejected():
    m = PMC(ex.ParameterSet([]), 3, [1, 0, 0], [1, 1, 0], [2], [[(1, 1)], [(0, 1)], []])
    with pytest.raises(ReachabilityError):
        solve_expected_reward(m, [])


def test_rhs_symbolic_entry():
    # P(s0,s1) = v, P(s0,s0) = 1 − v: entry(s0) = x1 − x0
    P = ex.ParameterSet(["v"])
    v = P.par("v")
    m = PMC(P, 3, [1, 0, 0], [1, 2, 0], [2], [[(1, v), (0, 1 - v)], [(2, 1)], []])
    sol = solve_expected_reward(m, [0.3])
    d = derivative_rhs(m, [0.3], sol.x_star, 0)
    assert d[0] == pytest.approx(sol.x_star[1] - sol.x_star[0]) and d[1] == 0 and d[2] == 0


def test_rhs_matches_fd_of_px():
    m = random_pmc(20, 4, 3, seed=3)
    u = random_point(m, seed=3)
    x = solve_expected_reward(m, u).x_star
    h = 1e-7
    for i in range(4):
        up, dn = u.copy(), u.copy()
        up[i] += h
        dn[i] -= h
        fd = (instantiate_pmc(m, up).P @ x - instantiate_pmc(m, dn).P @ x) / (2 * h)
        assert np.allclose(derivative_rhs(m, u, x, i), fd, atol=1e-6, rtol=1e-6)


def test_absent_and_parameter_free():
    P = ex.ParameterSet(["v", "w"])
    v = P.par("v")
    m = PMC(P, 2, [1, 0], [1, 0], [1], [[(0, v), (1, 1 - v)], []])
    g = gradient_explicit(m, [0.5, 0.3]).values
    assert g[1] == 0 and g[0] == pytest.approx(4.0)
    empty = gradient_explicit(self_loop(0.5), [])
    assert empty.values.size == 0


def test_slip_route_table():
    m = slip_route()
    mle = ROUTE_K / ROUTE_N
    assert solve_expected_reward(m, mle).sol == pytest.approx(25.51, abs=5e-3)
    assert solve_expected_reward(m, ROUTE_TRUE).sol == pytest.approx(21.62, abs=5e-3)
    g = gradient_explicit(m, mle).values
    # the unvisited terrain v3 has derivative exactly zero
    assert g[2] == 0.0
    assert np.allclose(g, [16.00, 2.94, 0.0, 22.96, 8.59], atol=5e-3)
    assert topk(m, mle, 1).names == ("v4",)


def test_zero_reward_gradient_vanishes():
    m = random_pmc(30, 5, 3, seed=4)
    z = PMC(m.params, m.n_states, m.initial, np.zeros(m.n_states), np.flatnonzero(m.terminal), m.transitions)
    assert np.all(gradient_adjoint(z, random_point(z, seed=4)).values == 0)


def test_single_factorization_for_all_parameters():
    m = random_pmc(200, 90, 3, seed=5)
    u = random_point(m, seed=5)
    STATS.reset()
    gradient_explicit(m, u)
    assert STATS.factorizations == 1


def test_threaded_gradient_matches_serial():
    m = random_pmc(200, 150, 3, seed=6)
    u = random_point(m, seed=6)
    assert np.array_equal(gradient_explicit(m, u).values, gradient_explicit(m, u, threads=3).values)


def test_subsets():
    m = random_pmc(60, 10, 3, seed=7)
    u = random_point(m, seed=7)
    full = gradient_explicit(m, u).values
    assert derivatives_for_subset(m, u, []).values.size == 0
    assert np.allclose(derivatives_for_subset(m, u, range(10)).values, full, rtol=1e-12)
    sub = derivatives_for_subset(m, u, [7, 2])
    assert list(sub.params) == [2, 7] and np.allclose(sub.values, full[[2, 7]])


def test_topk_extremes():
    m = random_pmc(60, 10, 3, seed=8)
    u = random_point(m, seed=8)
    g = gradient_explicit(m, u).values
    res = topk(m, u, 10)
    assert sorted(res.selected) == list(range(10)) and res.objective == pytest.approx(g.sum())
    one = topk(m, u, 1, with_values=True)
    assert one.selected[0] == np.argmax(g) and one.objective == pytest.approx(g.max())
    assert one.values[0] == pytest.approx(g.max())
    low = topk(m, u, 1, "lowest")
    assert low.selected[0] == np.argmin(g)
    with pytest.raises(ValueError):
        topk(m, u, 0)


def test_topk_with_ties_prefers_low_indices():
    # four parameters with identical effect on a symmetric model
    P = ex.ParameterSet(["a", "b", "c", "d"])
    rows = [[(1 + i, ex.const(0.25)) for i in range(4)]]
    for i, name in enumerate(P.names):
        v = P.par(name)
        rows.append([(1 + i, v), (5, 1 - v)])
    rows.append([])
    m = PMC(P, 6, [1, 0, 0, 0, 0, 0], [1, 1, 1, 1, 1, 0], [5], rows)
    for method in ("reduced", "direct"):
        res = topk(m, [0.5] * 4, 2, method=method)
        assert list(res.selected) == [0, 1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6))
def test_topk_matches_sorting(seed, k):
    m = random_pmc(40, 6, 3, seed=seed)
    u = random_point(m, seed=seed)
    g = gradient_explicit(m, u).values
    for method in ("reduced", "direct"):
        for direction in ("highest", "lowest"):
            res = topk(m, u, k, direction, method=method)
            assert len(res.selected) == k
            assert same_selection(res.selected, brute_topk(g, k, direction), g)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_three_gradients_agree(seed):
    m = random_pmc(50, 5, 3, seed=seed)
    u = random_point(m, seed=seed)
    a = gradient_adjoint(m, u).values
    e = gradient_explicit(m, u).values
    assert np.allclose(a, e, rtol=1e-9, atol=1e-12)
    assert np.allclose(e, fd_gradient_pmc(m, u), rtol=1e-4, atol=1e-7)
    assert solve_expected_reward(m, u).sol == pytest.approx(dense_pmc_value(m, u), rel=1e-10)


def test_unreachable_parameter_has_zero_derivative():
    # v only appears at s2, which the initial state never reaches
    P = ex.ParameterSet(["v", "w"])
    v, w = P.pars()
    rows = [[(0, w), (3, 1 - w)], [(2, 1)], [(2, v), (3, 1 - v)], []]
    m = PMC(P, 4, [1, 0, 0, 0], [1, 1, 1, 0], [3], rows)
    g = gradient_explicit(m, [0.4, 0.5]).values
    assert g[0] == 0.0 and g[1] != 0.0

from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest

from conftest import self_loop
from prmc_sense import expr as ex
from prmc_sense.benchgen import random_interval_prmc, random_pmc, random_point
from prmc_sense.models import PMC, instantiate_pmc
from prmc_sense.oracle import (brute_topk, exact_solve, fd_gradient_pmc, fd_gradient_prmc, mc_estimate,
                               polytope_vertices, same_selection)
from prmc_sense.pmc import solve_expected_reward


def test_brute_topk_rules():
    g = np.array([3.0, 1.0, 2.0])
    assert brute_topk(g, 3).tolist() == [0, 1, 2]
    assert brute_topk(np.ones(5), 2).tolist() == [0, 1]
    assert brute_topk(g, 1, "lowest").tolist() == [1]
    assert same_selection([0, 1], [0, 2], np.array([1.0, 0.5, 0.5]))
    assert not same_selection([0, 1], [0, 2], np.array([1.0, 0.5, 0.4]))


def test_fd_exact_on_linear_model():
    # sol = 1 + 2v is linear in v: any step gives the slope
    P = ex.ParameterSet(["v"])
    v = P.par("v")
    m = PMC(P, 3, [1, 0, 0], [1, 2, 0], [2], [[(1, v), (2, 1 - v)], [(2, 1)], []])
    for h in (1e-2, 1e-5, 0.1):
        assert fd_gradient_pmc(m, [0.4], h=h)[0] == pytest.approx(2.0, rel=1e-8)


def test_fd_parameter_free():
    assert fd_gradient_pmc(self_loop(0.5), []).size == 0
    pm = random_interval_prmc(6, 0, 2, seed=1)
    assert fd_gradient_prmc(pm, []).size == 0


def test_simulation_oracle():
    P = ex.ParameterSet([])
    chain = PMC(P, 3, [1, 0, 0], [1.5, 2.0, 0], [2], [[(1, 1)], [(2, 1)], []])
    mean, se, capped = mc_estimate(instantiate_pmc(chain, []), 100, seed=0)
    assert mean == 3.5 and se == 0.0 and not capped
    mean, se, _ = mc_estimate(instantiate_pmc(self_loop(0.5), []), 1, seed=0)
    assert se == 0.0 and mean == int(mean)
    misses = 0
    for seed in range(50):
        m = random_pmc(15, 3, 3, seed=seed)
        u = random_point(m, seed=seed)
        sol = solve_expected_reward(m, u)
        mean, se, _ = mc_estimate(sol.mc, 4000, seed=seed)
        misses += abs(mean - sol.sol) > 3 * se
    # three standard errors: a couple of misses among 50 would still be plausible
    assert misses <= 2


def test_exact_solve_and_vertices():
    assert exact_solve([[2, 1], [1, 3]], [3, 5]) == [Fraction(4, 5), Fraction(7, 5)]
    A = np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])
    b = np.array([0.8, -0.2, 0.8, -0.2])
    V = polytope_vertices(A, b)
    assert sorted(map(tuple, V.round(12))) == [(0.2, 0.8), (0.8, 0.2)]

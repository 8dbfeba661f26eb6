from __future__ import annotations

import io
import logging
import math

import numpy as np
import pytest

from conftest import ROUTE_K, ROUTE_N, ROUTE_TRUE, self_loop, slip_route
from prmc_sense import expr as ex
from prmc_sense import learning
from prmc_sense.errors import NotDifferentiable
from prmc_sense.learning import (LearnState, LearningModelBuilder, build_learning_prmc, choose_parameter,
                                 eps_expr, expected_visits, hoeffding_eps, hoeffding_interval, run_learning,
                                 write_trajectory_csv)
from prmc_sense.models import PMC, instantiate_pmc
from prmc_sense.oracle import mc_estimate
from prmc_sense.prmc import DifferentiabilityVerdict, robust_solve


def test_hoeffding_values():
    eps = hoeffding_eps(100, 0.9)
    assert eps == pytest.approx(0.12238734, abs=1e-8)
    lo, hi = hoeffding_interval(0.5, 100, 0.9)
    assert lo == pytest.approx(0.37761, abs=1e-5) and hi == pytest.approx(0.62239, abs=1e-5)
    assert hoeffding_eps(100, 1e-12) == pytest.approx(math.sqrt(math.log(2) / 200), rel=1e-9)
    assert hoeffding_eps(400, 0.9) == pytest.approx(eps / 2, rel=1e-14)
    assert hoeffding_interval(0.99, 10, 0.9)[1] == 1 - learning.CLIP
    with pytest.raises(ValueError):
        hoeffding_eps(10, 1.0)


def test_bound_expressions_follow_the_formula():
    P = ex.ParameterSet(["N"])
    N = P.par("N")
    (lo, hi), = learning.bound_exprs(LearnState([100], [50], 0.9), P)
    for n in (60, 100, 250, 1000):
        assert (ex.evaluate(lo, [n]), ex.evaluate(hi, [n])) == pytest.approx(hoeffding_interval(0.5, n, 0.9))
    d = ex.evaluate(ex.differentiate(hi, N), [100])
    assert d == pytest.approx(-hoeffding_eps(100, 0.9) / 200, rel=1e-12)
    assert d == pytest.approx(-6.119e-4, abs=1e-7)
    assert ex.evaluate(eps_expr(N, 0.9), [100]) == pytest.approx(hoeffding_eps(100, 0.9), rel=1e-14)


def test_clipping_is_decided_at_build_time():
    P = ex.ParameterSet(["N"])
    (lo, hi), = learning.bound_exprs(LearnState([10], [0], 0.9), P)
    assert isinstance(lo, ex.Const) and lo.fvalue == learning.CLIP
    assert hi.params() == {0}


def test_complement_transitions_carry_flipped_bounds():
    m = build_learning_prmc(slip_route(), LearnState(ROUTE_N, ROUTE_K, 0.9))
    poly = m.polytopes[0]
    u = ROUTE_N.astype(float)
    lo = [ex.evaluate(e, u) for e in poly.lower]
    hi = [ex.evaluate(e, u) for e in poly.upper]
    assert lo[1] == pytest.approx(1 - hi[0]) and hi[1] == pytest.approx(1 - lo[0])


def test_builder_reuses_untouched_polytopes():
    skel = slip_route()
    state = LearnState(ROUTE_N, ROUTE_K, 0.9)
    b = LearningModelBuilder(skel)
    first = b.build(state)
    state.update(3, 10, 20)
    second = b.build(state)
    for s, t in enumerate([0] * 4 + [1] + [3] * 5 + [4] * 3):
        assert (first.polytopes[s] is second.polytopes[s]) == (t != 3)
    fresh = build_learning_prmc(skel, state)
    u = state.N.astype(float)
    assert robust_solve(second, u).sol_R == robust_solve(fresh, u).sol_R


def test_expected_visits():
    P = ex.ParameterSet([])
    # starting in the terminal state: absorbed at once
    quick = PMC(P, 2, [0, 1], [1, 0], [1], [[(1, 1)], []])
    assert np.allclose(expected_visits(instantiate_pmc(quick, [])), [0, 1])
    mc = instantiate_pmc(self_loop(0.5), [])
    mu = expected_visits(mc)
    assert mu[0] == pytest.approx(2.0)
    mean, se, _ = mc_estimate(mc, 200_000, seed=3)
    assert abs(mean - mu[0]) <= 4 * se
    # one absorption per run
    route = instantiate_pmc(slip_route(), ROUTE_TRUE)
    mu = expected_visits(route)
    P = route.P.toarray()
    exit_p = P[:, route.terminal].sum(axis=1)
    assert mu @ exit_p == pytest.approx(1.0)


def test_strategy_rules():
    state = LearnState([50, 50, 50], [10, 20, 30], 0.9)
    assert choose_parameter("interval", state) == 0
    seq = [choose_parameter("uniform", state, np.random.default_rng(4)) for _ in range(3)]
    assert seq == [choose_parameter("uniform", state, np.random.default_rng(4)) for _ in range(3)]
    with pytest.raises(ValueError):
        choose_parameter("greedy", state)


def test_derivative_strategy_on_slip_route():
    skel = slip_route()
    state = LearnState(ROUTE_N, ROUTE_K, 0.9)
    m = build_learning_prmc(skel, state)
    sol = robust_solve(m, state.N.astype(float))
    assert choose_parameter("derivative", state, model=m, sol=sol) == 0
    w = choose_parameter("visits", state, np.random.default_rng(0), model=m, sol=sol,
                         param_states=learning.parameter_states(skel))
    assert w != 2  # terrain v3 is never visited


def test_derivative_strategy_falls_back(monkeypatch, caplog):
    def boom(*args, **kwargs):
        raise NotDifferentiable(DifferentiabilityVerdict(False, "underdetermined"))

    monkeypatch.setattr(learning, "topk_robust", boom)
    with caplog.at_level(logging.INFO, logger="prmc_sense.learning"):
        run = run_learning(slip_route(), ROUTE_TRUE, "derivative", 3, seed=1)
    assert run.fallbacks == 3 and "fell back" in caplog.text


def test_single_parameter_grows_linearly():
    run = run_learning(self_loop(), [0.3], "interval", 6, batch=25, seed=2, n0=100)
    assert run.state.N.tolist() == [100 + 6 * 25]
    assert run.chosen == [-1, 0, 0, 0, 0, 0, 0]
    assert run.bounds[-1] < run.bounds[0]


def test_zero_batch_keeps_the_bound():
    run = run_learning(slip_route(), ROUTE_TRUE, "uniform", 5, batch=0, seed=3)
    assert len(set(run.bounds)) == 1 and run.steps == list(range(6))


def test_runs_are_reproducible_and_csv():
    a = run_learning(slip_route(), ROUTE_TRUE, "visits", 8, seed=7)
    b = run_learning(slip_route(), ROUTE_TRUE, "visits", 8, seed=7)
    assert a.bounds == b.bounds and a.chosen == b.chosen
    assert [t[0] for t in a.state.trajectory] == list(range(9))
    buf = io.StringIO()
    write_trajectory_csv([a], buf, header="demo")
    lines = buf.getvalue().splitlines()
    assert lines[0] == "# demo" and lines[1] == "step,strategy,seed,robust_bound,chosen_parameter"
    assert lines[2].startswith("0,visits,7,") and lines[2].endswith(",-1") and len(lines) == 11


def test_bound_stays_above_truth_and_tightens():
    run = run_learning(slip_route(), ROUTE_TRUE, "derivative", 30, seed=5)
    assert all(b >= run.true_solution - 1e-9 for b in run.bounds)
    assert run.final_bound < run.bounds[0]

from __future__ import annotations

import numpy as np
import pytest

from prmc_sense.benchgen import (GridSpec, grid_skeleton, gridworld_pmc, gridworld_prmc, random_interval_prmc,
                                 random_pmc, random_point, terrain_map)
from prmc_sense.learning import hoeffding_interval
from prmc_sense.models import instantiate_pmc, instantiate_prmc
from prmc_sense.pmc import solve_expected_reward
from prmc_sense.prmc import robust_solve


def _enumerate_paths(mc, depth):
    """Expected reward by summing over all paths up to ``depth`` steps."""
    P = mc.P.toarray()
    r = mc.effective_rewards()
    frontier = {int(np.flatnonzero(mc.initial)[0]): 1.0}
    total = 0.0
    for _ in range(depth):
        nxt: dict[int, float] = {}
        for s, p in frontier.items():
            if mc.terminal[s]:
                continue
            total += p * r[s]
            for t in np.flatnonzero(P[s]):
                nxt[t] = nxt.get(t, 0.0) + p * P[s, t]
        frontier = nxt
    return total


def test_one_by_two_grid():
    inst = gridworld_pmc(GridSpec(1, 2, 0))
    # right reaches the goal, down wraps onto the start cell
    assert solve_expected_reward(inst.model, []).sol == pytest.approx(2.0)


def test_two_by_two_grid_matches_path_enumeration():
    inst = gridworld_pmc(GridSpec(2, 2, 0))
    mc = instantiate_pmc(inst.model, [])
    sol = solve_expected_reward(inst.model, []).sol
    assert sol == pytest.approx(4.0)
    assert sol == pytest.approx(_enumerate_paths(mc, 200), abs=1e-9)


def test_transition_count_and_terrains():
    spec = GridSpec(50, 100, 921)
    m = grid_skeleton(spec)
    assert m.n_states == 5000 and m.n_transitions == 3 * (5000 - 1)
    tmap = terrain_map(spec)
    assert set(tmap.tolist()) == set(range(921))


def test_biased_layout():
    spec = GridSpec(20, 40, 100, layout="biased")
    tmap = terrain_map(spec)
    assert np.sum(tmap < 10) == 400
    assert set(tmap.tolist()) == set(range(100))


def test_samples_and_point():
    inst = gridworld_pmc(GridSpec(6, 8, 5), seed=3)
    assert np.all((inst.sample_sizes >= 500) & (inst.sample_sizes <= 1000))
    assert np.allclose(inst.point, inst.mle)
    assert np.all((inst.true_values >= 0.05) & (inst.true_values <= 0.5))


def test_zero_width_override_reproduces_pmc():
    spec = GridSpec(6, 8, 5)
    robust = gridworld_prmc(spec, seed=1, width_override=0.0)
    point = gridworld_pmc(spec, seed=1)
    val = robust_solve(robust.model, robust.point).sol_R
    assert val == pytest.approx(solve_expected_reward(point.model, point.point).sol, rel=1e-9)


def test_hoeffding_coverage():
    spec = GridSpec(4, 5, 10)
    hits, total = 0, 0
    for seed in range(100):
        inst = gridworld_prmc(spec, seed=seed)
        for p, n, k in zip(inst.true_values, inst.sample_sizes, inst.successes):
            lo, hi = hoeffding_interval(k / n, n, 0.9)
            hits += lo <= p <= hi
            total += 1
    assert hits / total >= 0.9


def test_prmc_grid_solves_end_to_end():
    inst = gridworld_prmc(GridSpec(50, 100, 100), seed=2)
    sol = robust_solve(inst.model, inst.point)
    true = solve_expected_reward(inst.extra["skeleton"], inst.true_values).sol
    # rewards +1 under a minimizing adversary: a lower bound whenever all intervals cover
    assert np.isfinite(sol.sol_R) and sol.sol_R <= true + 1e-6


def test_random_models_validate():
    for seed in range(20):
        m = random_pmc(40, 6, 3, seed=seed)
        for j in range(50):
            instantiate_pmc(m, random_point(m, seed=1000 * seed + j))
        pm = random_interval_prmc(20, 4, 3, seed=seed)
        instantiate_prmc(pm, random_point(pm, seed=seed))


def test_chain_and_plain_mc():
    m = random_pmc(12, 0, 1, seed=4)
    assert m.n_params == 0
    sol = solve_expected_reward(m, [])
    assert sol.sol == pytest.approx(m.rewards[:-1].sum())


def test_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(1, 1, 0)
    with pytest.raises(ValueError):
        GridSpec(3, 3, 2, n_lo=10, n_hi=5)
    with pytest.raises(ValueError):
        GridSpec(3, 3, 2, layout="stripes")

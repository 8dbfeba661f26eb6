"""Derivative-guided sample allocation with Hoeffding-interval prMCs.

Each parameter of a skeleton pMC is an unknown probability that can be
sampled.  After N_i Bernoulli samples with mean p̂_i the true value lies in
[p̂_i − ε_i, p̂_i + ε_i] with confidence β, ε_i = sqrt((ln 2 − ln(1−β))/(2N_i)).
The learned model is an interval prMC whose parameters are the sample sizes.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import expr as ex
from .errors import NotDifferentiable, ValidationError
from .expr import ParameterSet
from .linalg import Factorization
from .models import PMC, PRMC, ConcreteMC, ParametricPolytope, instantiate_pmc
from .pmc import solve_mc
from .prmc import RobustSolution, robust_solve, topk_robust

log = logging.getLogger(__name__)

CLIP = 1e-6
STRATEGIES = ("derivative", "interval", "uniform", "visits")


def hoeffding_eps(N, beta: float) -> float:
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    return math.sqrt((math.log(2.0) - math.log(1.0 - beta)) / (2.0 * N))


def hoeffding_interval(p_hat: float, N: int, beta: float, delta: float = CLIP) -> tuple[float, float]:
    eps = hoeffding_eps(N, beta)
    lo = min(max(p_hat - eps, delta), 1.0 - delta)
    hi = min(max(p_hat + eps, delta), 1.0 - delta)
    return lo, hi


def eps_expr(N: ex.Expr, beta: float) -> ex.Expr:
    """ε as an expression in the sample size N."""
    num = ex.add(ex.log(2), ex.mul(-1, ex.log(1 - ex._frac(beta))))
    return ex.sqrt(ex.mul(num, ex.power(ex.mul(2, N), -1)))


@dataclass
class LearnState:
    N: np.ndarray
    successes: np.ndarray
    beta: float = 0.9
    seed: int | None = None
    trajectory: list = field(default_factory=list)  # (step, robust bound, chosen parameter)

    def __post_init__(self):
        self.N = np.asarray(self.N, dtype=np.int64).copy()
        self.successes = np.asarray(self.successes, dtype=np.int64).copy()
        if np.any(self.N < 1) or np.any(self.successes < 0) or np.any(self.successes > self.N):
            raise ValueError("need N ≥ 1 and 0 ≤ successes ≤ N")

    @property
    def p_hat(self) -> np.ndarray:
        return self.successes / self.N

    def eps(self) -> np.ndarray:
        return np.array([hoeffding_eps(n, self.beta) for n in self.N])

    def update(self, i: int, k: int, n: int) -> None:
        self.successes[i] += k
        self.N[i] += n


def initial_state(true_values, rng: np.random.Generator, n0: int = 100, beta: float = 0.9,
                  seed: int | None = None) -> LearnState:
    true_values = np.asarray(true_values, dtype=float)
    succ = rng.binomial(n0, true_values)
    return LearnState(np.full(true_values.size, n0), succ, beta, seed)


def _affine_parts(skeleton: PMC):
    """Per transition (a, c, param) with e = a + c·v_param; param −1 if constant."""
    out = []
    zero = np.zeros(skeleton.n_params)
    for s, row in enumerate(skeleton.transitions):
        parts = []
        for t, e in row:
            ps = e.params()
            if len(ps) > 1:
                raise ValidationError(f"transition ({s},{t}) depends on more than one parameter")
            if not ps:
                parts.append((t, ex.evaluate(e, zero), 0.0, -1))
                continue
            (i,) = ps
            d = ex.differentiate(e, i)
            if d.params():
                raise ValidationError(f"transition ({s},{t}) is not affine in its parameter")
            a = ex.evaluate(e, zero)
            c = ex.evaluate(d, zero)
            one = zero.copy()
            one[i] = 1.0
            if abs(ex.evaluate(e, one) - (a + c)) > 1e-12:
                raise ValidationError(f"transition ({s},{t}) is not affine in its parameter")
            parts.append((t, a, c, i))
        out.append(parts)
    return out


def parameter_states(skeleton: PMC) -> list[np.ndarray]:
    """States whose outgoing transitions reference each parameter."""
    hit: list[set] = [set() for _ in range(skeleton.n_params)]
    for s, row in enumerate(skeleton.transitions):
        for _, e in row:
            for i in e.params():
                hit[i].add(s)
    return [np.array(sorted(h), dtype=np.int64) for h in hit]


def _bound_pair(p: float, n_now: int, N: ex.Expr, beta: float, width_override: float | None):
    if width_override is not None:
        return (ex.const(min(max(p - width_override, CLIP), 1 - CLIP)),
                ex.const(min(max(p + width_override, CLIP), 1 - CLIP)))
    # which side of the clip a bound lies on is decided at the current N
    eps = eps_expr(N, beta)
    e_now = hoeffding_eps(n_now, beta)
    ph = ex._frac(float(p))
    if p - e_now < CLIP:
        lo = ex.const(CLIP)
    elif p - e_now > 1 - CLIP:
        lo = ex.const(1 - CLIP)
    else:
        lo = ex.add(ph, ex.mul(-1, eps))
    if p + e_now > 1 - CLIP:
        hi = ex.const(1 - CLIP)
    elif p + e_now < CLIP:
        hi = ex.const(CLIP)
    else:
        hi = ex.add(ph, eps)
    return lo, hi


def bound_exprs(state: LearnState, params: ParameterSet, width_override: float | None = None):
    """Per parameter (lower, upper) expressions in N_i, clipped at build time."""
    return [_bound_pair(p, state.N[i], params.par(params.names[i]), state.beta, width_override)
            for i, p in enumerate(state.p_hat)]


class LearningModelBuilder:
    """Builds the learning prMC for successive learn states.

    A step changes the counts of one parameter only, so bound expressions
    and polytopes of untouched parameters (and their cached symbolic
    derivatives) are reused from the previous model.
    """

    def __init__(self, skeleton: PMC, reward_sign: float = -1.0, width_override: float | None = None,
                 _parts=None):
        self.skeleton = skeleton
        self.reward_sign = reward_sign
        self.width_override = width_override
        self.parts = _parts if _parts is not None else _affine_parts(skeleton)
        self.params = ParameterSet(f"N_{n}" for n in skeleton.params.names)
        self._bounds: dict[int, tuple] = {}  # i -> (key, (lo, hi))
        self._polys: dict[int, tuple] = {}  # s -> (bound ids, polytope)
        self._affine: dict = {}
        self._memo: dict = {}

    def _bound(self, state: LearnState, i: int):
        key = (int(state.N[i]), int(state.successes[i]), state.beta)
        hit = self._bounds.get(i)
        if hit is None or hit[0] != key:
            pair = _bound_pair(state.successes[i] / state.N[i], state.N[i],
                               self.params.par(self.params.names[i]), state.beta, self.width_override)
            hit = (key, pair)
            self._bounds[i] = hit
        return hit[1]

    def _affine_expr(self, a, c, e):
        key = (a, c, id(e))
        hit = self._affine.get(key)
        if hit is None or hit[0] is not e:
            hit = (e, ex.add(ex._frac(a), ex.mul(ex._frac(c), e)))
            self._affine[key] = hit
        return hit[1]

    def build(self, state: LearnState) -> PRMC:
        sk = self.skeleton
        if state.N.size != sk.n_params:
            raise ValidationError("learn state does not match the skeleton's parameters")
        bounds = [self._bound(state, i) for i in range(sk.n_params)]
        polys = []
        for s, row in enumerate(self.parts):
            if sk.terminal[s]:
                polys.append(None)
                continue
            ids = tuple(id(bounds[i][0]) if i >= 0 else 0 for _, _, _, i in row)
            hit = self._polys.get(s)
            if hit is not None and hit[0] == ids:
                polys.append(hit[1])
                continue
            succ, lo_r, hi_r = [], [], []
            for t, a, c, i in row:
                succ.append(t)
                if i < 0:
                    q = ex.const(a)
                    lo_r.append(q)
                    hi_r.append(q)
                    continue
                lo_e, hi_e = bounds[i]
                if c >= 0:
                    lo_r.append(self._affine_expr(a, c, lo_e))
                    hi_r.append(self._affine_expr(a, c, hi_e))
                else:
                    lo_r.append(self._affine_expr(a, c, hi_e))
                    hi_r.append(self._affine_expr(a, c, lo_e))
            poly = ParametricPolytope.from_intervals(succ, lo_r, hi_r)
            poly.derivative_entries(self._memo)
            self._polys[s] = (ids, poly)
            polys.append(poly)
        return PRMC(self.params, sk.n_states, sk.initial, self.reward_sign * sk.rewards,
                    np.flatnonzero(sk.terminal), polys)


def build_learning_prmc(skeleton: PMC, state: LearnState, reward_sign: float = -1.0,
                        width_override: float | None = None, _parts=None) -> PRMC:
    """Interval prMC over sample-size parameters N_<name>.

    A transition a + c·v becomes the interval a + c·[g̲(N), ḡ(N)] (endpoints
    swapped when c < 0).  Rewards are multiplied by ``reward_sign``; the
    default −1 makes −sol_R an upper bound on the expected reward under a
    minimizing adversary.
    """
    return LearningModelBuilder(skeleton, reward_sign, width_override, _parts).build(state)


def expected_visits(mc: ConcreteMC) -> np.ndarray:
    """μ solving (I − P)ᵀ μ = s_I: expected visits before absorption."""
    n = mc.n_states
    M = (sp.identity(n, format="csr") - mc.P).tocsc()
    return Factorization(M).solve_transposed(np.asarray(mc.initial, dtype=float))


def choose_parameter(strategy: str, state: LearnState, rng: np.random.Generator | None = None,
                     model: PRMC | None = None, sol: RobustSolution | None = None,
                     param_states: list | None = None) -> int:
    """Index of the parameter to sample next under ``strategy``.

    "derivative" picks the most positive ∂sol_R/∂N_i of the negated-reward
    model, i.e. the steepest decrease of the upper bound; on a failed
    differentiability verdict it falls back to "interval".
    """
    return _choose(strategy, state, rng, model, sol, param_states)[0]


def _choose(strategy, state, rng, model, sol, param_states):
    if strategy == "interval":
        return int(np.argmax(state.eps())), False
    if strategy == "uniform":
        return int(rng.integers(state.N.size)), False
    if strategy == "derivative":
        try:
            res = topk_robust(model, state.N.astype(float), 1, "highest", sol=sol)
        except NotDifferentiable as exc:
            log.info("derivative strategy fell back to interval width (%s)", exc.verdict.reason)
            return int(np.argmax(state.eps())), True
        return int(res.selected[0]), False
    if strategy == "visits":
        if param_states is None:
            raise ValueError("visits strategy needs the states of each parameter")
        mu = expected_visits(sol.worst_case_mc())
        w = np.array([mu[st].sum() if st.size else 0.0 for st in param_states]) * state.eps()
        w = np.maximum(w, 0.0)
        if w.sum() <= 0:
            return int(np.argmax(state.eps())), False
        return int(rng.choice(w.size, p=w / w.sum())), False
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class LearningRun:
    strategy: str
    seed: int
    steps: list
    bounds: list
    chosen: list
    fallbacks: int
    true_solution: float
    state: LearnState

    @property
    def final_bound(self) -> float:
        return self.bounds[-1]

    def rows(self):
        for st, b, c in zip(self.steps, self.bounds, self.chosen):
            yield st, self.strategy, self.seed, b, c


def run_learning(skeleton: PMC, true_values, strategy: str, steps: int, batch: int = 25,
                 state0: LearnState | None = None, seed: int = 0, n0: int = 100, beta: float = 0.9,
                 warm_start: bool = True) -> LearningRun:
    """Iteratively sample one parameter per step and re-solve the robust bound.

    All randomness comes from ``np.random.default_rng(seed)``.  Trajectory
    entry 0 is the bound before any extra samples (chosen parameter −1).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    true_values = np.asarray(true_values, dtype=float)
    rng = np.random.default_rng(seed)
    state = state0 if state0 is not None else initial_state(true_values, rng, n0, beta, seed)
    state = LearnState(state.N, state.successes, state.beta, seed)
    true_sol = solve_mc(instantiate_pmc(skeleton, true_values)).sol
    builder = LearningModelBuilder(skeleton)
    pstates = parameter_states(skeleton)
    fallbacks = 0

    def solve(prev):
        model = builder.build(state)
        sol = robust_solve(model, state.N.astype(float), warm=prev if warm_start else None)
        return model, sol

    try:
        model, sol = solve(None)
    except Exception as exc:
        exc.step = 0
        raise
    out_steps, bounds, chosen = [0], [-sol.sol_R], [-1]
    state.trajectory.append((0, -sol.sol_R, -1))
    for step in range(1, steps + 1):
        try:
            i, fell_back = _choose(strategy, state, rng, model, sol, pstates)
            fallbacks += fell_back
            if batch > 0:
                k = int(rng.binomial(batch, true_values[i]))
                state.update(i, k, batch)
                model, sol = solve(sol)
        except Exception as exc:
            # solver errors carry the step they occurred in
            exc.step = step
            raise
        out_steps.append(step)
        bounds.append(-sol.sol_R)
        chosen.append(i)
        state.trajectory.append((step, -sol.sol_R, i))
    return LearningRun(strategy, seed, out_steps, bounds, chosen, fallbacks, true_sol, state)


def write_trajectory_csv(runs, fh, header: str | None = None) -> None:
    if header:
        for line in header.splitlines():
            fh.write(f"# {line}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["step", "strategy", "seed", "robust_bound", "chosen_parameter"])
    for run in runs:
        for st, strat, seed, b, c in run.rows():
            w.writerow([st, strat, seed, f"{b:.12g}", c])

"""Deterministic model generators: slippery grid worlds and random models.

Grid worlds live on a torus.  From each cell the vehicle moves right with
probability 1/2 and down with probability 1/2; on a cell of terrain t the
down move slips with probability v_t and then covers two cells.  The goal
cell is terminal and every step costs reward 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import expr as ex
from .expr import ParameterSet
from .learning import LearnState, build_learning_prmc
from .models import PMC, PRMC, ParametricPolytope

PARAM_BOX = (0.2, 0.8)
HALF = Fraction(1, 2)


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    n_terrains: int
    terrain_seed: int = 0
    n_lo: int = 500
    n_hi: int = 1000
    movement: str = "right-down-wrap"
    layout: str = "uniform"  # or "biased": 10 terrains on half of the cells
    start: tuple = (0, 0)
    goal: tuple | None = None
    slip_range: tuple = (0.05, 0.5)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise ValueError("grid needs at least two cells")
        if not 0 <= self.n_terrains <= self.rows * self.cols:
            raise ValueError("n_terrains must lie in [0, rows·cols]")
        if self.n_lo > self.n_hi or self.n_lo < 1:
            raise ValueError("need 1 ≤ n_lo ≤ n_hi")
        if self.movement != "right-down-wrap":
            raise ValueError(f"unknown movement rule {self.movement!r}")
        if self.layout not in ("uniform", "biased"):
            raise ValueError(f"unknown layout {self.layout!r}")

    @property
    def n_states(self) -> int:
        return self.rows * self.cols

    def cell(self, r: int, c: int) -> int:
        return (r % self.rows) * self.cols + (c % self.cols)

    @property
    def goal_cell(self) -> int:
        g = self.goal if self.goal is not None else (self.rows - 1, self.cols - 1)
        return self.cell(*g)

    @property
    def start_cell(self) -> int:
        return self.cell(*self.start)


def terrain_map(spec: GridSpec) -> np.ndarray:
    """Terrain index per cell (−1 for cells without slip)."""
    n = spec.n_states
    if spec.n_terrains == 0:
        return np.full(n, -1, dtype=np.int64)
    rng = np.random.default_rng(spec.terrain_seed)
    T = spec.n_terrains
    if spec.layout == "uniform" or T <= 10:
        tmap = rng.integers(T, size=n)
        # every terrain appears at least once when possible
        perm = rng.permutation(n)[:T]
        tmap[perm] = np.arange(T)
        return tmap.astype(np.int64)
    cells = rng.permutation(n)
    half = n // 2
    heavy = np.arange(10)[rng.integers(10, size=half)]
    light = 10 + rng.integers(T - 10, size=n - half)
    tmap = np.empty(n, dtype=np.int64)
    tmap[cells[:half]] = heavy
    tmap[cells[half:]] = light
    for group, lo, hi in ((cells[:half], 0, 10), (cells[half:], 10, T)):
        k = min(hi - lo, group.size)
        tmap[group[:k]] = np.arange(lo, lo + k)
    return tmap


def _grid_rows(spec: GridSpec, tmap, pars):
    rows = []
    goal = spec.goal_cell
    for s in range(spec.n_states):
        if s == goal:
            rows.append([])
            continue
        r, c = divmod(s, spec.cols)
        t = tmap[s]
        out: dict[int, ex.Expr] = {}

        def put(cell, e):
            out[cell] = ex.add(out[cell], e) if cell in out else e

        put(spec.cell(r, c + 1), ex.const(HALF))
        if t < 0:
            put(spec.cell(r + 1, c), ex.const(HALF))
        else:
            v = pars[t]
            put(spec.cell(r + 1, c), ex.mul(HALF, ex.add(1, ex.mul(-1, v))))
            put(spec.cell(r + 2, c), ex.mul(HALF, v))
        rows.append(sorted(out.items()))
    return rows


@dataclass
class GridInstance:
    spec: GridSpec
    model: object
    terrain: np.ndarray
    true_values: np.ndarray
    sample_sizes: np.ndarray
    successes: np.ndarray
    point: np.ndarray  # instantiation to analyse the model at
    extra: dict = field(default_factory=dict)

    @property
    def mle(self) -> np.ndarray:
        return self.successes / self.sample_sizes


def _samples(spec: GridSpec, seed: int):
    rng = np.random.default_rng(seed)
    T = spec.n_terrains
    lo, hi = spec.slip_range
    true = rng.uniform(lo, hi, size=T)
    N = rng.integers(spec.n_lo, spec.n_hi + 1, size=T)
    k = rng.binomial(N, true)
    return true, N, k


def grid_skeleton(spec: GridSpec, names=None) -> PMC:
    """The grid pMC with one slip parameter per terrain."""
    tmap = terrain_map(spec)
    params = ParameterSet(names or [f"v{t + 1}" for t in range(spec.n_terrains)])
    rows = _grid_rows(spec, tmap, params.pars())
    init = np.zeros(spec.n_states)
    init[spec.start_cell] = 1.0
    rew = np.ones(spec.n_states)
    rew[spec.goal_cell] = 0.0
    return PMC(params, spec.n_states, init, rew, [spec.goal_cell], rows)


def gridworld_pmc(spec: GridSpec, seed: int = 0) -> GridInstance:
    """Grid pMC plus true slips and MLEs from N_t ∈ [n_lo, n_hi] samples."""
    m = grid_skeleton(spec)
    true, N, k = _samples(spec, seed)
    mle = np.clip(k / N, 1e-6, 1 - 1e-6) if spec.n_terrains else np.zeros(0)
    return GridInstance(spec, m, terrain_map(spec), true, N, k, mle)


def gridworld_prmc(spec: GridSpec, seed: int = 0, beta: float = 0.9,
                   width_override: float | None = None) -> GridInstance:
    """Grid prMC with Hoeffding intervals whose parameters are the sample sizes.

    Rewards keep their sign, so sol_R is a lower bound on the expected steps.
    """
    skel = grid_skeleton(spec)
    true, N, k = _samples(spec, seed)
    state = LearnState(N, k, beta, seed)
    m = build_learning_prmc(skel, state, reward_sign=1.0, width_override=width_override)
    return GridInstance(spec, m, terrain_map(spec), true, N, k, N.astype(float), extra={"skeleton": skel})


def _rational_weights(rng, k: int, grain: int = 10**6) -> list[Fraction]:
    """k positive rationals summing to exactly 1, each ≥ 1/(4k)."""
    w = rng.dirichlet(np.ones(k))
    w = 0.25 / k + 0.75 * w
    q = [Fraction(int(round(x * grain)), grain) for x in w[:-1]]
    q.append(1 - sum(q))
    return q


def random_pmc(n_states: int, n_params: int, fanout: int, seed: int = 0) -> PMC:
    """Random pMC whose last state is terminal and s → s+1 always exists.

    Each state with at least two successors moves probability mass between
    two successors affinely in one randomly chosen parameter; every
    instantiation in PARAM_BOX^ℓ is graph preserving.
    """
    if fanout < 1:
        raise ValueError("fanout must be ≥ 1")
    if n_states < 2:
        raise ValueError("need at least two states")
    rng = np.random.default_rng(seed)
    params = ParameterSet([f"v{i + 1}" for i in range(n_params)])
    pars = params.pars()
    mid = Fraction(1, 2)
    rows = []
    for s in range(n_states - 1):
        k = min(fanout, n_states)
        others = [t for t in rng.permutation(n_states)[: k + 1].tolist() if t != s + 1][: k - 1]
        succ = [s + 1] + others
        w = _rational_weights(rng, len(succ))
        es = [ex.const(x) for x in w]
        if n_params and len(succ) >= 2:
            a, b = rng.choice(len(succ), size=2, replace=False)
            v = pars[int(rng.integers(n_params))]
            # |c|·0.3 ≤ min(w_a, w_b)/2 keeps both entries in (0,1)
            cmax = min(w[a], w[b]) / Fraction(6, 10)
            c = cmax * Fraction(int(rng.integers(100, 1000)), 1000) * (1 if rng.random() < 0.5 else -1)
            shift = ex.mul(c, ex.add(v, -mid))
            es[a] = ex.add(es[a], shift)
            es[b] = ex.add(es[b], ex.mul(-1, shift))
        rows.append(list(zip(succ, es)))
    rows.append([])
    init = np.zeros(n_states)
    init[0] = 1.0
    rew = np.round(rng.uniform(0.0, 1.0, n_states), 6)
    rew[-1] = 0.0
    return PMC(params, n_states, init, rew, [n_states - 1], rows)


def random_point(m, seed: int = 0, box=PARAM_BOX) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(box[0], box[1], size=m.n_params)


def random_interval_prmc(n_states: int, n_params: int, fanout: int, seed: int = 0) -> PRMC:
    """Random interval prMC with parametric widths.

    Bounds are w_j − c_j·v and w_j + d_j·v' around a base distribution w;
    lower bounds stay ≥ w_j/2 on PARAM_BOX so every adversary reaches the
    terminal state.  Rewards are generic, so ties in the inner problems are
    unlikely.
    """
    if fanout < 2:
        raise ValueError("interval prMCs need fanout ≥ 2")
    rng = np.random.default_rng(seed)
    params = ParameterSet([f"v{i + 1}" for i in range(n_params)])
    pars = params.pars()
    polys = []
    for s in range(n_states - 1):
        k = min(fanout, n_states)
        others = [t for t in rng.permutation(n_states)[: k + 1].tolist() if t != s + 1][: k - 1]
        succ = [s + 1] + others
        w = _rational_weights(rng, len(succ))
        lo, hi = [], []
        for j, wj in enumerate(w):
            a = wj / 2 * Fraction(int(rng.integers(100, 1000)), 1000) / Fraction(8, 10)
            b = wj / 2 * Fraction(int(rng.integers(100, 1000)), 1000) / Fraction(8, 10)
            if n_params:
                va = pars[int(rng.integers(n_params))]
                vb = pars[int(rng.integers(n_params))]
                lo.append(ex.add(wj, ex.mul(-a, va)))
                hi.append(ex.add(wj, ex.mul(b, vb)))
            else:
                lo.append(ex.const(wj - a / 2))
                hi.append(ex.const(wj + b / 2))
        polys.append(ParametricPolytope.from_intervals(succ, lo, hi))
    polys.append(None)
    init = np.zeros(n_states)
    init[0] = 1.0
    rew = np.round(rng.uniform(0.5, 1.5, n_states), 6)
    rew[-1] = 0.0
    return PRMC(params, n_states, init, rew, [n_states - 1], polys)

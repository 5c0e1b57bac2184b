"""Online budget allocation over a stream of questions.

A :class:`GridModel` buckets questions into K difficulty grids, each with a
prior mass and a prototype self-consistency curve (an exact binary ``theta``
or a probit surrogate).  :func:`greedy_allocate` solves the grid-level
problem

    maximise  sum_j p_j * SC_j(B_j)   s.t.  sum_j p_j * B_j <= avg_budget

by repeatedly taking the step with the best gain per unit of expected cost,
and :func:`stream_step` re-plans that problem with the remaining budget per
remaining question before each arrival.

Budgets produced here are *additional* traces on top of ``GridModel.offset``
traces already spent (the warm-up used to assign a grid).
"""

from __future__ import annotations

import bisect
import heapq
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp, ndtri

from .core import (
    lattice_size,
    log_marginal_gain_binary,
    sc_exact_binary,
    sc_multinomial,
)
from .errors import CapacityError, ContractError, StreamExhaustedError, UnfittableCurveError
from .surrogate import (
    CLIP,
    DEFAULT_K_MIN,
    SurrogateParams,
    fit_probit,
    log_surrogate_step,
    surrogate_sc,
)

MODEL_FORMAT = "scbudget.grid-model"
MODEL_VERSION = 1
COST_EPS = 1e-9

Prototype = Union[float, SurrogateParams]


# ---------------------------------------------------------------------------
# prototypes


def prototype_sc(proto: Prototype, n: int) -> float:
    if isinstance(proto, SurrogateParams):
        return surrogate_sc(proto, n)
    return sc_exact_binary(proto, n)


def prototype_log_step(proto: Prototype, n_from: int, n_to: int) -> float:
    """log(SC(n_to) - SC(n_from)), finite far beyond double underflow."""
    if isinstance(proto, SurrogateParams):
        return log_surrogate_step(proto, n_from, n_to)
    logs = [log_marginal_gain_binary(proto, k) for k in range(n_from, n_to) if k % 2 == 0]
    logs = [x for x in logs if x > -math.inf]
    if not logs:
        return -math.inf
    if len(logs) == 1:
        return logs[0]
    return float(logsumexp(logs))


def _check_prototype(proto):
    if isinstance(proto, SurrogateParams):
        return proto
    theta = float(proto)
    if not 0.0 <= theta <= 1.0:
        raise ContractError(f"binary prototype must lie in [0,1], got {proto}")
    return theta


# ---------------------------------------------------------------------------
# grid model and greedy schedule


class _Schedule:
    """Greedy step sequence for one model and budget cap, extended lazily."""

    def __init__(self, model: "GridModel", cap: Optional[int]):
        self.model = model
        self.cap = cap
        K = model.K
        self.current = [0] * K
        self.grid_seq: list = []
        self.size_seq: list = []
        self.cum_cost: list = []
        self.budgets: list = []
        self.heap: list = []
        for j in range(K):
            self._push(j)

    def _next_size(self, j):
        B = self.current[j]
        size = 1 if B == 0 else 2
        if self.cap is not None and B + size > self.cap:
            # an even cap is still reachable with one final single trace
            size = self.cap - B
        return size if size > 0 else 0

    def _push(self, j):
        if self.model.masses[j] <= 0:
            return
        size = self._next_size(j)
        if size == 0:
            return
        off = self.model.offset
        B = self.current[j]
        lg = prototype_log_step(self.model.prototypes[j], off + B, off + B + size)
        if lg == -math.inf:
            return
        heapq.heappush(self.heap, (-(lg - math.log(size)), j, size))

    def extend_past(self, capacity: float):
        while self.heap and (not self.cum_cost or self.cum_cost[-1] <= capacity + COST_EPS):
            _, j, size = heapq.heappop(self.heap)
            prev = self.cum_cost[-1] if self.cum_cost else 0.0
            self.current[j] += size
            self.grid_seq.append(j)
            self.size_seq.append(size)
            self.cum_cost.append(prev + self.model.masses[j] * size)
            self.budgets.append(tuple(self.current))
            self._push(j)


@dataclass(frozen=True)
class GridModel:
    prototypes: tuple
    masses: tuple
    offset: int = 0
    metadata: dict = field(default_factory=dict, compare=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        protos = tuple(_check_prototype(p) for p in self.prototypes)
        masses = tuple(float(m) for m in self.masses)
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "masses", masses)
        if len(protos) < 1 or len(protos) != len(masses):
            raise ContractError("need K >= 1 prototypes and one mass per grid")
        if any(m < 0 or not math.isfinite(m) for m in masses) or abs(sum(masses) - 1) > 1e-9:
            raise ContractError(f"masses must be nonnegative and sum to 1, got {masses}")
        if self.offset < 0 or int(self.offset) != self.offset:
            raise ContractError("offset must be a nonnegative integer")

    @property
    def K(self) -> int:
        return len(self.prototypes)

    def schedule(self, cap: Optional[int]) -> _Schedule:
        if cap not in self._cache:
            self._cache[cap] = _Schedule(self, cap)
        return self._cache[cap]

    def objective(self, budgets: Sequence[int]) -> float:
        return math.fsum(p * prototype_sc(t, self.offset + int(b))
                         for p, t, b in zip(self.masses, self.prototypes, budgets))

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        protos = []
        for p in self.prototypes:
            if isinstance(p, SurrogateParams):
                protos.append({"kind": "surrogate", **p.to_dict()})
            else:
                protos.append({"kind": "binary", "theta": p})
        return {"format": MODEL_FORMAT, "version": MODEL_VERSION, "offset": self.offset,
                "masses": list(self.masses), "prototypes": protos, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, doc: dict) -> "GridModel":
        if doc.get("format") != MODEL_FORMAT:
            raise ContractError("not a grid-model document")
        if doc.get("version") != MODEL_VERSION:
            raise ContractError(f"unsupported grid-model version {doc.get('version')}")
        protos = []
        for p in doc["prototypes"]:
            if p["kind"] == "surrogate":
                protos.append(SurrogateParams(p["a"], p["b"], p["k_min"]))
            elif p["kind"] == "binary":
                protos.append(p["theta"])
            else:
                raise ContractError(f"unknown prototype kind {p['kind']!r}")
        return cls(tuple(protos), tuple(doc["masses"]), doc.get("offset", 0), doc.get("metadata", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "GridModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class AllocationPlan:
    """Per-grid additional budgets.

    ``next_grid``/``next_step`` describe the first greedy step that did not
    fit and ``residual`` the unspent capacity; randomized rounding uses them.
    """

    budgets: tuple
    expected_cost: float
    masses: tuple
    next_grid: Optional[int] = None
    next_step: int = 0
    residual: float = 0.0


def greedy_allocate(model: GridModel, avg_budget: float,
                    max_budget: Optional[int] = None) -> AllocationPlan:
    """Greedy per-unit-cost allocation, stopping at the first step that does not fit.

    The first trace of a grid costs ``p_j`` and gains ``SC(1) - SC(0)``;
    later steps add two traces (cost ``2 p_j``) so that budgets stay odd.
    ``max_budget`` caps each grid's additional budget; an even cap is reached
    through a final single-trace step.  Ties go to the lowest grid index.
    """
    if not avg_budget >= 0:
        raise ContractError("avg_budget must be nonnegative")
    if max_budget is not None and max_budget < 0:
        raise ContractError("max_budget must be nonnegative")
    sched = model.schedule(max_budget)
    sched.extend_past(avg_budget)
    idx = bisect.bisect_right(sched.cum_cost, avg_budget + COST_EPS)
    if idx == 0:
        budgets = (0,) * model.K
        cost = 0.0
    else:
        budgets = sched.budgets[idx - 1]
        cost = sched.cum_cost[idx - 1]
    if idx < len(sched.grid_seq):
        nxt, step = sched.grid_seq[idx], sched.size_seq[idx]
    else:
        nxt, step = None, 0
    return AllocationPlan(budgets, cost, model.masses, nxt, step, max(avg_budget - cost, 0.0))


def brute_force_allocate(model: GridModel, avg_budget: float, max_b: int) -> AllocationPlan:
    """Exhaustive search over budgets in {0, 1, 3, ..., <= max_b}.

    Among optimal plans the lexicographically smallest is returned.
    """
    if model.K > 5 or max_b > 21:
        raise CapacityError(f"enumeration limited to K <= 5 and max_b <= 21 (got {model.K}, {max_b})")
    if not avg_budget >= 0:
        raise ContractError("avg_budget must be nonnegative")
    options = np.array([0] + list(range(1, max_b + 1, 2)))
    p = np.array(model.masses)
    vals = np.array([[prototype_sc(t, model.offset + int(o)) for o in options] for t in model.prototypes])
    grids = np.meshgrid(*([np.arange(len(options))] * model.K), indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)  # lexicographic order
    cost = (options[idx] * p).sum(axis=1)
    value = (vals[np.arange(model.K), idx] * p).sum(axis=1)
    value[cost > avg_budget + COST_EPS] = -np.inf
    best = value.max()
    pick = int(np.argmax(value >= best - 1e-12))
    budgets = tuple(int(b) for b in options[idx[pick]])
    c = float(cost[pick])
    return AllocationPlan(budgets, c, model.masses, None, 0, max(avg_budget - c, 0.0))


def randomized_round(plan: AllocationPlan, residual: float, best_grid: int, seed) -> AllocationPlan:
    """Take one more step on ``best_grid`` with probability residual / step cost.

    The step is the plan's pending step when ``best_grid`` is its
    ``next_grid``; otherwise one trace from zero or two traces after that.
    In expectation the rounded plan spends exactly ``expected_cost + residual``.
    """
    if best_grid == plan.next_grid and plan.next_step > 0:
        size = plan.next_step
    else:
        size = 1 if plan.budgets[best_grid] == 0 else 2
    step_cost = plan.masses[best_grid] * size
    if not 0 < residual < step_cost:
        raise ContractError(f"residual must lie in (0, {step_cost}), got {residual}")
    rng = np.random.default_rng(seed)
    if rng.random() >= residual / step_cost:
        return replace(plan, next_grid=None, next_step=0, residual=0.0)
    budgets = list(plan.budgets)
    budgets[best_grid] += size
    return AllocationPlan(tuple(budgets), plan.expected_cost + step_cost, plan.masses)


# ---------------------------------------------------------------------------
# streaming


@dataclass(frozen=True)
class StreamState:
    remaining_budget: float
    remaining_horizon: int
    seed: int = 0
    t: int = 0

    def __post_init__(self):
        if self.remaining_budget < 0:
            raise ContractError("remaining budget must be nonnegative")
        if self.remaining_horizon < 0:
            raise ContractError("remaining horizon must be nonnegative")

    @classmethod
    def start(cls, total_budget: float, n_questions: int, seed: int = 0) -> "StreamState":
        return cls(float(total_budget), int(n_questions), seed, 0)


def stream_step(state: StreamState, model: GridModel, grid: int, randomize: bool = True,
                max_budget: Optional[int] = None, rng=None):
    """Budget for the current question and the state after paying for it.

    The plan is recomputed at capacity ``R / H - offset``.  The returned
    budget includes the model's offset and never exceeds ``floor(R)``.
    ``max_budget`` caps the additional budget per grid.  Rounding draws from
    ``rng`` when given, else from a generator seeded by ``(seed, t)``.
    """
    if state.remaining_horizon < 1:
        raise StreamExhaustedError("no questions left in the stream")
    R = state.remaining_budget
    capacity = max(R / state.remaining_horizon - model.offset, 0.0)
    plan = greedy_allocate(model, capacity, max_budget)
    if randomize and plan.next_grid is not None and plan.residual > COST_EPS:
        plan = randomized_round(plan, plan.residual, plan.next_grid,
                                rng if rng is not None else [state.seed, state.t])
    b = min(model.offset + plan.budgets[grid], math.floor(R + COST_EPS))
    b = max(int(b), 0)
    nxt = StreamState(max(R - b, 0.0), state.remaining_horizon - 1, state.seed, state.t + 1)
    return b, nxt


# ---------------------------------------------------------------------------
# warm-up gridding

WARMUP_SIZE = 4
PATTERNS = ((4, 0, 0, 0), (3, 1, 0, 0), (2, 2, 0, 0), (2, 1, 1, 0), (1, 1, 1, 1))
N_WARMUP_GRIDS = len(PATTERNS)


@dataclass(frozen=True)
class WarmupPattern:
    sorted_counts: tuple
    grid_id: int


def warmup_pattern(answers: Sequence[Any]) -> WarmupPattern:
    """Grid (1..5) of a question from its first four answers."""
    if len(answers) != WARMUP_SIZE:
        raise ContractError(f"need exactly {WARMUP_SIZE} answers, got {len(answers)}")
    counts = sorted(Counter(answers).values(), reverse=True)
    counts = tuple(counts + [0] * (WARMUP_SIZE - len(counts)))
    return WarmupPattern(counts, PATTERNS.index(counts) + 1)


def warmup_grids(codes) -> np.ndarray:
    """Vectorised :func:`warmup_pattern`: rows of 4 integer codes -> grid ids 1..5."""
    s = np.sort(np.asarray(codes), axis=1)
    eq = s[:, 1:] == s[:, :-1]
    distinct = WARMUP_SIZE - eq.sum(axis=1)
    grid = np.select([distinct == 1, distinct == 3, distinct == 4], [1, 4, 5], default=2)
    two_pairs = (distinct == 2) & eq[:, 0] & ~eq[:, 1] & eq[:, 2]
    grid[two_pairs] = 3
    return grid


def _encode(answers) -> np.ndarray:
    _, inv = np.unique(np.asarray(answers, dtype=object).astype(str), return_inverse=True)
    return inv.ravel()


def _subsets_of_four(rng, n, repeats):
    """``repeats`` uniform 4-subsets of range(n), one per row."""
    if n <= 64:
        return np.argpartition(rng.random((repeats, n)), WARMUP_SIZE - 1, axis=1)[:, :WARMUP_SIZE]
    # large pools: draw with replacement and redraw rows that repeat an index
    out = rng.integers(0, n, size=(repeats, WARMUP_SIZE))
    while True:
        s = np.sort(out, axis=1)
        bad = np.flatnonzero((s[:, 1:] == s[:, :-1]).any(axis=1))
        if bad.size == 0:
            return out
        out[bad] = rng.integers(0, n, size=(bad.size, WARMUP_SIZE))


@dataclass(frozen=True)
class GridPriors:
    soft: np.ndarray  # (N, 5) per-question grid frequencies
    masses: np.ndarray  # (5,)


def estimate_grid_priors(training_pools: Sequence[Sequence[Any]], repeats: int, seed: int) -> GridPriors:
    """Soft grid memberships from ``repeats`` random 4-subsamples per question."""
    if len(training_pools) == 0:
        raise ContractError("empty training set")
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    children = np.random.SeedSequence(seed).spawn(len(training_pools))
    soft = np.zeros((len(training_pools), N_WARMUP_GRIDS))
    for q, (pool, ss) in enumerate(zip(training_pools, children)):
        codes = _encode(pool)
        n = codes.size
        if n == 0:
            raise ContractError(f"question {q} has an empty pool")
        rng = np.random.default_rng(ss)
        if n < WARMUP_SIZE:
            picks = rng.integers(0, n, size=(repeats, WARMUP_SIZE))
        else:
            picks = _subsets_of_four(rng, n, repeats)
        grids = warmup_grids(codes[picks])
        soft[q] = np.bincount(grids - 1, minlength=N_WARMUP_GRIDS) / repeats
    return GridPriors(soft, soft.mean(axis=0))


SATURATED_SLOPE = float(ndtri(1 - CLIP))
FLAT_SLOPE = 1e-3
DEFAULT_PROTOTYPE = SurrogateParams(0.5, 0.0, DEFAULT_K_MIN)


def empirical_sc_curve(answers, n_max: int = 63, mc_samples: int = 20_000, seed: int = 0,
                       exact_limit: int = 100_000):
    """Odd-budget SC curve of the plug-in answer distribution of one pool."""
    codes = _encode(answers)
    theta = np.bincount(codes) / codes.size
    budgets = list(range(1, n_max + 1, 2))
    if theta.size == 1:
        return [(n, 1.0) for n in budgets]
    if theta.size == 2:
        return [(n, sc_exact_binary(float(theta[0]), n)) for n in budgets]
    out = []
    for n in budgets:
        if lattice_size(n, theta.size) <= exact_limit:
            v = sc_multinomial(theta, n).value
        else:
            v = sc_multinomial(theta, n, mode="monte-carlo", samples=mc_samples, seed=seed + n).value
        out.append((n, v))
    return out


@dataclass
class GridFit:
    params: list
    defaulted: list  # grids that fell back to the default prototype
    question_params: np.ndarray  # (N, 2) per-question (a, b)
    question_status: list  # "fit", "saturated" or "flat"
    fit_errors: np.ndarray


def fit_question(answers, k_min: int = DEFAULT_K_MIN, n_max: int = 63, seed: int = 0):
    """Per-question probit fit with fallbacks for saturated and flat curves."""
    curve = empirical_sc_curve(answers, n_max=n_max, seed=seed)
    if all(v >= 1 - CLIP for _, v in curve):
        return (SATURATED_SLOPE, 0.0), "saturated", 0.0
    try:
        fit = fit_probit(curve, k_min)
    except UnfittableCurveError:
        return (FLAT_SLOPE, 0.0), "flat", float("nan")
    return (fit.params.a, fit.params.b), "fit", fit.max_abs_error


def fit_grid_surrogates(training_pools, soft_weights, k_min: int = DEFAULT_K_MIN,
                        default: SurrogateParams = DEFAULT_PROTOTYPE, n_max: int = 63,
                        seed: int = 0) -> GridFit:
    """Grid surrogates as soft-weighted means of per-question ``(a, b)`` fits."""
    W = np.asarray(soft_weights, dtype=float)
    if W.ndim != 2 or W.shape[0] != len(training_pools):
        raise ContractError("soft_weights must be an (N, K) array matching the pools")
    qp = np.zeros((len(training_pools), 2))
    status, errs = [], []
    for q, pool in enumerate(training_pools):
        ab, st, err = fit_question(pool, k_min, n_max, seed + q)
        qp[q] = ab
        status.append(st)
        errs.append(err)
    params, defaulted = [], []
    for j in range(W.shape[1]):
        w = W[:, j]
        if w.sum() <= 0:
            params.append(replace(default, k_min=k_min))
            defaulted.append(j)
            continue
        a, b = (w[:, None] * qp).sum(axis=0) / w.sum()
        params.append(SurrogateParams(float(a), float(b), k_min))
    return GridFit(params, defaulted, qp, status, np.array(errs))


def train_grid_model(training_pools, repeats: int = 1000, seed: int = 0,
                     k_min: int = DEFAULT_K_MIN, provenance: Optional[dict] = None) -> GridModel:
    """Warm-up grid priors plus per-grid surrogates, ready for streaming."""
    priors = estimate_grid_priors(training_pools, repeats, seed)
    fit = fit_grid_surrogates(training_pools, priors.soft, k_min=k_min, seed=seed)
    meta = {
        "defaulted_grids": fit.defaulted,
        "question_status": dict(Counter(fit.question_status)),
        "max_fit_error": float(np.nanmax(fit.fit_errors)) if np.isfinite(fit.fit_errors).any() else None,
        "n_questions": len(training_pools),
        "repeats": repeats,
        "seed": seed,
    }
    if provenance:
        meta["provenance"] = provenance
    masses = priors.masses / priors.masses.sum()
    return GridModel(tuple(fit.params), tuple(float(m) for m in masses), WARMUP_SIZE, meta)


def binary_grid_model(thetas: Sequence[float], n_bins: int = 10) -> tuple:
    """Equal-width bins of ``max(theta, 1 - theta)`` over [1/2, 1].

    Returns the model (prototype = mean folded theta of the bin, mass = bin
    share) and each question's bin index.
    """
    folded = np.maximum(np.asarray(thetas, float), 1 - np.asarray(thetas, float))
    if folded.size == 0:
        raise ContractError("no questions to bin")
    edges = np.linspace(0.5, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, folded, side="right") - 1, 0, n_bins - 1)
    used = np.unique(idx)
    remap = {int(b): k for k, b in enumerate(used)}
    protos = tuple(float(folded[idx == b].mean()) for b in used)
    masses = tuple(float((idx == b).mean()) for b in used)
    return GridModel(protos, masses, 0, {"bins": n_bins}), np.array([remap[int(b)] for b in idx])

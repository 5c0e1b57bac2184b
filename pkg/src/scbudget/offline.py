"""Offline Bayesian allocation with the optimistic knowledge gradient.

Each question carries a Dirichlet belief over its answer distribution and,
per answer class, a Normal belief over the mean confidence of traces giving
that answer (unit observation variance).  The allocator repeatedly samples
the question whose best hypothetical one-trace update raises its terminal
utility the most; the utility of a question is the posterior probability of
its most likely population-majority label.

For binary questions without confidence weighting every quantity is a Beta
tail and is computed exactly (in log space for the gains, which underflow
after a few thousand traces).  Everything else uses Monte Carlo with common
random numbers across the hypothetical updates of one question.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, IO, Optional, Sequence

import numpy as np
from scipy.special import betainc

from .errors import BudgetExhaustedError, ContractError, TraceSourceError

DEFAULT_N_MC = 4000
DEFAULT_ALPHA0 = 1.0
DEFAULT_BETA0 = 1.0
DEFAULT_V0 = 1.0
LN2 = math.log(2.0)


@dataclass(frozen=True)
class QuestionBelief:
    alpha: tuple
    beta: tuple
    v: tuple
    n_obs: int = 0

    def __post_init__(self):
        if not (len(self.alpha) == len(self.beta) == len(self.v) >= 2):
            raise ContractError("alpha, beta and v must share a length M >= 2")
        if any(not a > 0 for a in self.alpha):
            raise ContractError("Dirichlet pseudo-counts must be positive")
        if any(not x > 0 for x in self.v):
            raise ContractError("variances must be positive")

    @classmethod
    def prior(cls, M: int, alpha0=DEFAULT_ALPHA0, beta0=DEFAULT_BETA0, v0=DEFAULT_V0) -> "QuestionBelief":
        return cls((float(alpha0),) * M, (float(beta0),) * M, (float(v0),) * M)

    @property
    def M(self) -> int:
        return len(self.alpha)

    def to_dict(self) -> dict:
        return {"alpha": list(self.alpha), "beta": list(self.beta), "v": list(self.v), "n_obs": self.n_obs}


@dataclass
class BeliefState:
    beliefs: list
    spent: int
    H: int

    def __post_init__(self):
        if self.spent > self.H:
            raise ContractError("spent exceeds the horizon")


def update_belief(b: QuestionBelief, y: int, c: float) -> QuestionBelief:
    """Conjugate update for one trace with answer ``y`` and confidence ``c``."""
    if not 0 <= y < b.M:
        raise ContractError(f"answer index {y} out of range for M={b.M}")
    if not math.isfinite(c):
        raise ContractError("confidence must be finite")
    alpha, beta, v = list(b.alpha), list(b.beta), list(b.v)
    alpha[y] = alpha[y] + 1.0
    v_new = 1.0 / (1.0 / v[y] + 1.0)
    beta[y] = v_new * (beta[y] / v[y] + c)
    v[y] = v_new
    return QuestionBelief(tuple(alpha), tuple(beta), tuple(v), b.n_obs + 1)


def _exact_path(b: QuestionBelief, weighted: bool) -> bool:
    return b.M == 2 and not weighted


def _binary_class0_prob(a0: float, a1: float) -> float:
    # P(theta_0 > 1/2) for theta_0 ~ Beta(a0, a1)
    return float(betainc(a1, a0, 0.5))


def _mc_majority(alpha, beta, v, weighted: bool, n_mc: int, rng) -> np.ndarray:
    theta = rng.dirichlet(np.asarray(alpha, float), size=n_mc)
    if weighted:
        mu = rng.normal(np.asarray(beta, float), np.sqrt(np.asarray(v, float)), size=(n_mc, len(alpha)))
        theta = theta * mu
    winners = np.argmax(theta, axis=1)
    return np.bincount(winners, minlength=len(alpha)) / n_mc


def posterior_majority_prob(b: QuestionBelief, weighted: bool = False, n_mc: int = DEFAULT_N_MC,
                            seed=0, method: str = "auto") -> np.ndarray:
    """Posterior probability that each class is the population majority label.

    ``method="auto"`` is exact for binary unweighted beliefs and Monte Carlo
    otherwise; ``method="mc"`` forces sampling.  Weighted mode ranks classes
    by ``theta_m * mu_m``.
    """
    if n_mc < 1:
        raise ContractError("n_mc must be >= 1")
    if method not in ("auto", "mc"):
        raise ContractError(f"unknown method {method!r}")
    if method == "auto" and _exact_path(b, weighted):
        p0 = _binary_class0_prob(*b.alpha)
        return np.array([p0, 1.0 - p0])
    return _mc_majority(b.alpha, b.beta, b.v, weighted, n_mc, np.random.default_rng(seed))


def utility(b: QuestionBelief, weighted: bool = False, n_mc: int = DEFAULT_N_MC, seed=0,
            method: str = "auto") -> float:
    return float(np.max(posterior_majority_prob(b, weighted, n_mc, seed, method)))


def log_binary_gain(a0: float, a1: float) -> float:
    """log of the optimistic gain for a binary unweighted belief.

    Reinforcing the leading class is the best hypothetical update, and its
    gain is ``2^-(a+b) / (a * B(a, b))`` with ``a`` the larger count.  Valid
    for real pseudo-counts.
    """
    hi, lo = max(a0, a1), min(a0, a1)
    log_beta = math.lgamma(hi) + math.lgamma(lo) - math.lgamma(hi + lo)
    return -(hi + lo) * LN2 - math.log(hi) - log_beta


def okg_gain(b: QuestionBelief, weighted: bool = False, n_mc: int = DEFAULT_N_MC, seed=0,
             method: str = "auto") -> float:
    """Best utility change over hypothetical single-trace updates.

    Each hypothetical trace of class ``m`` carries confidence ``beta_m``.  The
    raw difference is returned, so Monte Carlo noise can make it negative.
    """
    if method == "auto" and _exact_path(b, weighted):
        return math.exp(log_binary_gain(*b.alpha))
    # the same seed for every evaluation gives common random numbers
    base = utility(b, weighted, n_mc, seed, "mc")
    best = -math.inf
    for m in range(b.M):
        u = utility(update_belief(b, m, b.beta[m]), weighted, n_mc, seed, "mc")
        best = max(best, u - base)
    return best


def okg_key(b: QuestionBelief, weighted: bool = False, n_mc: int = DEFAULT_N_MC, seed=0) -> tuple:
    """Order-preserving selection key for the gain.

    ``(1, log gain)`` for positive gains and ``(0, gain)`` otherwise, so
    exact log-space gains and Monte Carlo gains compare correctly.
    """
    if _exact_path(b, weighted):
        return (1, log_binary_gain(*b.alpha))
    g = okg_gain(b, weighted, n_mc, seed)
    return (1, math.log(g)) if g > 0 else (0, g)


def question_seed(seed: int, q: int, n_obs: int) -> list:
    """Seed for the gain of question ``q`` after ``n_obs`` observations."""
    return [int(seed), int(q), int(n_obs)]


def okg_select(state: BeliefState, weighted: bool = False, n_mc: int = DEFAULT_N_MC, seed: int = 0) -> int:
    """Index of the question with the largest optimistic gain (lowest index on ties)."""
    if state.spent >= state.H:
        raise BudgetExhaustedError(f"budget of {state.H} traces is spent")
    keys = [okg_key(b, weighted, n_mc, question_seed(seed, q, b.n_obs)) for q, b in enumerate(state.beliefs)]
    best = max(keys)
    return keys.index(best)


def bayes_answer(b: QuestionBelief, weighted: bool = False, n_mc: int = DEFAULT_N_MC, seed=0) -> int:
    """Terminal decision: the class most likely to be the population majority."""
    return int(np.argmax(posterior_majority_prob(b, weighted, n_mc, seed)))


# ---------------------------------------------------------------------------
# allocation loop

TraceSource = Callable[[int, int], tuple]


class OKGRunner:
    """Step-by-step OKG allocation over a fixed question set.

    ``source(q, k)`` returns the ``k``-th trace ``(answer_index, confidence)``
    of question ``q``.  ``capacity`` optionally bounds how many traces each
    question can supply; exhausted questions are never selected.  Gains are
    cached per question and recomputed only after that question changes,
    with seeds derived from (seed, question, observation count), so the
    sequence is identical to recomputing every gain every step.
    """

    def __init__(self, priors: Sequence[QuestionBelief], source: TraceSource, weighted: bool = False,
                 n_mc: int = DEFAULT_N_MC, seed: int = 0, capacity: Optional[Sequence[int]] = None,
                 max_retries: int = 3, log: Optional[IO[str]] = None, log_all_gains: bool = False):
        if len(priors) == 0:
            raise ContractError("need at least one question")
        self.beliefs = list(priors)
        self.source = source
        self.weighted = weighted
        self.n_mc = n_mc
        self.seed = seed
        self.capacity = None if capacity is None else list(capacity)
        self.max_retries = max_retries
        self.log = log
        self.log_all_gains = log_all_gains
        N = len(self.beliefs)
        self.counts = [0] * N
        self.spent = 0
        self.pos = np.zeros(N, dtype=bool)
        self.val = np.full(N, -np.inf)
        for q in range(N):
            self._rescore(q)

    def _rescore(self, q):
        if self.capacity is not None and self.counts[q] >= self.capacity[q]:
            self.pos[q], self.val[q] = False, -np.inf
            return
        b = self.beliefs[q]
        flag, v = okg_key(b, self.weighted, self.n_mc, question_seed(self.seed, q, b.n_obs))
        self.pos[q], self.val[q] = bool(flag), v

    @property
    def exhausted(self) -> bool:
        return not np.isfinite(self.val).any()

    def select(self) -> int:
        if self.pos.any():
            return int(np.argmax(np.where(self.pos, self.val, -np.inf)))
        if self.exhausted:
            raise BudgetExhaustedError("every question has used its trace capacity")
        return int(np.argmax(self.val))

    def step(self) -> tuple:
        q = self.select()
        for attempt in range(self.max_retries + 1):
            try:
                y, c = self.source(q, self.counts[q])
                break
            except TraceSourceError:
                if attempt == self.max_retries:
                    raise
        y, c = int(y), float(c)
        gain = (bool(self.pos[q]), float(self.val[q]))
        self.beliefs[q] = update_belief(self.beliefs[q], y, c)
        self.counts[q] += 1
        self.spent += 1
        if self.log is not None:
            rec = {"step": self.spent, "question": q, "key": list(gain), "answer": y,
                   "confidence": c, "belief": self.beliefs[q].to_dict()}
            if self.log_all_gains:
                rec["keys"] = [[bool(p), float(v)] for p, v in zip(self.pos, self.val)]
            self.log.write(json.dumps(rec) + "\n")
        self._rescore(q)
        return q, y, c


@dataclass
class OfflineResult:
    state: BeliefState
    answers: list
    counts: list
    posteriors: list = field(default_factory=list)


def run_offline(priors: Sequence[QuestionBelief], source: TraceSource, H: int, weighted: bool = False,
                n_mc: int = DEFAULT_N_MC, seed: int = 0, capacity: Optional[Sequence[int]] = None,
                max_retries: int = 3, log: Optional[IO[str]] = None) -> OfflineResult:
    """Spend exactly ``H`` traces by OKG, then take the Bayes decision per question.

    A source raising :class:`TraceSourceError` is retried up to
    ``max_retries`` times per step; failed attempts are not counted.
    """
    if H < 1:
        raise ContractError("H must be >= 1")
    if capacity is not None and sum(capacity) < H:
        raise ContractError(f"trace capacity {sum(capacity)} is below the budget {H}")
    runner = OKGRunner(priors, source, weighted, n_mc, seed, capacity, max_retries, log)
    for _ in range(H):
        runner.step()
    state = BeliefState(runner.beliefs, runner.spent, H)
    posts, answers = [], []
    for q, b in enumerate(runner.beliefs):
        p = posterior_majority_prob(b, weighted, n_mc, question_seed(seed, q, b.n_obs))
        posts.append(p)
        answers.append(int(np.argmax(p)))
    return OfflineResult(state, answers, list(runner.counts), posts)

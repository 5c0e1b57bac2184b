"""Exact probability kernels for majority-vote self-consistency.

The self-consistency rate of a question is the probability that a vote over
``B`` i.i.d. traces lands on the population majority answer ``argmax(theta)``.
This module provides the vote rules themselves, the binary closed forms
(with their per-trace marginal gains), an enumeration/Monte-Carlo estimator
for multi-choice questions, and the Beta-tail identities that drive the
Bayesian allocator in :mod:`scbudget.offline`.

All functions are pure.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import CapacityError, ContractError, EmptyTallyError

# Binomial sums switch from direct products to log space above this budget.
LOG_SPACE_THRESHOLD = 60
MAX_LATTICE_POINTS = 10**7
MC_CHUNK = 1 << 15


@dataclass(frozen=True)
class DifficultyVector:
    """Answer distribution of one question over ``M`` choices."""

    probs: tuple

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size < 2:
            raise ContractError("difficulty vector needs at least two choices")
        if np.any(p < 0) or np.any(p > 1):
            raise ContractError("probabilities must lie in [0, 1]")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ContractError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", tuple(float(x) for x in p))

    @property
    def M(self) -> int:
        return len(self.probs)

    def as_array(self) -> np.ndarray:
        return np.array(self.probs)

    @property
    def top(self) -> int:
        """Index of the population majority answer (first maximum)."""
        return int(np.argmax(self.probs))


def as_theta(theta) -> np.ndarray:
    if isinstance(theta, DifficultyVector):
        return theta.as_array()
    return DifficultyVector(tuple(np.asarray(theta, dtype=float).ravel())).as_array()


class TieRule(str, enum.Enum):
    UNIFORM = "uniform-random"
    LOWEST = "lowest-index"


@dataclass(frozen=True)
class VoteTally:
    """Per-answer vote counts and, optionally, per-answer confidence mass."""

    counts: tuple
    weights_total: Optional[tuple] = None

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ContractError("vote counts must be nonnegative")
        object.__setattr__(self, "counts", counts)
        if self.weights_total is not None:
            w = tuple(float(x) for x in self.weights_total)
            if len(w) != len(counts):
                raise ContractError("weights_total must match counts in length")
            if any(x < 0 for x in w):
                raise ContractError("weights must be nonnegative")
            object.__setattr__(self, "weights_total", w)

    @classmethod
    def from_answers(cls, answers: Sequence[int], M: int, weights=None) -> "VoteTally":
        answers = np.asarray(answers, dtype=int)
        counts = np.bincount(answers, minlength=M)
        wt = None
        if weights is not None:
            wt = np.bincount(answers, weights=np.asarray(weights, float), minlength=M)
        return cls(tuple(counts), None if wt is None else tuple(wt))


@dataclass(frozen=True)
class BetaCounts:
    a: int
    b: int

    def __post_init__(self):
        if int(self.a) != self.a or int(self.b) != self.b or self.a < 1 or self.b < 1:
            raise ContractError("Beta counts must be integers >= 1")


def tie_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every seeded tie break."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _pick(scores: np.ndarray, rule: TieRule, seed: Optional[int]) -> int:
    top = np.flatnonzero(scores == scores.max())
    if top.size == 1 or TieRule(rule) is TieRule.LOWEST:
        return int(top[0])
    if seed is None:
        raise ContractError("uniform-random tie breaking requires an explicit seed")
    return int(top[tie_rng(seed).integers(top.size)])


def majority_vote(tally, rule: TieRule = TieRule.LOWEST, seed: Optional[int] = None) -> int:
    """Index with the most votes; ties resolved by ``rule``."""
    counts = np.asarray(tally.counts if isinstance(tally, VoteTally) else tally)
    if counts.sum() <= 0:
        raise EmptyTallyError("cannot vote on an empty tally")
    return _pick(counts, rule, seed)


def weighted_majority_vote(tally: VoteTally, rule: TieRule = TieRule.LOWEST,
                           seed: Optional[int] = None) -> int:
    """Index with the most confidence mass; ties resolved by ``rule``."""
    if tally.weights_total is None:
        raise ContractError("weighted vote needs weights_total")
    w = np.asarray(tally.weights_total)
    if w.sum() <= 0:
        raise EmptyTallyError("cannot vote on a tally with zero weight")
    return _pick(w, rule, seed)


# --------------------------------------------------------------------------
# binary self-consistency


def _check_prob(theta: float) -> float:
    theta = float(theta)
    if not 0.0 <= theta <= 1.0 or math.isnan(theta):
        raise ContractError(f"theta={theta!r} outside [0, 1]")
    return theta


def _log_binom(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _prob_majority_one(theta: float, B: int) -> float:
    """P(majority of B Bernoulli(theta) draws is 1), ties split evenly."""
    if B == 0:
        return 0.5
    lo = B // 2 + 1
    if B <= LOG_SPACE_THRESHOLD:
        q = 1.0 - theta
        upper = math.fsum(math.comb(B, b) * theta**b * q ** (B - b) for b in range(lo, B + 1))
        if B % 2 == 0:
            m = B // 2
            upper += 0.5 * math.comb(B, m) * (theta * q) ** m
        return upper
    if theta in (0.0, 1.0):
        return theta
    b = np.arange(lo, B + 1)
    terms = _log_binom(B, b) + b * math.log(theta) + (B - b) * math.log1p(-theta)
    if B % 2 == 0:
        m = B // 2
        tie = math.log(0.5) + _log_binom(B, m) + m * math.log(theta * (1.0 - theta))
        terms = np.append(terms, tie)
    return float(np.exp(logsumexp(terms)))


def sc_exact_binary(theta: float, B: int) -> float:
    """Self-consistency rate of a binary question after ``B`` traces.

    Odd ``B`` gives the upper binomial tail; even ``B`` adds half the tie
    mass. ``SC(theta; 0) = 1/2``.
    """
    theta = _check_prob(theta)
    if B < 0 or int(B) != B:
        raise ContractError("budget must be a nonnegative integer")
    B = int(B)
    # Evaluating both labels through the same routine keeps SC(t) == SC(1-t).
    return max(_prob_majority_one(theta, B), _prob_majority_one(1.0 - theta, B))


def log_marginal_gain_binary(theta: float, n: int) -> float:
    """``log R(theta, n)``; ``-inf`` where the gain vanishes."""
    theta = _check_prob(theta)
    if n % 2 == 1:
        return -math.inf
    m = n // 2
    gap = abs(theta - 0.5)
    if gap == 0.0:
        return -math.inf
    if m == 0:
        return math.log(gap)
    pq = theta * (1.0 - theta)
    if pq == 0.0:
        return -math.inf
    return math.log(gap) + float(_log_binom(2 * m, m)) + m * math.log(pq)


def marginal_gain_binary(theta: float, n: int) -> float:
    """``SC(theta; n+1) - SC(theta; n)``, zero for odd ``n``.

    Even ``n = 2m`` uses ``|theta - 1/2| * C(2m, m) * (theta (1 - theta))^m``.
    """
    if n < 0 or int(n) != n:
        raise ContractError("n must be a nonnegative integer")
    n = int(n)
    if n % 2 == 1:
        _check_prob(theta)
        return 0.0
    m = n // 2
    if n <= LOG_SPACE_THRESHOLD:
        theta = _check_prob(theta)
        return abs(theta - 0.5) * math.comb(2 * m, m) * (theta * (1.0 - theta)) ** m
    return math.exp(log_marginal_gain_binary(theta, n))


# --------------------------------------------------------------------------
# multi-choice self-consistency


@dataclass(frozen=True)
class SCEstimate:
    value: float
    stderr: float
    mode: str


def lattice_size(B: int, M: int) -> int:
    return math.comb(B + M - 1, M - 1)


def _compositions(total: int, parts: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``parts`` summing to ``total``."""
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    blocks = []
    for first in range(total, -1, -1):
        rest = _compositions(total - first, parts - 1)
        blocks.append(np.column_stack([np.full(len(rest), first, dtype=np.int64), rest]))
    return np.vstack(blocks)


def _tie_share(counts: np.ndarray, target: int) -> np.ndarray:
    """Per-row probability that a uniform tie break lands on ``target``."""
    top = counts.max(axis=1, keepdims=True)
    at_top = counts == top
    return at_top[:, target] / at_top.sum(axis=1)


def _log_multinomial_pmf(counts: np.ndarray, log_theta: np.ndarray, B: int) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        contrib = np.where(counts > 0, counts * log_theta, 0.0)
    return gammaln(B + 1) - gammaln(counts + 1).sum(axis=1) + contrib.sum(axis=1)


def _sc_enumerate(theta: np.ndarray, B: int) -> float:
    M = theta.size
    target = int(np.argmax(theta))
    with np.errstate(divide="ignore"):
        log_theta = np.log(theta)
    total = 0.0
    # Fixing the first count bounds memory to one slab of the lattice.
    for first in range(B, -1, -1):
        rest = _compositions(B - first, M - 1)
        counts = np.column_stack([np.full(len(rest), first, dtype=np.int64), rest])
        pmf = np.exp(_log_multinomial_pmf(counts, log_theta, B))
        total += math.fsum(pmf * _tie_share(counts, target))
    return total


def _mc_chunk(args):
    theta, B, n, seed_seq, target = args
    rng = np.random.default_rng(seed_seq)
    counts = rng.multinomial(B, theta, size=n)
    share = _tie_share(counts, target)
    return float(share.sum()), float((share * share).sum())


def sc_multinomial(theta, B: int, mode: str = "exact-enumeration", samples: int = 100_000,
                   seed: int = 0, workers: int = 1) -> SCEstimate:
    """Self-consistency of a ``B``-trace plurality vote with uniform tie breaking.

    ``mode="exact-enumeration"`` walks the full count lattice (capped at
    ``MAX_LATTICE_POINTS``); ``mode="monte-carlo"`` draws ``samples`` vote
    tallies in fixed-size chunks with spawned seeds, so the estimate does
    not depend on ``workers``. With ``B = 0`` the vote is uniform over all
    ``M`` answers and the rate is ``1/M``.
    """
    theta = as_theta(theta)
    if B < 0 or int(B) != B:
        raise ContractError("budget must be a nonnegative integer")
    B = int(B)
    M = theta.size
    if B == 0:
        return SCEstimate(1.0 / M, 0.0, mode)
    if mode == "exact-enumeration":
        size = lattice_size(B, M)
        if size > MAX_LATTICE_POINTS:
            raise CapacityError(
                f"lattice of {size} points exceeds {MAX_LATTICE_POINTS}; use monte-carlo")
        return SCEstimate(_sc_enumerate(theta, B), 0.0, mode)
    if mode != "monte-carlo":
        raise ContractError(f"unknown mode {mode!r}")
    if samples < 1:
        raise ContractError("monte-carlo needs samples >= 1")
    target = int(np.argmax(theta))
    sizes = [MC_CHUNK] * (samples // MC_CHUNK)
    if samples % MC_CHUNK:
        sizes.append(samples % MC_CHUNK)
    seqs = np.random.SeedSequence(int(seed)).spawn(len(sizes))
    jobs = [(theta, B, n, s, target) for n, s in zip(sizes, seqs)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(_mc_chunk, jobs))
    else:
        parts = [_mc_chunk(j) for j in jobs]
    s1 = math.fsum(p[0] for p in parts)
    s2 = math.fsum(p[1] for p in parts)
    mean = s1 / samples
    var = max(s2 / samples - mean * mean, 0.0)
    stderr = math.sqrt(var / samples) if samples > 1 else 0.0
    return SCEstimate(mean, stderr, mode)


# --------------------------------------------------------------------------
# Beta tails at one half


def _beta_args(c) -> tuple:
    if isinstance(c, BetaCounts):
        return c.a, c.b
    a, b = c
    BetaCounts(a, b)
    return int(a), int(b)


def beta_tail_half(c) -> float:
    """``P(X >= 1/2)`` for ``X ~ Beta(a, b)`` with integer ``a, b >= 1``.

    Computed exactly as ``2^-(a+b-1) * sum_{k<a} C(a+b-1, k)`` and rounded
    once to float.
    """
    a, b = _beta_args(c)
    n = a + b - 1
    total = sum(math.comb(n, k) for k in range(a))
    return float(Fraction(total, 1 << n))


def offline_increment(m: int, n: int) -> float:
    """Gain in ``P(X >= 1/2)`` from one more success at ``Beta(m, n)``."""
    if m < 1 or n < 1:
        raise ContractError("offline_increment needs m, n >= 1")
    return float(Fraction(math.comb(m + n - 1, n - 1), 1 << (m + n)))


def log_offline_increment(m: float, n: float) -> float:
    """Log of the one-success gain, valid for real ``m, n > 0``.

    Uses ``P(Beta(m+1, n) >= 1/2) - P(Beta(m, n) >= 1/2) = 2^-(m+n) / (m B(m, n))``,
    which reduces to ``2^-(m+n) C(m+n-1, n-1)`` at integers.
    """
    if m <= 0 or n <= 0:
        raise ContractError("log_offline_increment needs m, n > 0")
    log_beta = math.lgamma(m) + math.lgamma(n) - math.lgamma(m + n)
    return -(m + n) * math.log(2.0) - math.log(m) - log_beta


def rate_online(theta: float) -> float:
    """Exponential decay rate of the greedy gains, ``-log(4 theta (1 - theta))``."""
    theta = _check_prob(theta)
    x = 4.0 * theta * (1.0 - theta)
    if x == 0.0:
        return math.inf
    return -math.log(x)


def rate_offline(theta: float) -> float:
    """``KL(theta || 1/2)``, the decay rate of the Bayesian allocator's gains."""
    theta = _check_prob(theta)

    def xlog2x(x):
        return 0.0 if x == 0.0 else x * math.log(2.0 * x)

    return max(xlog2x(theta) + xlog2x(1.0 - theta), 0.0)

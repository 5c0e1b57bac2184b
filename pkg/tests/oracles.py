"""Independent reference computations used only by the test-suite.

Nothing here shares code with the package: the binary oracle enumerates
outcome sequences, Beta tails are integrated numerically, and the grid
oracle enumerates every plan.
"""

import itertools
import math

import numpy as np
from scipy import integrate


def sc_binary_bruteforce(theta, B):
    """Enumerate all 2^B answer sequences; ties count one half."""
    if B == 0:
        return 0.5
    p_one = 0.0
    for seq in itertools.product((0, 1), repeat=B):
        k = sum(seq)
        prob = theta**k * (1 - theta) ** (B - k)
        if 2 * k > B:
            p_one += prob
        elif 2 * k == B:
            p_one += 0.5 * prob
    return max(p_one, 1 - p_one)


def beta_tail_quadrature(a, b):
    """P(Beta(a, b) >= 1/2) by adaptive quadrature of the density."""
    log_norm = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)

    def density(x):
        return math.exp(log_norm + (a - 1) * math.log(x) + (b - 1) * math.log1p(-x)) if 0 < x < 1 else 0.0

    val, _ = integrate.quad(density, 0.5, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)
    return val


def plurality_vote_bruteforce(counts, weights=None):
    """Set of winning indices (before tie breaking)."""
    scores = list(weights if weights is not None else counts)
    best = max(scores)
    return [i for i, s in enumerate(scores) if s == best]


def grid_plan_enumeration(sc_funcs, masses, capacity, max_b):
    """Best odd-or-zero plan with expected cost <= capacity, by enumeration."""
    options = [0] + list(range(1, max_b + 1, 2))
    best_val, best_plan = -1.0, None
    for plan in itertools.product(options, repeat=len(masses)):
        cost = sum(p * b for p, b in zip(masses, plan))
        if cost > capacity + 1e-12:
            continue
        val = sum(p * f(b) for p, f, b in zip(masses, sc_funcs, plan))
        if val > best_val + 1e-13:
            best_val, best_plan = val, plan
    return best_plan, best_val


def exact_dp_offline_two_questions(alpha0, alpha1, H):
    """Optimal expected terminal utility for two binary questions (tiny H).

    Exact Bayesian dynamic program over Beta states with integer counts.
    """
    from functools import lru_cache

    def tail(a, b):
        # P(Beta(a,b) >= 1/2) via the binomial identity, independent of the package
        n = a + b - 1
        return sum(math.comb(n, k) for k in range(a)) / 2**n

    def util(a, b):
        p = tail(a, b)
        return max(p, 1 - p)

    @lru_cache(maxsize=None)
    def value(s0, s1, h):
        if h == 0:
            return util(*s0) + util(*s1)
        best = -1.0
        for which in (0, 1):
            a, b = (s0, s1)[which]
            p_pos = a / (a + b)
            if which == 0:
                up = value((a + 1, b), s1, h - 1)
                dn = value((a, b + 1), s1, h - 1)
            else:
                up = value(s0, (a + 1, b), h - 1)
                dn = value(s0, (a, b + 1), h - 1)
            best = max(best, p_pos * up + (1 - p_pos) * dn)
        return best

    return value(tuple(alpha0), tuple(alpha1), H)


def normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def rng(seed=0):
    return np.random.default_rng(seed)

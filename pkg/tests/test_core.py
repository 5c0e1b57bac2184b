import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scbudget.core import (
    BetaCounts,
    DifficultyVector,
    TieRule,
    VoteTally,
    beta_tail_half,
    log_marginal_gain_binary,
    log_offline_increment,
    majority_vote,
    marginal_gain_binary,
    offline_increment,
    rate_offline,
    rate_online,
    sc_exact_binary,
    sc_multinomial,
    weighted_majority_vote,
)
from scbudget.errors import CapacityError, ContractError, EmptyTallyError

from oracles import beta_tail_quadrature, plurality_vote_bruteforce, sc_binary_bruteforce

THETAS = [round(0.55 + 0.05 * i, 2) for i in range(9)]


class TestVotes:
    def test_unique_maximum(self):
        assert majority_vote(VoteTally((3, 1)), TieRule.LOWEST) == 0

    def test_lowest_tied_index(self):
        assert majority_vote(VoteTally((0, 5, 5)), TieRule.LOWEST) == 1

    def test_uniform_tie_frequency(self):
        picks = [majority_vote(VoteTally((2, 2)), TieRule.UNIFORM, seed=s) for s in range(10_000)]
        assert abs(np.mean(picks) - 0.5) <= 0.02

    def test_uniform_tie_is_deterministic(self):
        t = VoteTally((4, 4, 4))
        assert {majority_vote(t, TieRule.UNIFORM, seed=7) for _ in range(5)} == {
            majority_vote(t, TieRule.UNIFORM, seed=7)}

    def test_uniform_requires_seed(self):
        with pytest.raises(ContractError):
            majority_vote(VoteTally((2, 2)), TieRule.UNIFORM)

    def test_empty_tally(self):
        with pytest.raises(EmptyTallyError):
            majority_vote(VoteTally((0, 0)))

    def test_negative_counts_rejected(self):
        with pytest.raises(ContractError):
            VoteTally((1, -1))

    def test_weighted_dominance(self):
        assert weighted_majority_vote(VoteTally((1, 1), (0.9, 0.3))) == 0

    def test_weighted_disagrees_with_counts(self):
        t = VoteTally((1, 3), (2.0, 1.5))
        assert weighted_majority_vote(t) == 0
        assert majority_vote(t) == 1

    def test_weighted_needs_weights(self):
        with pytest.raises(ContractError):
            weighted_majority_vote(VoteTally((1, 2)))

    def test_equal_weights_match_plain_vote_exhaustively(self):
        for M in (2, 3):
            for B in range(1, 6):
                for counts in itertools.product(range(B + 1), repeat=M):
                    if sum(counts) != B:
                        continue
                    t = VoteTally(counts, tuple(float(c) for c in counts))
                    assert weighted_majority_vote(t) == majority_vote(t)
                    assert majority_vote(t) == plurality_vote_bruteforce(counts)[0]
                    for seed in range(3):
                        assert weighted_majority_vote(t, TieRule.UNIFORM, seed) == \
                            majority_vote(t, TieRule.UNIFORM, seed)


class TestBinarySC:
    def test_worked_values(self):
        assert sc_exact_binary(0.8, 3) == pytest.approx(0.896, abs=1e-15)
        assert sc_exact_binary(0.8, 2) == pytest.approx(0.8, abs=1e-15)
        assert sc_exact_binary(0.3, 0) == 0.5

    @pytest.mark.parametrize("B", [0, 1, 2, 7, 30, 61, 200])
    def test_half_is_flat(self, B):
        assert sc_exact_binary(0.5, B) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("theta", THETAS)
    def test_matches_enumeration(self, theta):
        for B in range(13):
            assert abs(sc_exact_binary(theta, B) - sc_binary_bruteforce(theta, B)) <= 1e-12

    def test_monotone_and_even_step_adds_nothing(self):
        for theta in THETAS:
            vals = [sc_exact_binary(theta, B) for B in range(31)]
            assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))
            for m in range(1, 16):
                assert vals[2 * m] == pytest.approx(vals[2 * m - 1], abs=1e-14)

    @given(st.floats(0.0, 1.0), st.integers(0, 120))
    @settings(max_examples=200, deadline=None)
    def test_symmetry(self, theta, B):
        assert sc_exact_binary(theta, B) == pytest.approx(sc_exact_binary(1 - theta, B), abs=1e-13)

    def test_log_space_branch_continuous(self):
        # B=61/62 uses log space, B<=60 direct sums; compare against the closed-form gains
        for theta in (0.6, 0.8):
            left = sc_exact_binary(theta, 60)
            right = sc_exact_binary(theta, 62)
            assert right - left == pytest.approx(marginal_gain_binary(theta, 60), abs=1e-13)

    def test_domain(self):
        with pytest.raises(ContractError):
            sc_exact_binary(1.2, 3)
        with pytest.raises(ContractError):
            sc_exact_binary(0.5, -1)


class TestMarginalGain:
    def test_worked_values(self):
        assert marginal_gain_binary(0.8, 1) == 0.0
        assert marginal_gain_binary(0.8, 2) == pytest.approx(0.096, abs=1e-15)
        assert marginal_gain_binary(0.5, 2) == 0.0

    def test_closed_form_vs_differences(self):
        for theta in THETAS:
            for n in range(12):
                fd = sc_binary_bruteforce(theta, n + 1) - sc_binary_bruteforce(theta, n)
                assert abs(marginal_gain_binary(theta, n) - fd) <= 1e-12
                if n % 2:
                    assert marginal_gain_binary(theta, n) == 0.0

    def test_diminishing_ratio(self):
        for theta in THETAS:
            for m in range(16):
                ratio = marginal_gain_binary(theta, 2 * m + 2) / marginal_gain_binary(theta, 2 * m)
                expected = (4 - 2 / (m + 1)) * theta * (1 - theta)
                assert ratio == pytest.approx(expected, rel=1e-12)
                assert ratio < 1

    def test_log_gain_large_n(self):
        # stays finite where the plain value underflows
        lg = log_marginal_gain_binary(0.8, 20_000)
        assert math.isfinite(lg) and lg < -700
        assert log_marginal_gain_binary(0.8, 3) == -math.inf


class TestMultinomialSC:
    def test_uniform_theta(self):
        for B in (1, 2, 5, 9):
            assert sc_multinomial([0.25] * 4, B).value == pytest.approx(0.25, abs=1e-12)

    def test_single_draw(self):
        assert sc_multinomial([0.8, 0.1, 0.1, 0.0], 1).value == pytest.approx(0.8, abs=1e-12)

    def test_zero_budget_is_one_over_M(self):
        assert sc_multinomial([0.7, 0.2, 0.1], 0).value == pytest.approx(1 / 3)

    def test_binary_agrees_with_closed_form(self):
        for theta in (0.55, 0.7, 0.9):
            for B in range(0, 25):
                est = sc_multinomial([theta, 1 - theta], B)
                assert abs(est.value - sc_exact_binary(theta, B)) <= 1e-12
                assert est.stderr == 0.0

    def test_exact_vs_monte_carlo(self):
        theta = [0.4, 0.3, 0.2, 0.1]
        exact = sc_multinomial(theta, 5).value
        mc = sc_multinomial(theta, 5, mode="monte-carlo", samples=100_000, seed=3)
        assert abs(exact - mc.value) <= 3 * mc.stderr

    def test_monte_carlo_parallel_bit_identical(self):
        theta = [0.5, 0.3, 0.2]
        a = sc_multinomial(theta, 11, mode="monte-carlo", samples=70_000, seed=9, workers=1)
        b = sc_multinomial(theta, 11, mode="monte-carlo", samples=70_000, seed=9, workers=4)
        assert a == b

    def test_capacity(self):
        with pytest.raises(CapacityError):
            sc_multinomial([0.1] * 10, 64)

    def test_bad_theta(self):
        with pytest.raises(ContractError):
            DifficultyVector((0.5, 0.6))
        with pytest.raises(ContractError):
            DifficultyVector((1.0,))


class TestBetaTails:
    def test_worked_values(self):
        assert beta_tail_half((1, 1)) == 0.5
        assert beta_tail_half(BetaCounts(2, 1)) == 0.75
        assert beta_tail_half((5, 1)) == 31 / 32

    def test_quadrature(self):
        for a in range(1, 13):
            for b in range(1, 13):
                assert abs(beta_tail_half((a, b)) - beta_tail_quadrature(a, b)) <= 1e-10

    def test_binomial_reinterpretation(self):
        from scipy.stats import binom

        for a in range(1, 13):
            for b in range(1, 13):
                assert beta_tail_half((a, b)) == pytest.approx(binom.cdf(a - 1, a + b - 1, 0.5), abs=1e-14)

    def test_increment_values(self):
        assert offline_increment(1, 1) == 0.25
        assert offline_increment(2, 2) == 0.1875

    def test_increment_is_tail_difference(self):
        for m in range(1, 21):
            for n in range(1, 21):
                d = offline_increment(m, n)
                assert d > 0
                assert abs(d - (beta_tail_half((m + 1, n)) - beta_tail_half((m, n)))) <= 1e-12
                assert math.exp(log_offline_increment(m, n)) == pytest.approx(d, rel=1e-10)

    def test_invalid_counts(self):
        with pytest.raises(ContractError):
            beta_tail_half((0, 1))


class TestRates:
    def test_values(self):
        assert rate_online(0.8) == pytest.approx(0.446287, abs=1e-5)
        assert rate_offline(0.8) == pytest.approx(0.192745, abs=1e-5)
        assert rate_online(0.5) == 0.0
        assert rate_offline(0.5) == 0.0

    def test_boundary(self):
        assert rate_online(1.0) == math.inf
        assert rate_offline(1.0) == pytest.approx(math.log(2))

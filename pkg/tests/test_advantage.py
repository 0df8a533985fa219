import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import table_policy
from tinyalign.advantage import (KlPenaltyConfig, basic_advantage, exact_value, grpo_advantage,
                                 kl_penalized_reward, mc_value)
from tinyalign.errors import BudgetError, InvalidInputError
from tinyalign.model import EOS, PolicyModel, Text, next_token_dist, sample_batch, token_logprobs
from tinyalign.numerics import kl_divergence, make_rng

TARGET = (1, 0, 1)


def match_reward(prefix_len):
    def fn(tokens):
        cont = list(tokens)[prefix_len:]
        return sum(a == b for a, b in zip(cont, TARGET)) / len(TARGET)
    return fn


def brute_value(policy, prefix, reward_fn, horizon):
    """Enumerate every continuation as a product of next-token probabilities."""
    total = 0.0
    for cont in itertools.product(range(policy.vocab_size), repeat=horizon):
        seq, p = list(prefix), 1.0
        for tok in cont:
            p *= next_token_dist(policy, seq)[tok]
            seq.append(tok)
            if tok == EOS:
                break
        # each early-stopped sequence is reached once per ignored suffix
        if EOS in cont:
            stop = cont.index(EOS)
            if any(t != 0 for t in cont[stop + 1:]):
                continue
        total += p * reward_fn(seq)
    return total


def random_table(V, k, seed, scale=1.0):
    return PolicyModel.create("table", V, k, seed=seed, init="zeros").with_params(
        make_rng(seed).normal(0, scale, V**k * V))


class TestExactValue:
    def test_horizon_zero(self):
        pol = random_table(3, 2, 0)
        assert exact_value(pol, [1, 2], lambda s: float(len(s)), 0) == 2.0

    def test_deterministic_policy(self):
        pol = table_policy(2, 1, {(0,): [30, -30], (1,): [-30, 30]})
        # start from 1 -> always emit 1
        r = match_reward(1)
        assert exact_value(pol, [1], r, 3) == pytest.approx(r([1, 1, 1, 1]), abs=1e-12)

    def test_uniform_binary(self):
        pol = PolicyModel.create("table", 2, 1, init="zeros")
        assert exact_value(pol, [0], match_reward(1), 3) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("V,h", [(2, 3), (3, 2), (4, 3), (5, 2)])
    def test_matches_brute_force(self, V, h):
        pol = random_table(V, 2, V + h)
        r = match_reward(1)
        assert exact_value(pol, [1], r, h) == pytest.approx(brute_value(pol, [1], r, h), abs=1e-12)

    def test_budget(self):
        pol = PolicyModel.create("table", 16, 1, init="zeros")
        with pytest.raises(BudgetError):
            exact_value(pol, [1], match_reward(1), 6)


class TestMcValue:
    def test_deterministic(self):
        pol = table_policy(2, 1, {(0,): [30, -30], (1,): [-30, 30]})
        mean, se = mc_value(pol, [1], match_reward(1), 50, make_rng(0), 3)
        assert se == 0.0 and mean == pytest.approx(exact_value(pol, [1], match_reward(1), 3), abs=1e-12)

    @pytest.mark.parametrize("V", [2, 3, 4])
    def test_within_three_se(self, V):
        pol = random_table(V, 2, 7 * V)
        r = match_reward(1)
        exact = exact_value(pol, [1], r, 3)
        means = []
        for seed in (1, 2):
            mean, se = mc_value(pol, [1], r, 10_000, make_rng(seed), 3)
            assert abs(mean - exact) <= 3 * se
            means.append(mean)
        assert means[0] != means[1]

    def test_converges(self):
        pol = random_table(3, 2, 11)
        r = match_reward(1)
        exact = exact_value(pol, [1], r, 4)
        for n in (100, 1000, 10_000):
            mean, se = mc_value(pol, [1], r, n, make_rng(n), 4)
            assert abs(mean - exact) <= 3 * se


class TestAdvantages:
    def test_basic(self):
        assert basic_advantage(0.4, 0.4) == 0.0
        assert basic_advantage(1.0, 0.25) == 0.75

    def test_per_token_against_enumeration(self):
        pol = random_table(3, 2, 5)
        r = match_reward(1)
        text = sample_batch(pol, [(1,)], 1.0, 3, make_rng(3))[0]
        R = r(text.tokens)
        prefixes = [text.tokens[: 1 + t] for t in range(len(text.answer))]
        base = [exact_value(pol, p, r, 3 - t) for t, p in enumerate(prefixes)]
        adv = basic_advantage(R, np.array(base))
        oracle = [R - brute_value(pol, p, r, 3 - t) for t, p in enumerate(prefixes)]
        np.testing.assert_allclose(adv, oracle, atol=1e-12)

    def test_grpo_examples(self):
        np.testing.assert_array_equal(grpo_advantage([1, 0, 0, 1]), [0.5, -0.5, -0.5, 0.5])
        np.testing.assert_array_equal(grpo_advantage([0.7]), [0.0])

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(-100, 100))
    def test_grpo_centered_and_shift_invariant(self, r, c):
        a = grpo_advantage(r)
        assert abs(a.sum()) < 1e-10 * max(1.0, np.abs(r).max() * len(r))
        np.testing.assert_allclose(grpo_advantage(np.array(r) + c), a, atol=1e-9)

    def test_grpo_empty(self):
        with pytest.raises(InvalidInputError):
            grpo_advantage([])


class TestKlPenalty:
    def test_same_policy(self):
        assert kl_penalized_reward(0.8, -1.2, -1.2, 0.5) == 0.8

    @given(st.floats(-10, 10), st.floats(-20, 0), st.floats(-20, 0))
    def test_beta_zero_identity(self, R, lp1, lp0):
        assert kl_penalized_reward(R, lp1, lp0, 0.0) == R

    def test_config_rejects_negative(self):
        with pytest.raises(InvalidInputError):
            KlPenaltyConfig(beta=-1.0)

    def test_log_ratio_estimates_reverse_kl(self):
        V, h = 4, 3
        pi1, pi0 = random_table(V, 2, 21), random_table(V, 2, 22)

        def expected_kl(prefix, depth):
            if depth == 0:
                return 0.0
            p1, p0 = next_token_dist(pi1, prefix), next_token_dist(pi0, prefix)
            total = kl_divergence(p1, p0)
            for tok in range(V):
                if tok != EOS:
                    total += p1[tok] * expected_kl(prefix + [tok], depth - 1)
            return total

        exact = expected_kl([1], h)
        texts = sample_batch(pi1, [(1,)] * 20_000, 1.0, h, make_rng(4))
        beta = 0.3
        sums = []
        for t in texts:
            lp1, lp0 = token_logprobs(pi1, t, 2), token_logprobs(pi0, t, 2)
            # penalty the reward would carry, divided back by beta
            sums.append(np.sum(-(kl_penalized_reward(0.0, lp1, lp0, beta))) / beta)
        sums = np.array(sums)
        assert abs(sums.mean() - exact) <= 3 * sums.std(ddof=1) / np.sqrt(sums.size)


def test_text_type_used_by_reward_fns():
    # reward functions receive token tuples, not Text objects
    pol = PolicyModel.create("table", 3, 1, init="zeros")
    seen = []
    exact_value(pol, [1], lambda s: seen.append(type(s)) or 0.0, 1)
    assert all(t in (list, tuple) for t in seen) and not isinstance(seen[0], Text)

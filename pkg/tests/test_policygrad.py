import math

import numpy as np
import pytest

from conftest import fd_check, row_of, table_policy
from tinyalign.data import PreferencePair, SampleGroup, Task, gen_prompts, synthetic_pairs
from tinyalign.errors import InvalidInputError
from tinyalign.model import PolicyModel, Text, ValueModel, sample_batch, sequence_logprob
from tinyalign.numerics import kl_divergence, make_rng
from tinyalign.policygrad import (ClipConfig, RolloutBatch, alt_grape_loss, dpo_loss, dpo_pairs_loss,
                                  group_advantages, groups_to_batch, grpo_loss, ppo_loss, ppo_terms, ratio_loss,
                                  reinforce_loss, trpo_constraint_report, trpo_loss)
from tinyalign.supervised import nll_loss
from tinyalign.trainer import sgd_step


def two_token(p_old, p_new):
    """V=2 table policies with one scored token (action 1 after context 0)."""
    old = table_policy(2, 1, {(0,): np.log(p_old), (1,): [0.0, 0.0]})
    new = table_policy(2, 1, {(0,): np.log(p_new), (1,): [0.0, 0.0]})
    batch = RolloutBatch.collect(old, [Text((0, 1), 2)], [1.0])
    return old, new, batch


def make_groups(task, sampler, n_groups, G, seed, cached=False):
    rng = make_rng(seed)
    prompts = gen_prompts(task, n_groups, rng)
    flat = [p for p in prompts for _ in range(G)]
    texts = sample_batch(sampler, flat, 1.0, task.answer_len, rng)
    r = rng.uniform(0, 1, len(texts))
    groups = [SampleGroup(q, texts[q * G:(q + 1) * G], list(r[q * G:(q + 1) * G])) for q in range(n_groups)]
    if cached:
        b = RolloutBatch.collect(sampler, texts, r)
        for q, g in enumerate(groups):
            g.logp_old, g.sampler_id = b.logp_old[q * G:(q + 1) * G], b.sampler_id
    return groups


class TestReinforce:
    def test_perfect_baseline(self, task):
        rng = make_rng(0)
        pol = PolicyModel.create("mlp", task.vocab_size, 2, 5, seed=0)
        texts = sample_batch(pol, gen_prompts(task, 4, rng), 1.0, 2, rng)
        value = ValueModel.create("table", task.vocab_size, 1, init="zeros")
        value = value.with_params(np.full(value.size, 0.7))
        rep = reinforce_loss(pol, RolloutBatch.collect(pol, texts, [0.7] * 4), value)
        assert rep.loss == 0.0 and np.all(rep.grad == 0)

    def test_zero_baseline_is_weighted_nll(self, rollout):
        sampler, _, batch, _ = rollout
        expected = np.mean([R * nll_loss(sampler, t).loss for R, t in zip(batch.rewards, batch.texts)])
        assert abs(reinforce_loss(sampler, batch).loss - expected) < 1e-10

    def test_fd_two_samples(self, task):
        rng = make_rng(1)
        pol = PolicyModel.create("mlp", task.vocab_size, 2, 5, seed=2)
        texts = sample_batch(pol, gen_prompts(task, 2, rng), 1.0, 2, rng)
        batch = RolloutBatch.collect(pol, texts, [1.0, 0.25])
        value = ValueModel.create("mlp", task.vocab_size, 2, 4, seed=3)
        assert fd_check(pol, lambda m: reinforce_loss(m, batch, value)) < 1e-4


class TestRatio:
    def test_identity_ratio(self, rollout):
        sampler, _, batch, adv = rollout
        rep = ratio_loss(sampler, batch, adv)
        np.testing.assert_allclose(rep.per_token["ratio"], 1.0, atol=1e-15)
        assert rep.loss == pytest.approx(-sum(a.sum() for a in adv) / len(batch), abs=1e-12)

    def test_zero_advantage(self, rollout):
        _, new, batch, adv = rollout
        rep = ratio_loss(new, batch, [np.zeros_like(a) for a in adv])
        assert rep.loss == 0.0 and np.all(rep.grad == 0)

    def test_fd(self, rollout):
        _, new, batch, adv = rollout
        assert fd_check(new, lambda m: ratio_loss(m, batch, adv)) < 1e-4

    def test_scalar_advantages_broadcast(self, rollout):
        _, new, batch, _ = rollout
        a = ratio_loss(new, batch, [1.0, -0.5, 2.0])
        b = ratio_loss(new, batch, [np.full(len(lp), v) for lp, v in zip(batch.logp_old, (1.0, -0.5, 2.0))])
        assert a.loss == b.loss

    def test_overflow_sentinel(self):
        old, _, batch = two_token([1 - 1e-20, 1e-20], [0.5, 0.5])
        new = table_policy(2, 1, {(0,): [0.0, 0.0]})
        rep = ratio_loss(new, batch, [1.0])
        assert rep.sentinel and rep.loss == math.inf and np.all(rep.grad == 0)


class TestTrpo:
    def test_same_policy_is_ratio(self, rollout):
        sampler, _, batch, adv = rollout
        rep = trpo_loss(sampler, sampler, batch, adv, beta=0.7)
        assert rep.loss == pytest.approx(ratio_loss(sampler, batch, adv).loss, abs=1e-12)

    def test_beta_zero_is_ratio(self, rollout):
        sampler, new, batch, adv = rollout
        a, b = trpo_loss(new, sampler, batch, adv, beta=0.0), ratio_loss(new, batch, adv)
        assert abs(a.loss - b.loss) <= 1e-12
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-12)

    def test_hand_built_penalty(self):
        old, new, batch = two_token([0.9, 0.1], [0.5, 0.5])
        beta = 0.3
        penalty = beta * (0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5))
        rep = trpo_loss(new, old, batch, [0.0], beta)
        assert rep.loss == pytest.approx(penalty, abs=1e-12)

    def test_fd(self, rollout):
        sampler, new, batch, adv = rollout
        assert fd_check(new, lambda m: trpo_loss(m, sampler, batch, adv, 0.5)) < 1e-4

    def test_wrong_sampler(self, rollout):
        sampler, new, batch, adv = rollout
        with pytest.raises(InvalidInputError):
            trpo_loss(new, new, batch, adv)


class TestConstraint:
    def test_identical(self, rollout):
        sampler, _, batch, _ = rollout
        rep = trpo_constraint_report(sampler, sampler, batch, 1e-9)
        assert rep.mean_kl == 0.0 and rep.max_kl == 0.0 and rep.satisfied

    def test_max_implies_mean(self, rollout):
        sampler, new, batch, _ = rollout
        for delta in np.linspace(0, 1, 50):
            rep = trpo_constraint_report(new, sampler, batch, delta)
            assert rep.satisfied or not rep.satisfied_max

    def test_known_divergence(self):
        old, new, batch = two_token([0.9, 0.1], [0.5, 0.5])
        kl = kl_divergence([0.9, 0.1], [0.5, 0.5])
        rep = trpo_constraint_report(new, old, batch, kl * 0.99)
        assert rep.mean_kl == pytest.approx(kl, abs=1e-12) and not rep.satisfied
        assert trpo_constraint_report(new, old, batch, kl * 1.01).satisfied

    def test_delta_zero_rejects_any_change(self, rollout):
        sampler, new, batch, _ = rollout
        assert not trpo_constraint_report(new, sampler, batch, 0.0).satisfied


class TestPpo:
    def test_terms_arithmetic(self):
        term, _, clip = ppo_terms(np.array([1.5]), np.array([1.0]), 0.2)
        assert term[0] == pytest.approx(1.2) and clip[0]
        term, _, clip = ppo_terms(np.array([0.5]), np.array([-1.0]), 0.2)
        assert term[0] == pytest.approx(-0.8) and clip[0]

    @pytest.mark.parametrize("r,a", [(1.3, 1.0), (1.25, 2.0), (0.7, -1.0), (0.79, -0.5)])
    def test_flat_beyond_bound(self, r, a):
        step = 0.1 if a > 0 else -0.1
        t1, _, _ = ppo_terms(np.array([r]), np.array([a]), 0.2)
        t2, _, _ = ppo_terms(np.array([r + step]), np.array([a]), 0.2)
        assert t1[0] == t2[0]

    def test_huge_eps_is_ratio(self, rollout):
        sampler, new, batch, adv = rollout
        a, b = ppo_loss(new, sampler, batch, adv, eps=1e6), ratio_loss(new, batch, adv)
        assert abs(a.loss - b.loss) <= 1e-12
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-12)

    def test_clipped_gradient_exactly_zero(self):
        old, new, batch = two_token([0.6, 0.4], [0.4, 0.6])
        rep = ppo_loss(new, old, batch, [1.0], eps=0.2)
        assert rep.per_token["ratio"][0] == pytest.approx(1.5)
        assert rep.per_token["clipped"][0]
        assert np.all(rep.grad == 0.0)
        assert fd_check(new, lambda m: ppo_loss(m, old, batch, [1.0], 0.2)) < 1e-9

    def test_unclipped_gradient_nonzero(self):
        old, new, batch = two_token([0.6, 0.4], [0.4, 0.6])
        rep = ppo_loss(new, old, batch, [-1.0], eps=0.2)
        assert not rep.per_token["clipped"][0] and np.any(rep.grad != 0)

    def test_fd(self, rollout):
        sampler, new, batch, adv = rollout
        assert fd_check(new, lambda m: ppo_loss(m, sampler, batch, adv, 0.1)) < 1e-4

    def test_eps_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            ClipConfig(0.0)

    def test_stale_sampler_rejected(self, rollout):
        sampler, new, batch, adv = rollout
        with pytest.raises(InvalidInputError):
            ppo_loss(new, new, batch, adv)


class TestGrpo:
    def test_singleton_groups(self, task):
        pol = PolicyModel.create("mlp", task.vocab_size, 2, 5, seed=1)
        new = pol.with_params(pol.params * 1.5)
        groups = make_groups(task, pol, 3, 1, 0)
        rep = grpo_loss(new, pol, groups)
        assert rep.loss == 0.0 and np.all(rep.grad == 0)

    def test_hand_expanded(self, task):
        pol = PolicyModel.create("mlp", task.vocab_size, 2, 5, seed=1)
        (g,) = make_groups(task, pol, 1, 5, 1)
        A = np.array(g.rewards) - np.mean(g.rewards)
        T = np.array([len(t.answer) for t in g.responses])
        assert grpo_loss(pol, pol, [g]).loss == pytest.approx(-np.sum(A * T) / 5, abs=1e-12)

    def test_equals_ppo_with_broadcast(self, task):
        pol = PolicyModel.create("mlp", task.vocab_size, 2, 5, seed=1)
        new = pol.with_params(pol.params + make_rng(0).normal(0, 0.4, pol.size))
        groups = make_groups(task, pol, 3, 4, 2)
        batch = groups_to_batch(groups, pol)
        a = grpo_loss(new, pol, groups, 0.2)
        b = ppo_loss(new, pol, batch, group_advantages(groups), 0.2)
        assert a.loss == b.loss and np.array_equal(a.grad, b.grad)

    def test_shift_invariant(self, task):
        pol = PolicyModel.create("mlp", task.vocab_size, 2, 5, seed=1)
        new = pol.with_params(pol.params + make_rng(1).normal(0, 0.4, pol.size))
        groups = make_groups(task, pol, 2, 4, 3)
        shifted = [SampleGroup(g.q, g.responses, [r + 3.0 for r in g.rewards]) for g in groups]
        assert grpo_loss(new, pol, groups).loss == pytest.approx(grpo_loss(new, pol, shifted).loss, abs=1e-12)

    def test_cached_logprobs_reused(self, task):
        pol = PolicyModel.create("mlp", task.vocab_size, 2, 5, seed=1)
        groups = make_groups(task, pol, 2, 3, 4, cached=True)
        drifted = pol.with_params(pol.params + 0.1)
        with pytest.raises(InvalidInputError):
            groups_to_batch(groups, drifted)
        assert grpo_loss(pol, pol, groups).loss == grpo_loss(pol, pol, make_groups(task, pol, 2, 3, 4)).loss

    def test_fd(self, task):
        pol = PolicyModel.create("table", task.vocab_size, 2, seed=1)
        pol = pol.with_params(pol.params + make_rng(2).normal(0, 0.5, pol.size))
        new = pol.with_params(pol.params + make_rng(3).normal(0, 0.3, pol.size))
        groups = make_groups(task, pol, 2, 3, 5)
        assert fd_check(new, lambda m: grpo_loss(m, pol, groups, 0.05)) < 1e-4


class TestAltGrape:
    def test_centered_is_zero(self, task):
        pol = PolicyModel.create("mlp", task.vocab_size, 2, 5, seed=1)
        groups = make_groups(task, pol, 3, 4, 6)
        assert abs(alt_grape_loss(pol, pol, groups).loss) < 1e-15

    def test_term_arithmetic(self):
        term, _, _ = ppo_terms(np.array([2.0]), np.array([1.0]), 0.2)
        assert term[0] == pytest.approx(1.2)

    def test_sequence_ratio_clipped(self):
        # one sequence of two scored tokens, each with ratio sqrt(2): sequence ratio 2
        old = table_policy(2, 1, {(0,): [0.0, 0.0], (1,): [0.0, 0.0]})
        p = math.sqrt(2) / 2
        new = table_policy(2, 1, {(0,): np.log([1 - p, p]), (1,): np.log([1 - p, p])})
        g = SampleGroup(0, [Text((0, 1, 1), 2), Text((0, 0, 0), 2)], [1.0, -1.0])
        rep = alt_grape_loss(new, old, [g], 0.2)
        assert rep.per_token["ratio"][0] == pytest.approx(2.0)
        assert rep.per_token["clipped"][0]

    def test_fd_two_sequences(self, task):
        pol = PolicyModel.create("mlp", task.vocab_size, 2, 5, seed=4)
        pol = pol.with_params(pol.params + make_rng(4).normal(0, 0.5, pol.size))
        new = pol.with_params(pol.params + make_rng(5).normal(0, 0.3, pol.size))
        (g,) = make_groups(task, pol, 1, 2, 7)
        assert fd_check(new, lambda m: alt_grape_loss(m, pol, [g], 0.05)) < 1e-4


class TestDpo:
    task = Task("copy", 6, 2, 2)

    def pairs(self, seed, n=4):
        return synthetic_pairs(self.task, n, 3, make_rng(seed))

    def test_equal_policies(self):
        pol = PolicyModel.create("mlp", 6, 2, 5, seed=1)
        assert dpo_loss(pol, pol, self.pairs(0)[0]).loss == pytest.approx(math.log(2), abs=1e-12)

    def test_beta_zero(self):
        a = PolicyModel.create("mlp", 6, 2, 5, seed=1)
        b = PolicyModel.create("mlp", 6, 2, 5, seed=2)
        assert dpo_loss(a, b, self.pairs(0)[0], beta=0.0).loss == pytest.approx(math.log(2), abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_one_step_moves_logprobs(self, seed):
        pol = PolicyModel.create("mlp", 6, 2, 5, seed=seed)
        pair = self.pairs(seed, 1)[0]
        rep = dpo_loss(pol, pol, pair, beta=0.5)
        new = pol.with_params(sgd_step(pol.params, rep.grad, 1e-2))
        w, l = pair.winner, pair.loser
        assert sequence_logprob(new, w, w.answer_start) > sequence_logprob(pol, w, w.answer_start)
        assert sequence_logprob(new, l, l.answer_start) < sequence_logprob(pol, l, l.answer_start)

    def test_row_shift_invariance(self):
        rng = make_rng(3)
        new = PolicyModel.create("table", 6, 2, seed=0).with_params(rng.normal(0, 1, 216))
        ref = PolicyModel.create("table", 6, 2, seed=0).with_params(rng.normal(0, 1, 216))
        shift = np.repeat(rng.normal(0, 5, 36), 6)
        pairs = self.pairs(4)
        a = dpo_pairs_loss(new, ref, pairs, 0.3).loss
        b = dpo_pairs_loss(new.with_params(new.params + shift), ref.with_params(ref.params + shift), pairs, 0.3).loss
        assert abs(a - b) < 1e-9

    def test_hp_zero(self):
        a = PolicyModel.create("mlp", 6, 2, 5, seed=1)
        b = PolicyModel.create("mlp", 6, 2, 5, seed=2)
        p = self.pairs(5)[0]
        flipped = PreferencePair(p.loser, p.winner, 0)
        assert dpo_loss(a, b, p).loss == pytest.approx(dpo_loss(a, b, flipped).loss, abs=1e-15)

    def test_fd(self):
        a = PolicyModel.create("mlp", 6, 2, 5, seed=1)
        b = PolicyModel.create("mlp", 6, 2, 5, seed=2)
        pairs = self.pairs(6)
        assert fd_check(a, lambda m: dpo_pairs_loss(m, b, pairs, 0.8)) < 1e-4


def test_row_helper_matches_model():
    pol = table_policy(5, 2, {(1, 4): [0, 0, 9, 0, 0]})
    assert np.argmax(pol.params.reshape(25, 5)[row_of(pol, (1, 4))]) == 2

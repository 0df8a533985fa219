import math

import numpy as np
import pytest

from conftest import fd_check
from tinyalign.data import PreferencePair, Task, gen_prompts, synthetic_pairs
from tinyalign.errors import InvalidInputError
from tinyalign.model import MODEL, USER, PolicyModel, RewardModel, Text, reward_score, sequence_logprob
from tinyalign.numerics import make_rng
from tinyalign.supervised import (nll_loss, pair_accuracy, preference_bce_loss, reward_pair_loss,
                                  reward_pair_loss_softmax, reward_pairs_loss, sft_loss)
from tinyalign.trainer import sgd_step


def texts_for(V=6, n=3, seed=0):
    task = Task("copy", V, 2, 2)
    return [task.reference_text(p) for p in gen_prompts(task, n, make_rng(seed))]


class TestNll:
    def test_uniform(self):
        pol = PolicyModel.create("table", 4, 2, init="zeros")
        text = Text((1, 2, 0, 1, 3), 3)
        assert nll_loss(pol, text).loss == pytest.approx(3 * math.log(4), abs=1e-4)

    def test_memorized_goes_to_zero(self):
        text = Text((USER, 4, MODEL, 5, 4), 4)
        pol = PolicyModel.create("table", 6, 2, init="zeros")
        table = pol.params.reshape(36, 6).copy()
        for ctx, tok in (((4, MODEL), 5), ((MODEL, 5), 4)):
            table[ctx[0] * 6 + ctx[1], tok] = 40.0
        assert nll_loss(pol.with_params(table.ravel()), text).loss < 1e-12

    @pytest.mark.parametrize("arch", ["table", "mlp"])
    def test_fd(self, arch):
        pol = PolicyModel.create(arch, 6, 2, 6, seed=1)
        assert fd_check(pol, lambda m: nll_loss(m, texts_for()[0])) < 1e-4

    def test_equals_negative_sequence_logprob(self):
        pol = PolicyModel.create("mlp", 6, 3, 4, seed=2)
        for t in texts_for(n=5):
            assert nll_loss(pol, t).loss == pytest.approx(-sequence_logprob(pol, t, t.answer_start), abs=1e-12)


class TestSft:
    pol = PolicyModel.create("mlp", 6, 2, 5, seed=3)

    def test_singleton(self):
        t = texts_for()[0]
        assert sft_loss(self.pol, [t]).loss == nll_loss(self.pol, t).loss

    def test_duplicate(self):
        t = texts_for()[0]
        assert sft_loss(self.pol, [t, t]).loss == pytest.approx(sft_loss(self.pol, [t]).loss, abs=1e-12)

    def test_mean_of_three(self):
        ts = texts_for(n=3, seed=4)
        expected = np.mean([nll_loss(self.pol, t).loss for t in ts])
        assert abs(sft_loss(self.pol, ts).loss - expected) < 1e-12

    def test_permutation_invariant(self):
        ts = texts_for(n=6, seed=5)
        a, b = sft_loss(self.pol, ts), sft_loss(self.pol, ts[::-1])
        assert a.loss == pytest.approx(b.loss, abs=1e-12)
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-14)

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            sft_loss(self.pol, [])


class TestBce:
    def test_half(self):
        assert preference_bce_loss(0.5, 1) == pytest.approx(math.log(2))

    def test_limit(self):
        assert preference_bce_loss(1 - 1e-12, 1) < 1e-11

    @pytest.mark.parametrize("p", [0.1, 0.3, 0.77])
    def test_symmetry(self, p):
        assert preference_bce_loss(p, 1) == pytest.approx(preference_bce_loss(1 - p, 0), abs=1e-15)

    def test_domain(self):
        with pytest.raises(InvalidInputError):
            preference_bce_loss(1.0, 1)
        with pytest.raises(InvalidInputError):
            preference_bce_loss(0.5, 2)


class TestRewardPair:
    pair = PreferencePair(Text((USER, 4, 5, MODEL, 4, 5), 5), Text((USER, 4, 5, MODEL, 4, 4), 5))

    def test_zero_model(self):
        rm = RewardModel.create("mlp", 6, 4, 4, init="zeros")
        assert reward_pair_loss(rm, self.pair).loss == pytest.approx(math.log(2), abs=1e-15)

    def test_large_margin(self):
        rm = RewardModel.create("table", 6, 1, init="zeros")
        # the final token decides the reward
        table = np.zeros(6)
        table[self.pair.winner.tokens[-1]] = 10.0
        rm = rm.with_params(table)
        assert reward_pair_loss(rm, self.pair).loss < 1e-4

    def test_softmax_form(self):
        rm = RewardModel.create("mlp", 6, 4, 4, seed=1)
        rm = rm.with_params(rm.params * 20)
        rw, rl = reward_score(rm, self.pair.winner), reward_score(rm, self.pair.loser)
        softmax_form = -math.log(math.exp(rw) / (math.exp(rw) + math.exp(rl)))
        assert abs(reward_pair_loss(rm, self.pair).loss - softmax_form) < 1e-12
        assert abs(reward_pair_loss_softmax(rw, rl) - softmax_form) < 1e-12

    def test_monotone_in_margin(self):
        rm = RewardModel.create("table", 6, 1, init="zeros")
        w = self.pair.winner.tokens[-1]
        losses = []
        for m in np.linspace(-5, 5, 41):
            table = np.zeros(6)
            table[w] = m
            losses.append(reward_pair_loss(rm.with_params(table), self.pair).loss)
        assert np.all(np.diff(losses) < 0)

    def test_hp_zero_swaps(self):
        rm = RewardModel.create("mlp", 6, 4, 4, seed=2)
        flipped = PreferencePair(self.pair.loser, self.pair.winner, 0)
        a, b = reward_pair_loss(rm, self.pair), reward_pair_loss(rm, flipped)
        assert a.loss == pytest.approx(b.loss, abs=1e-15)

    @pytest.mark.parametrize("arch,k", [("table", 2), ("mlp", 4)])
    def test_fd(self, arch, k):
        rm = RewardModel.create(arch, 6, k, 5, seed=3)
        pairs = synthetic_pairs(Task("copy", 6, 2, 2), 3, 3, make_rng(1))
        assert fd_check(rm, lambda m: reward_pairs_loss(m, pairs)) < 1e-4

    def test_training_improves_accuracy(self):
        task = Task("copy", 8, 1, 2)
        train = synthetic_pairs(task, 40, 3, make_rng(2))
        rm = RewardModel.create("mlp", 8, 4, 16, seed=0)
        before = pair_accuracy(rm, train)
        for _ in range(200):
            rm = rm.with_params(sgd_step(rm.params, reward_pairs_loss(rm, train).grad, 1.0))
        assert pair_accuracy(rm, train) > max(before, 0.9)

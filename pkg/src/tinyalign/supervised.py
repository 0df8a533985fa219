"""Supervised objectives: token NLL, its dataset average, the binary
cross-entropy preference loss, and the pairwise reward-model loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import PreferencePair
from .errors import InvalidInputError
from .model import PolicyModel, RewardModel, Text, answer_starts, contexts, gather
from .numerics import log_sigmoid, sigmoid


@dataclass
class LossReport:
    """A scalar loss, its gradient w.r.t. the trained model, and diagnostics.

    ``sentinel`` is set (and ``loss`` is ``inf``) when the loss could not be
    evaluated meaningfully, e.g. a zero-probability token or an exploding
    importance ratio.  Callers must not step on a sentinel report.
    """

    loss: float
    grad: np.ndarray
    per_token: dict = field(default_factory=dict)
    sentinel: str | None = None

    @classmethod
    def blown(cls, reason: str, size: int, **per_token) -> "LossReport":
        return cls(float("inf"), np.zeros(size), per_token, reason)


def nll_loss(policy: PolicyModel, text: Text, answer_only: bool = True) -> LossReport:
    """``-sum_t log pi(a_t | s_t)`` over the answer (or every token)."""
    return sft_loss(policy, [text], answer_only)


def sft_loss(policy: PolicyModel, dataset: Sequence[Text], answer_only: bool = True) -> LossReport:
    """Mean per-text NLL over ``dataset``."""
    if len(dataset) == 0:
        raise InvalidInputError("dataset is empty")
    tb = gather(dataset, answer_starts(dataset, answer_only), policy.context)
    logp = policy.log_probs(tb.ctx)[np.arange(tb.actions.size), tb.actions]
    if np.any(np.isneginf(logp)):
        return LossReport.blown("zero-probability token", policy.size, logp=logp)
    S = len(dataset)
    nll = -np.bincount(tb.seg, weights=logp, minlength=S)
    g = policy.logp_backward(tb.ctx, tb.actions, np.full(logp.size, -1.0 / S))
    return LossReport(float(nll.sum() / S), g, {"logp": logp, "nll": nll})


def preference_bce_loss(prob_winner: float, hp: int) -> float:
    """``-hp log p - (1 - hp) log(1 - p)``."""
    p = float(prob_winner)
    if not 0.0 < p < 1.0:
        raise InvalidInputError("probability must lie strictly inside (0, 1)")
    if hp not in (0, 1):
        raise InvalidInputError("hp must be 0 or 1")
    return float(-hp * np.log(p) - (1 - hp) * np.log1p(-p))


def _pair_contexts(reward: RewardModel, pairs: Sequence[PreferencePair]):
    texts = [t for p in pairs for t in (p.winner, p.loser)]
    ctx = np.concatenate([contexts(t.tokens, [len(t) + 1], reward.context) for t in texts])
    return ctx


def reward_pairs_loss(reward: RewardModel, pairs: Sequence[PreferencePair]) -> LossReport:
    """Mean of ``-log sigmoid(R_w - R_l)`` over pairs; ``hp=0`` swaps roles."""
    if len(pairs) == 0:
        raise InvalidInputError("no pairs")
    ctx = _pair_contexts(reward, pairs)
    r = reward.forward(ctx)[:, 0].reshape(-1, 2)
    sign = np.array([1.0 if p.hp == 1 else -1.0 for p in pairs])
    margin = sign * (r[:, 0] - r[:, 1])
    n = len(pairs)
    loss = -np.sum(log_sigmoid(margin)) / n
    dmargin = -sigmoid(-margin) / n
    dout = np.stack([sign * dmargin, -sign * dmargin], axis=1).reshape(-1, 1)
    return LossReport(float(loss), reward.backward(ctx, dout), {"margin": margin})


def reward_pair_loss(reward: RewardModel, pair: PreferencePair) -> LossReport:
    return reward_pairs_loss(reward, [pair])


def reward_pair_loss_softmax(r_winner: float, r_loser: float) -> float:
    """Same loss written as ``-log(e^{R_w} / (e^{R_w} + e^{R_l}))``."""
    m = max(r_winner, r_loser)
    return float(-(r_winner - m) + np.log(np.exp(r_winner - m) + np.exp(r_loser - m)))


def pair_accuracy(reward: RewardModel, pairs: Sequence[PreferencePair]) -> float:
    """Share of pairs whose preferred text gets the strictly higher reward."""
    r = reward.forward(_pair_contexts(reward, pairs))[:, 0].reshape(-1, 2)
    sign = np.array([1.0 if p.hp == 1 else -1.0 for p in pairs])
    return float(np.mean(sign * (r[:, 0] - r[:, 1]) > 0))

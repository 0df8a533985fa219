"""Policy-optimization losses over sampled rollouts.

Every loss returns a :class:`~tinyalign.supervised.LossReport` whose gradient
is taken w.r.t. the policy being trained only; sampler, reference and value
models are constants.  Importance ratios are formed as ``exp`` of log-prob
differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .advantage import grpo_advantage, value_baselines
from .data import PreferencePair, SampleGroup
from .errors import InvalidInputError
from .model import PolicyModel, Text, TokenBatch, ValueModel, answer_starts, gather, token_logprobs
from .numerics import kl_rows, log_sigmoid, sigmoid, softmax
from .supervised import LossReport

MAX_LOG_RATIO = 30.0


@dataclass(frozen=True)
class ClipConfig:
    eps: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.eps:
            raise InvalidInputError("eps must be positive")

    @property
    def bounds(self) -> tuple[float, float]:
        return 1.0 - self.eps, 1.0 + self.eps


@dataclass
class RolloutBatch:
    """Sampled texts with rewards and the sampler's cached token log-probs.

    ``sampler_id`` is the fingerprint of the checkpoint that produced
    ``logp_old``; losses refuse a sampler model with a different fingerprint.
    """

    texts: list[Text]
    rewards: np.ndarray
    starts: list[int]
    logp_old: list[np.ndarray]
    sampler_id: str
    _tokens: dict = field(default_factory=dict, repr=False)

    @classmethod
    def collect(cls, sampler: PolicyModel, texts: Sequence[Text], rewards: Sequence[float],
                answer_only: bool = True) -> "RolloutBatch":
        if len(texts) == 0:
            raise InvalidInputError("empty rollout batch")
        if len(rewards) != len(texts):
            raise InvalidInputError("one reward per text")
        starts = answer_starts(texts, answer_only)
        tb = gather(texts, starts, sampler.context)
        flat = sampler.log_probs(tb.ctx)[np.arange(tb.actions.size), tb.actions]
        return cls(list(texts), np.asarray(rewards, dtype=np.float64), starts, tb.split(flat),
                   sampler.fingerprint())

    def __len__(self) -> int:
        return len(self.texts)

    def tokens(self, k: int) -> TokenBatch:
        if k not in self._tokens:
            self._tokens[k] = gather(self.texts, self.starts, k)
        return self._tokens[k]

    @property
    def flat_logp_old(self) -> np.ndarray:
        return np.concatenate(self.logp_old)

    def check_sampler(self, sampler: PolicyModel) -> None:
        if sampler.fingerprint() != self.sampler_id:
            raise InvalidInputError(
                "sampler checkpoint does not match the one that generated this batch"
            )


def _flat_advantages(advantages, tb: TokenBatch) -> np.ndarray:
    if len(advantages) != tb.n_samples:
        raise InvalidInputError("one advantage entry per sample")
    parts = []
    for a, n in zip(advantages, tb.counts):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 0:
            parts.append(np.full(n, float(a)))
        elif a.shape == (n,):
            parts.append(a)
        else:
            raise InvalidInputError(f"advantage array of shape {a.shape} for {n} tokens")
    return np.concatenate(parts)


def _new_logp(policy: PolicyModel, tb: TokenBatch) -> np.ndarray:
    return policy.log_probs(tb.ctx)[np.arange(tb.actions.size), tb.actions]


def reinforce_loss(policy: PolicyModel, batch: RolloutBatch, value: ValueModel | None = None,
                   advantages=None) -> LossReport:
    """``-(1/S) sum_i sum_t (R_i - V(s_it)) log pi(a_it | s_it)``; ``value=None`` is a zero baseline.

    Precomputed per-token ``advantages`` (e.g. with a KL term folded in)
    replace ``R - V`` when given.
    """
    tb = batch.tokens(policy.context)
    if advantages is not None:
        adv = _flat_advantages(advantages, tb)
    else:
        base = (value_baselines(value, batch.tokens(value.context).ctx) if value is not None
                else np.zeros(tb.actions.size))
        adv = batch.rewards[tb.seg] - base
    logp = _new_logp(policy, tb)
    S = len(batch)
    w = -adv / S
    g = policy.logp_backward(tb.ctx, tb.actions, w)
    return LossReport(float(np.sum(w * logp)), g, {"logp": logp, "advantage": adv})


def _ratios(policy: PolicyModel, batch: RolloutBatch):
    tb = batch.tokens(policy.context)
    logp = _new_logp(policy, tb)
    log_ratio = logp - batch.flat_logp_old
    return tb, logp, log_ratio


def ratio_loss(policy_new: PolicyModel, batch: RolloutBatch, advantages) -> LossReport:
    """``-(1/S) sum_i sum_t (pi_new / pi_old)(a_it | s_it) A_it``."""
    tb, logp, log_ratio = _ratios(policy_new, batch)
    if np.max(log_ratio, initial=-np.inf) > MAX_LOG_RATIO:
        return LossReport.blown("importance ratio overflow", policy_new.size, log_ratio=log_ratio)
    adv = _flat_advantages(advantages, tb)
    r = np.exp(log_ratio)
    S = len(batch)
    w = -r * adv / S
    g = policy_new.logp_backward(tb.ctx, tb.actions, w)
    return LossReport(float(np.sum(w)), g, {"ratio": r, "advantage": adv, "logp": logp})


def _token_kl(policy_new: PolicyModel, policy_old: PolicyModel, tb: TokenBatch):
    logp_new = policy_new.log_probs(tb.ctx)
    logp_old = policy_old.log_probs(tb.ctx)
    return kl_rows(logp_old, logp_new), logp_new, logp_old


def trpo_loss(policy_new: PolicyModel, policy_old: PolicyModel, batch: RolloutBatch, advantages,
              beta: float = 0.1) -> LossReport:
    """Ratio loss plus ``beta`` times the mean per-token KL(pi_old || pi_new),
    summed exactly over the vocabulary."""
    if beta < 0:
        raise InvalidInputError("beta must be >= 0")
    batch.check_sampler(policy_old)
    base = ratio_loss(policy_new, batch, advantages)
    if base.sentinel:
        return base
    tb = batch.tokens(policy_new.context)
    kl, logp_new, logp_old = _token_kl(policy_new, policy_old, tb)
    n = kl.size
    # d KL(p_old || p_new) / d logits_new = p_new - p_old
    dlogits = beta / n * (np.exp(logp_new) - np.exp(logp_old))
    g_kl = policy_new.backward(tb.ctx, dlogits)
    return LossReport(base.loss + beta * float(kl.mean()), base.grad + g_kl,
                      {**base.per_token, "kl": kl})


class ConstraintReport(NamedTuple):
    mean_kl: float
    max_kl: float
    satisfied: bool
    delta: float

    @property
    def satisfied_max(self) -> bool:
        """The strict per-token form of the constraint."""
        return self.max_kl <= self.delta


def trpo_constraint_report(policy_new: PolicyModel, policy_old: PolicyModel, batch: RolloutBatch,
                           delta: float) -> ConstraintReport:
    """Mean and max per-token KL(pi_old || pi_new); ``satisfied`` uses the mean."""
    tb = batch.tokens(policy_new.context)
    kl, _, _ = _token_kl(policy_new, policy_old, tb)
    mean, mx = float(kl.mean()), float(kl.max())
    return ConstraintReport(mean, mx, mean <= delta, delta)


def ppo_terms(ratio: np.ndarray, adv: np.ndarray, eps: float):
    """Per-token clipped objective, its derivative w.r.t. log pi_new, and the
    mask of tokens where the clipped branch wins."""
    lo, hi = ClipConfig(eps).bounds
    unclipped = ratio * adv
    clipped = np.clip(ratio, lo, hi) * adv
    use_clip = clipped < unclipped
    term = np.where(use_clip, clipped, unclipped)
    dterm = np.where(use_clip, 0.0, unclipped)
    return term, dterm, use_clip


def ppo_loss(policy_new: PolicyModel, policy_sampler: PolicyModel, batch: RolloutBatch, advantages,
             eps: float = 0.2) -> LossReport:
    """``-(1/S) sum_i sum_t min(r A, clip(r, 1-eps, 1+eps) A)``."""
    batch.check_sampler(policy_sampler)
    tb, logp, log_ratio = _ratios(policy_new, batch)
    if np.max(log_ratio, initial=-np.inf) > MAX_LOG_RATIO:
        return LossReport.blown("importance ratio overflow", policy_new.size, log_ratio=log_ratio)
    adv = _flat_advantages(advantages, tb)
    r = np.exp(log_ratio)
    term, dterm, use_clip = ppo_terms(r, adv, eps)
    S = len(batch)
    g = policy_new.logp_backward(tb.ctx, tb.actions, -dterm / S)
    return LossReport(float(-term.sum() / S), g,
                      {"ratio": r, "advantage": adv, "logp": logp, "clipped": use_clip})


def groups_to_batch(groups: Sequence[SampleGroup], policy_sampler: PolicyModel,
                    answer_only: bool = True) -> RolloutBatch:
    """Flatten groups in order, reusing cached sampler log-probs when present."""
    texts = [t for g in groups for t in g.responses]
    rewards = [r for g in groups for r in g.rewards]
    if all(g.logp_old is not None for g in groups):
        sid = policy_sampler.fingerprint()
        if any(g.sampler_id != sid for g in groups):
            raise InvalidInputError("groups were sampled from a different checkpoint")
        logp = [lp for g in groups for lp in g.logp_old]
        return RolloutBatch(texts, np.asarray(rewards, dtype=np.float64),
                            answer_starts(texts, answer_only), logp, sid)
    return RolloutBatch.collect(policy_sampler, texts, rewards, answer_only)


def group_advantages(groups: Sequence[SampleGroup]) -> list[float]:
    return [float(a) for g in groups for a in grpo_advantage(g.rewards)]


def grpo_loss(policy_new: PolicyModel, policy_sampler: PolicyModel, groups: Sequence[SampleGroup],
              eps: float = 0.2, batch: RolloutBatch | None = None) -> LossReport:
    """PPO loss with each response's group-relative advantage on all its tokens.

    Normalized by the total response count ``QG``; no per-length division.
    """
    if batch is None:
        batch = groups_to_batch(groups, policy_sampler)
    return ppo_loss(policy_new, policy_sampler, batch, group_advantages(groups), eps)


def dpo_pairs_loss(policy_new: PolicyModel, policy_ref: PolicyModel, pairs: Sequence[PreferencePair],
                   beta: float = 0.1) -> LossReport:
    """Mean DPO loss ``-log sigmoid(beta (log-ratio_w - log-ratio_l))`` over pairs,
    with sequence log-probs over answer tokens."""
    if len(pairs) == 0:
        raise InvalidInputError("no pairs")
    texts = []
    for p in pairs:
        w, l = (p.winner, p.loser) if p.hp == 1 else (p.loser, p.winner)
        texts += [w, l]
    starts = answer_starts(texts)
    tb = gather(texts, starts, policy_new.context)
    logp = _new_logp(policy_new, tb)
    tb_ref = gather(texts, starts, policy_ref.context)
    logp_ref = policy_ref.log_probs(tb_ref.ctx)[np.arange(tb_ref.actions.size), tb_ref.actions]
    n_texts = len(texts)
    seq = np.bincount(tb.seg, weights=logp, minlength=n_texts)
    seq_ref = np.bincount(tb_ref.seg, weights=logp_ref, minlength=n_texts)
    delta = (seq - seq_ref).reshape(-1, 2)
    z = beta * (delta[:, 0] - delta[:, 1])
    n = len(pairs)
    loss = -np.sum(log_sigmoid(z)) / n
    dz = -sigmoid(-z) / n
    dseq = np.stack([beta * dz, -beta * dz], axis=1).reshape(-1)
    g = policy_new.logp_backward(tb.ctx, tb.actions, dseq[tb.seg])
    return LossReport(float(loss), g, {"z": z, "logp": logp})


def dpo_loss(policy_new: PolicyModel, policy_ref: PolicyModel, pair: PreferencePair,
             beta: float = 0.1) -> LossReport:
    return dpo_pairs_loss(policy_new, policy_ref, [pair], beta)


def alt_grape_loss(policy_new: PolicyModel, policy_sampler: PolicyModel, groups: Sequence[SampleGroup],
                   eps: float = 0.2, batch: RolloutBatch | None = None) -> LossReport:
    """Clipping applied to whole-sequence ratios ``pi_new(text) / pi_sampler(text)``."""
    if batch is None:
        batch = groups_to_batch(groups, policy_sampler)
    batch.check_sampler(policy_sampler)
    tb, logp, log_ratio = _ratios(policy_new, batch)
    S = len(batch)
    seq_log_ratio = np.bincount(tb.seg, weights=log_ratio, minlength=S)
    if np.max(np.abs(seq_log_ratio)) > MAX_LOG_RATIO:
        return LossReport.blown("sequence ratio overflow", policy_new.size, seq_log_ratio=seq_log_ratio)
    adv = np.asarray(group_advantages(groups))
    r = np.exp(seq_log_ratio)
    term, dterm, use_clip = ppo_terms(r, adv, eps)
    g = policy_new.logp_backward(tb.ctx, tb.actions, (-dterm / S)[tb.seg])
    return LossReport(float(-term.sum() / S), g,
                      {"ratio": r, "advantage": adv, "logp": logp, "clipped": use_clip})


def sequence_logprobs(policy: PolicyModel, texts: Sequence[Text]) -> np.ndarray:
    """Answer-region log-probability of each text."""
    return np.array([token_logprobs(policy, t, t.answer_start).sum() for t in texts])


def mean_entropy(policy: PolicyModel, tb: TokenBatch) -> float:
    p = softmax(policy.forward(tb.ctx))
    return float(-np.sum(p * np.log(np.where(p > 0, p, 1.0)), axis=1).mean())

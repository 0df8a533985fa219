"""Baselines and advantages.

``basic_advantage`` is reward minus a value baseline (generalized advantage
estimation with discount and trace parameters both fixed at one).
``grpo_advantage`` replaces the learned baseline with the mean reward of the
responses generated for the same question.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import BudgetError, InvalidInputError
from .model import EOS, PolicyModel, ValueModel, contexts, sample_batch
from .numerics import softmax

ENUMERATION_BUDGET = 1_000_000

RewardFn = Callable[[Sequence[int]], float]


@dataclass(frozen=True)
class KlPenaltyConfig:
    """``beta`` scales ``log(pi_sampler / pi_ref)`` subtracted from each token's reward.

    The reference is always the frozen starting checkpoint; the ratio numerator
    is the checkpoint that generated the samples.
    """

    beta: float = 0.0
    reference_id: str = ""
    sampler_id: str = ""

    def __post_init__(self):
        if not self.beta >= 0:
            raise InvalidInputError("beta must be >= 0")


def _step_probs(policy: PolicyModel, prefixes: list[list[int]]) -> np.ndarray:
    ctx = np.concatenate([contexts(p, [len(p) + 1], policy.context) for p in prefixes])
    return softmax(policy.forward(ctx))


def exact_value(policy: PolicyModel, prefix: Sequence[int], reward_fn: RewardFn,
                horizon: int) -> float:
    """Expected reward of every continuation of up to ``horizon`` tokens.

    Continuations stop early at the end token, exactly as sampling does.
    """
    if horizon < 0:
        raise InvalidInputError("horizon must be >= 0")
    need = policy.vocab_size**horizon
    if need > ENUMERATION_BUDGET:
        raise BudgetError(f"enumeration needs {need} leaves, budget is {ENUMERATION_BUDGET}")
    total = 0.0
    frontier = [(list(prefix), 1.0)]
    for _ in range(horizon):
        if not frontier:
            break
        probs = _step_probs(policy, [f[0] for f in frontier])
        nxt = []
        for (seq, w), row in zip(frontier, probs):
            for tok, p in enumerate(row):
                if tok == EOS:
                    total += w * p * reward_fn(seq + [tok])
                else:
                    nxt.append((seq + [tok], w * p))
        frontier = nxt
    for seq, w in frontier:
        total += w * reward_fn(seq)
    return float(total)


def mc_value(policy: PolicyModel, prefix: Sequence[int], reward_fn: RewardFn, n: int,
             rng: np.random.Generator, horizon: int) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of rollout rewards from ``prefix``."""
    if n < 2:
        raise InvalidInputError("need at least two rollouts")
    if horizon == 0:
        r = float(reward_fn(list(prefix)))
        return r, 0.0
    texts = sample_batch(policy, [tuple(prefix)] * n, 1.0, horizon, rng)
    rewards = np.array([reward_fn(t.tokens) for t in texts], dtype=np.float64)
    if np.all(rewards == rewards[0]):
        return float(rewards[0]), 0.0
    return float(rewards.mean()), float(rewards.std(ddof=1) / np.sqrt(n))


def basic_advantage(R_text, V_baseline):
    """``R(text) - V(s_t)``; broadcasts over per-token baselines."""
    out = np.asarray(R_text, dtype=np.float64) - np.asarray(V_baseline, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def value_baselines(value: ValueModel | None, tb_ctx: np.ndarray) -> np.ndarray:
    """Per-token baselines; ``None`` means the zero baseline."""
    if value is None:
        return np.zeros(tb_ctx.shape[0])
    return value.forward(tb_ctx)[:, 0]


def kl_penalized_reward(base_reward, logp1, logp0, beta: float):
    """``R - beta * (log pi_1 - log pi_0)`` per token."""
    if beta < 0:
        raise InvalidInputError("beta must be >= 0")
    out = np.asarray(base_reward, dtype=np.float64) - beta * (
        np.asarray(logp1, dtype=np.float64) - np.asarray(logp0, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def grpo_advantage(rewards: Sequence[float]) -> np.ndarray:
    """Each reward minus the group mean."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 1:
        raise InvalidInputError("need a non-empty reward list")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return r - r.mean()

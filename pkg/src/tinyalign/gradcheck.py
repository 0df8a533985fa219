"""Finite-difference conformance suite for every differentiable loss.

Each case builds small models (lookup table and one-hidden-layer MLP, at most
500 parameters), a seeded batch of sampled texts, and compares the analytic
gradient against central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import SampleGroup, Task, gen_prompts, make_preference_pairs, corrupt_answer
from .model import Network, PolicyModel, RewardModel, ValueModel, sample_batch
from .numerics import fd_gradient, make_rng, relative_error
from .policygrad import (RolloutBatch, alt_grape_loss, dpo_pairs_loss, grpo_loss, ppo_loss, ratio_loss,
                         reinforce_loss, trpo_loss)
from .supervised import nll_loss, reward_pairs_loss, sft_loss
from .trainer import value_regression

TOL = 1e-4
FD_STEP = 1e-5
MAX_PARAMS = 500
LOSSES = ("nll", "sft", "reinforce", "reward-pair", "ratio", "trpo", "ppo", "grpo", "alt-grape", "dpo",
          "value-regression")
ARCHS = {"table": dict(context=2, hidden=0), "mlp": dict(context=2, hidden=8)}


@dataclass
class CheckResult:
    loss: str
    arch: str
    seed: int
    n_params: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOL


def _perturbed(model: Network, rng, scale: float = 0.5) -> Network:
    return model.with_params(model.params + rng.normal(0.0, scale, model.size))


def _case(loss: str, arch: str, seed: int) -> tuple[Network, Callable[[Network], object]]:
    """The trained model and a closure mapping a model to its LossReport."""
    rng = make_rng(seed, 11)
    task = Task("copy", vocab_size=6, prompt_len=2, answer_len=2, seed=seed)
    kw = ARCHS[arch]
    V = task.vocab_size
    sampler = _perturbed(PolicyModel.create(arch, V, seed=seed, **kw), rng)
    new = _perturbed(sampler, rng, 0.3)
    prompts = gen_prompts(task, 4, rng)
    texts = sample_batch(sampler, prompts, 1.0, task.answer_len, rng)
    rewards = rng.uniform(0.0, 1.0, len(texts))
    batch = RolloutBatch.collect(sampler, texts, rewards)
    advantages = [rng.normal(size=len(lp)) for lp in batch.logp_old]

    if loss in ("nll", "sft"):
        data = [task.reference_text(p) for p in prompts]
        if loss == "nll":
            return new, lambda m: nll_loss(m, data[0])
        return new, lambda m: sft_loss(m, data)
    if loss == "reinforce":
        value = _perturbed(ValueModel.create(arch, V, seed=seed + 1, **kw), rng)
        return new, lambda m: reinforce_loss(m, batch, value)
    if loss == "value-regression":
        value = _perturbed(ValueModel.create(arch, V, seed=seed + 1, **kw), rng)
        return value, lambda m: value_regression(m, batch)
    if loss == "ratio":
        return new, lambda m: ratio_loss(m, batch, advantages)
    if loss == "trpo":
        return new, lambda m: trpo_loss(m, sampler, batch, advantages, beta=0.5)
    if loss == "ppo":
        # small eps so both branches occur
        return new, lambda m: ppo_loss(m, sampler, batch, advantages, eps=0.05)
    if loss in ("grpo", "alt-grape"):
        G = 3
        flat = [p for p in prompts[:2] for _ in range(G)]
        resp = sample_batch(sampler, flat, 1.0, task.answer_len, rng)
        r = rng.uniform(0.0, 1.0, len(resp))
        groups = [SampleGroup(q, resp[q * G:(q + 1) * G], list(r[q * G:(q + 1) * G])) for q in range(2)]
        fn = grpo_loss if loss == "grpo" else alt_grape_loss
        return new, lambda m: fn(m, sampler, groups, 0.05)
    if loss == "dpo":
        ref = sampler
        cands = [corrupt_answer(task, p, int(w), rng) for p in prompts for w in (0, 1, 2)]
        pairs = make_preference_pairs(task, cands, rng)[:4]
        return new, lambda m: dpo_pairs_loss(m, ref, pairs, beta=0.7)
    if loss == "reward-pair":
        ctx = {"table": dict(context=2, hidden=0), "mlp": dict(context=3, hidden=8)}[arch]
        reward = _perturbed(RewardModel.create(arch, V, seed=seed + 2, **ctx), rng)
        cands = [corrupt_answer(task, p, int(w), rng) for p in prompts for w in (0, 1, 2)]
        pairs = make_preference_pairs(task, cands, rng)[:5]
        return reward, lambda m: reward_pairs_loss(m, pairs)
    raise KeyError(loss)


def check(loss: str, arch: str, seed: int) -> CheckResult:
    model, fn = _case(loss, arch, seed)
    if model.size > MAX_PARAMS:
        raise AssertionError(f"{loss}/{arch} model has {model.size} parameters")
    analytic = fn(model).grad
    numeric = fd_gradient(lambda th: fn(model.with_params(th)).loss, model.params, FD_STEP)
    err = float(np.max(relative_error(analytic, numeric)))
    return CheckResult(loss, arch, seed, model.size, err)


def run_suite(seeds=(0, 1, 2)) -> list[CheckResult]:
    return [check(loss, arch, s) for loss in LOSSES for arch in ARCHS for s in seeds]


def format_table(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'loss':<18}{'arch':<7}{'seed':>5}{'params':>8}{'max rel err':>14}  result"]
    for r in results:
        lines.append(f"{r.loss:<18}{r.arch:<7}{r.seed:>5}{r.n_params:>8}{r.max_rel_err:>14.2e}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    n_ok = sum(r.passed for r in results)
    tail = f"{n_ok}/{len(results)} passed"
    if elapsed is not None:
        tail += f" in {elapsed:.1f}s"
    return "\n".join(lines + [tail])


if __name__ == "__main__":
    t0 = time.perf_counter()
    res = run_suite()
    print(format_table(res, time.perf_counter() - t0))

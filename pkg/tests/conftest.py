import numpy as np
import pytest

from tinyalign.data import Task, gen_prompts
from tinyalign.model import PolicyModel, contexts, sample_batch
from tinyalign.numerics import fd_gradient, make_rng, relative_error
from tinyalign.policygrad import RolloutBatch


def table_policy(V, k, rows=None, seed=0, init="zeros"):
    """Lookup-table policy; ``rows`` maps a context tuple to a logit vector."""
    pol = PolicyModel.create("table", V, k, seed=seed, init=init)
    if rows:
        table = pol.params.reshape(V**k, V).copy()
        for ctx, logits in rows.items():
            table[int(np.dot(ctx, V ** np.arange(k - 1, -1, -1)))] = logits
        pol = pol.with_params(table.ravel())
    return pol


def row_of(model, ctx):
    return int(np.dot(ctx, model.vocab_size ** np.arange(model.context - 1, -1, -1)))


def fd_check(model, loss_fn):
    analytic = loss_fn(model).grad
    numeric = fd_gradient(lambda th: loss_fn(model.with_params(th)).loss, model.params)
    return float(np.max(relative_error(analytic, numeric)))


@pytest.fixture
def task():
    return Task("copy", vocab_size=6, prompt_len=2, answer_len=2, seed=0)


@pytest.fixture
def rollout(task):
    """A sampler, a perturbed new policy and a batch sampled from the sampler."""
    rng = make_rng(3)
    sampler = PolicyModel.create("mlp", task.vocab_size, 2, 6, seed=1)
    sampler = sampler.with_params(sampler.params + rng.normal(0, 0.5, sampler.size))
    new = sampler.with_params(sampler.params + rng.normal(0, 0.3, sampler.size))
    texts = sample_batch(sampler, gen_prompts(task, 3, rng), 1.0, task.answer_len, rng)
    batch = RolloutBatch.collect(sampler, texts, rng.uniform(0, 1, len(texts)))
    adv = [rng.normal(size=len(lp)) for lp in batch.logp_old]
    return sampler, new, batch, adv


__all__ = ["table_policy", "row_of", "fd_check", "contexts"]

"""Training pipelines: SFT, rejection sampling, reward modeling, DPO and the
on-policy RL loop (REINFORCE, TRPO, PPO, GRPO, GRAPE).

Every pipeline is a sequence of numbered steps over a :class:`Checkpoint`.
A checkpoint holds every model, optimizer buffer and the RNG state, so a run
resumed from step ``n`` reproduces the uninterrupted run byte for byte.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import grape as grape_mod
from .advantage import basic_advantage, kl_penalized_reward, value_baselines
from .data import SampleGroup, Task, gen_prompts, load_dataset, synthetic_pairs, true_reward
from .errors import ConfigError, InvalidInputError, NumericalError
from .model import (MODEL, Network, PolicyModel, RewardModel, Text, ValueModel, answer_starts, gather,
                    reward_score, sample_batch)
from .numerics import kl_rows, make_rng
from .policygrad import (RolloutBatch, alt_grape_loss, dpo_pairs_loss, grpo_loss,
                         mean_entropy, ppo_loss, reinforce_loss, trpo_constraint_report,
                         trpo_loss)
from .supervised import LossReport, pair_accuracy, reward_pairs_loss, sft_loss

log = logging.getLogger(__name__)

ALGORITHMS = ("sft", "rejection", "reward", "reinforce", "trpo", "ppo", "grpo", "dpo", "grape")
RL_ALGORITHMS = ("reinforce", "trpo", "ppo", "grpo", "grape")
METRIC_COLUMNS = ("step", "loss", "mean_reward", "mean_kl_ref", "clip_fraction", "entropy", "accuracy")


@dataclass
class TrainConfig:
    algorithm: str = "ppo"
    # task
    task: str = "copy"
    vocab_size: int = 16
    prompt_len: int = 2
    answer_len: int = 3
    # networks
    arch: str = "mlp"
    context: int = 5
    hidden: int = 32
    reward_context: int = 7
    reward_hidden: int = 32
    # optimization
    lr: float = 0.5
    value_lr: float = 1.0
    momentum: float = 0.0
    iterations: int = 200
    batch_size: int = 32
    group_size: int = 8
    updates_per_batch: int = 1
    eps: float = 0.2
    beta: float = 0.1
    kl_coef: float = 0.0
    delta: float = 0.01
    temperature: float = 1.0
    answer_only: bool = True
    # pipeline-specific
    n_train: int = 64
    n_eval: int = 64
    pairs_per_prompt: int = 4
    sft_steps: int = 20
    grape_loss: str = "grpo"
    iterate_prob: float = 0.0
    rubric: str | None = None
    dataset: str | None = None
    init_checkpoint: str | None = None
    reward_checkpoint: str | None = None
    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 10
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        positive = ("vocab_size", "prompt_len", "answer_len", "context", "hidden", "reward_context",
                    "reward_hidden", "iterations", "batch_size", "group_size", "updates_per_batch",
                    "n_train", "n_eval", "pairs_per_prompt", "sft_steps", "eval_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr", "value_lr", "beta", "kl_coef", "delta", "checkpoint_every", "iterate_prob"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not 0 < self.eps:
            raise ConfigError("eps must be > 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.iterate_prob > 1:
            raise ConfigError("iterate_prob must be <= 1")
        if self.algorithm == "rejection" and self.group_size < 2:
            raise ConfigError("rejection sampling needs group_size >= 2")
        if self.grape_loss not in ("grpo", "alt"):
            raise ConfigError("grape_loss must be 'grpo' or 'alt'")
        if self.context > 8 or self.reward_context > 8:
            raise ConfigError("context windows are limited to 8 tokens")

    # construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {k: _coerce(k, v) for k, v in d.items()}
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def with_overrides(self, overrides: Sequence[str]) -> "TrainConfig":
        d = dataclasses.asdict(self)
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            if key not in d:
                raise ConfigError(f"unknown config key {key!r}")
            d[key] = _parse_value(key, raw)
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def task_spec(self) -> Task:
        try:
            return Task(self.task, self.vocab_size, self.prompt_len, self.answer_len, self.seed)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc


_HINTS = typing.get_type_hints(TrainConfig)


def _field_types(name: str) -> tuple[type, bool]:
    hint = _HINTS[name]
    args = typing.get_args(hint)
    if args and type(None) in args:
        return next(a for a in args if a is not type(None)), True
    return hint, False


def _coerce(name: str, value):
    typ, optional = _field_types(name)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{name} may not be null")
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        if not np.isfinite(value):
            raise ConfigError(f"{name} must be finite")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string")
    return value


def _parse_value(name: str, raw: str):
    typ, optional = _field_types(name)
    if optional and raw.lower() in ("none", "null", ""):
        return None
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None
    return raw


# ---------------------------------------------------------------------------
# optimizer and checkpoints


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float, step: int | None = None) -> np.ndarray:
    """``params - lr * grad``; refuses non-finite gradients."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(params):
        raise InvalidInputError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grad)):
        where = "" if step is None else f" at step {step}"
        raise NumericalError(f"non-finite gradient{where}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(params, dtype=np.float64) - lr * grad
    if not np.all(np.isfinite(out)):
        where = "" if step is None else f" at step {step}"
        raise NumericalError(f"parameters overflowed{where}")
    return out


class SGD:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, lr: float, momentum: float = 0.0, velocity: np.ndarray | None = None):
        self.lr = lr
        self.momentum = momentum
        self.velocity = velocity

    def step(self, model: Network, grad: np.ndarray, step: int | None = None) -> Network:
        if self.momentum == 0.0:
            return model.with_params(sgd_step(model.params, grad, self.lr, step))
        if self.velocity is None:
            self.velocity = np.zeros(model.size)
        # validate before touching the buffer
        sgd_step(model.params, grad, 0.0, step)
        self.velocity = self.momentum * self.velocity + grad
        return model.with_params(model.params - self.lr * self.velocity)


@dataclass
class Checkpoint:
    """Everything needed to continue a run exactly."""

    step: int
    policy: PolicyModel | None = None
    value: ValueModel | None = None
    reward: RewardModel | None = None
    reference: PolicyModel | None = None
    rng_state: dict | None = None
    velocity: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    MODELS = ("policy", "value", "reward", "reference")

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for name in self.MODELS:
            m = getattr(self, name)
            if m is not None:
                m.save(path / f"{name}.json")
        state = {"step": self.step, "rng_state": self.rng_state,
                 "velocity": {k: v.tolist() for k, v in self.velocity.items() if v is not None},
                 "extra": self.extra}
        (path / "state.json").write_text(json.dumps(state))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not (path / "state.json").exists():
            raise ConfigError(f"{path} is not a checkpoint directory")
        state = json.loads((path / "state.json").read_text())
        models = {name: Network.load(path / f"{name}.json")
                  for name in cls.MODELS if (path / f"{name}.json").exists()}
        return cls(state["step"], rng_state=state["rng_state"],
                   velocity={k: np.array(v, dtype=np.float64) for k, v in state["velocity"].items()},
                   extra=state.get("extra", {}), **models)


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


# ---------------------------------------------------------------------------
# building blocks


def rank_groups(policy: PolicyModel, prompts: Sequence, G: int, selector: Callable[[Text], float],
                temperature: float, rng: np.random.Generator, max_len: int):
    """Sample ``G`` completions per prompt; return (best per prompt, the rest)."""
    if G < 2:
        raise InvalidInputError("rejection sampling needs G >= 2")
    kept, rejected = [], []
    for prompt in prompts:
        texts = sample_batch(policy, [prompt] * G, temperature, max_len, rng)
        scores = [selector(t) for t in texts]
        best = int(np.argmax(scores))
        kept.append(texts[best])
        rejected.extend(t for i, t in enumerate(texts) if i != best)
    return kept, rejected


def rejection_round(policy: PolicyModel, prompts: Sequence, G: int, selector: Callable[[Text], float],
                    temperature: float, rng: np.random.Generator, max_len: int = 8) -> list[Text]:
    """Keep the top-scoring of ``G`` sampled completions for every prompt."""
    return rank_groups(policy, prompts, G, selector, temperature, rng, max_len)[0]


def value_regression(value: ValueModel, batch: RolloutBatch) -> LossReport:
    """``0.5 * mean_t (V(s_t) - R)^2`` over scored tokens."""
    tb = batch.tokens(value.context)
    pred = value.forward(tb.ctx)[:, 0]
    err = pred - batch.rewards[tb.seg]
    n = err.size
    return LossReport(float(0.5 * np.mean(err**2)), value.backward(tb.ctx, (err / n)[:, None]))


def kl_to_reference(policy: PolicyModel, reference: PolicyModel, ctx: np.ndarray) -> float:
    """Mean over contexts of KL(pi || pi_ref), summed over the vocabulary."""
    return float(kl_rows(policy.log_probs(ctx), reference.log_probs(ctx)).mean())


def evaluate(policy: PolicyModel, reference: PolicyModel | None, task: Task, n: int,
             rng: np.random.Generator, temperature: float = 1.0) -> dict:
    """Mean true reward of sampled answers and mean KL to ``reference``."""
    prompts = gen_prompts(task, n, rng)
    texts = sample_batch(policy, prompts, temperature, task.answer_len, rng)
    out = {"mean_reward": float(np.mean([true_reward(task, t) for t in texts]))}
    if reference is not None:
        batch = RolloutBatch.collect(policy, texts, np.zeros(len(texts)))
        out["mean_kl_ref"] = kl_to_reference(policy, reference, batch.tokens(policy.context).ctx)
    return out


def _check(report: LossReport, step: int) -> LossReport:
    if report.sentinel:
        raise NumericalError(f"step {step}: {report.sentinel}")
    if not np.isfinite(report.loss):
        raise NumericalError(f"step {step}: non-finite loss")
    return report


def _row(step, loss=None, mean_reward=None, mean_kl_ref=None, clip_fraction=None, entropy=None,
         accuracy=None) -> dict:
    return {"step": step, "loss": loss, "mean_reward": mean_reward, "mean_kl_ref": mean_kl_ref,
            "clip_fraction": clip_fraction, "entropy": entropy, "accuracy": accuracy}


# ---------------------------------------------------------------------------
# one RL iteration


def _rewards(texts: Sequence[Text], task: Task, reward_model: RewardModel | None) -> np.ndarray:
    if reward_model is None:
        return np.array([true_reward(task, t) for t in texts])
    return np.array([reward_score(reward_model, t) for t in texts])


def iterate_prompt(prompt: Sequence[int], previous_answer: Sequence[int]) -> tuple[int, ...]:
    """Prompt asking for a revision of a previous answer:
    ``<USER> content <MODEL> previous <MODEL>``."""
    return tuple(prompt) + tuple(previous_answer) + (MODEL,)


def _make_groups(sampler: PolicyModel, prompts, cfg: TrainConfig, task: Task, rng, reward_model,
                 prev_answers: dict | None):
    gen = []
    for prompt in prompts:
        key = json.dumps(list(prompt))
        if prev_answers is not None and key in prev_answers and rng.random() < cfg.iterate_prob:
            gen.append(iterate_prompt(prompt, prev_answers[key]))
        else:
            gen.append(tuple(prompt))
    flat = [p for p in gen for _ in range(cfg.group_size)]
    texts = sample_batch(sampler, flat, cfg.temperature, task.answer_len, rng)
    return [texts[q * cfg.group_size:(q + 1) * cfg.group_size] for q in range(len(prompts))]


def rl_iteration(algorithm: str, sampler_ckpt: Checkpoint, reference: PolicyModel, prompts: Sequence,
                 config: TrainConfig, rng: np.random.Generator,
                 reward_model: RewardModel | None = None) -> tuple[Checkpoint, dict]:
    """Sample from the current policy, compute advantages, apply up to
    ``updates_per_batch`` gradient steps, and return the next checkpoint."""
    if algorithm not in RL_ALGORITHMS:
        raise ConfigError(f"{algorithm!r} is not an RL algorithm")
    cfg, task = config, config.task_spec
    sampler = sampler_ckpt.policy
    step = sampler_ckpt.step + 1
    opt = SGD(cfg.lr, cfg.momentum, sampler_ckpt.velocity.get("policy"))
    vopt = SGD(cfg.value_lr, cfg.momentum, sampler_ckpt.velocity.get("value"))
    value = sampler_ckpt.value
    extra = dict(sampler_ckpt.extra)

    if algorithm in ("grpo", "grape"):
        prev = extra.setdefault("prev_answers", {}) if algorithm == "grape" else None
        text_groups = _make_groups(sampler, prompts, cfg, task, rng, reward_model, prev)
        flat = [t for g in text_groups for t in g]
        true_r = np.array([true_reward(task, t) for t in flat])
        if algorithm == "grpo":
            rewards = _rewards(flat, task, reward_model)
        else:
            registry = (grape_mod.RubricRegistry.load(cfg.rubric) if cfg.rubric
                        else grape_mod.default_registry(task.kind))
            scores = [[grape_mod.score_response(t, it, task.target(t)) for it in registry.items(task.kind)]
                      for t in flat]
            rewards, notes = grape_mod.grape_rewards(scores, [task.kind] * len(flat), registry)
            for note in notes:
                log.warning("step %d: %s", step, note)
        batch = RolloutBatch.collect(sampler, flat, rewards, cfg.answer_only)
        G = cfg.group_size
        groups = [SampleGroup(q, list(g), list(rewards[q * G:(q + 1) * G]), task.kind,
                              batch.logp_old[q * G:(q + 1) * G], batch.sampler_id)
                  for q, g in enumerate(text_groups)]
        if prev is not None:
            for prompt, g, q in zip(prompts, text_groups, range(len(prompts))):
                best = int(np.argmax(rewards[q * G:(q + 1) * G]))
                prev[json.dumps(list(prompt))] = list(g[best].answer)
        loss_fn = alt_grape_loss if (algorithm == "grape" and cfg.grape_loss == "alt") else grpo_loss
        policy, first, clipped = sampler, None, []
        for _ in range(cfg.updates_per_batch):
            rep = _check(loss_fn(policy, sampler, groups, cfg.eps, batch=batch), step)
            first = rep if first is None else first
            clipped.append(np.mean(rep.per_token["clipped"]))
            policy = opt.step(policy, rep.grad, step)
        clip = float(np.mean(clipped))
    else:
        texts = sample_batch(sampler, prompts, cfg.temperature, task.answer_len, rng)
        true_r = np.array([true_reward(task, t) for t in texts])
        rewards = _rewards(texts, task, reward_model)
        batch = RolloutBatch.collect(sampler, texts, rewards, cfg.answer_only)
        tb = batch.tokens(sampler.context)
        logp_ref = reference.log_probs(tb.ctx)[np.arange(tb.actions.size), tb.actions]
        per_tok_r = kl_penalized_reward(batch.rewards[tb.seg], batch.flat_logp_old, logp_ref, cfg.kl_coef)
        # baseline frozen for the whole round
        base = value_baselines(value, batch.tokens(value.context).ctx)
        advantages = tb.split(basic_advantage(per_tok_r, base))
        policy, first, clipped = sampler, None, []
        for _ in range(cfg.updates_per_batch):
            if algorithm == "reinforce":
                rep = _check(reinforce_loss(policy, batch, advantages=advantages), step)
                policy = opt.step(policy, rep.grad, step)
            elif algorithm == "ppo":
                rep = _check(ppo_loss(policy, sampler, batch, advantages, cfg.eps), step)
                clipped.append(np.mean(rep.per_token["clipped"]))
                policy = opt.step(policy, rep.grad, step)
            else:
                rep = _check(trpo_loss(policy, sampler, batch, advantages, cfg.beta), step)
                policy = _trpo_update(policy, sampler, batch, rep.grad, cfg, step)
            first = rep if first is None else first
            vrep = _check(value_regression(value, batch), step)
            value = vopt.step(value, vrep.grad, step)
        clip = float(np.mean(clipped)) if clipped else None

    ctx = batch.tokens(sampler.context).ctx
    row = _row(step, first.loss, float(true_r.mean()), kl_to_reference(sampler, reference, ctx), clip,
               mean_entropy(sampler, batch.tokens(sampler.context)))
    velocity = {"policy": opt.velocity, "value": vopt.velocity}
    ckpt = Checkpoint(step, policy, value, sampler_ckpt.reward, reference, None,
                      {k: v for k, v in velocity.items() if v is not None}, extra)
    return ckpt, row


def _trpo_update(policy: PolicyModel, sampler: PolicyModel, batch: RolloutBatch, g: np.ndarray,
                 cfg: TrainConfig, step: int) -> PolicyModel:
    """Gradient step on the penalty objective, halved up to 10 times until the
    mean-KL constraint holds; rejected entirely otherwise."""
    scale = 1.0
    for _ in range(11):
        cand = policy.with_params(sgd_step(policy.params, g, cfg.lr * scale, step))
        if trpo_constraint_report(cand, sampler, batch, cfg.delta).satisfied:
            return cand
        scale *= 0.5
    return policy


# ---------------------------------------------------------------------------
# pipelines


class Run:
    """State shared by the step functions of one training run."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.task = cfg.task_spec
        self.data_rng = make_rng(cfg.seed, 1)
        self.reward_model = (Network.load(cfg.reward_checkpoint) if cfg.reward_checkpoint else None)
        self.train_texts: list[Text] = []
        self.train_pairs = []
        self.eval_pairs = []
        self.eval_prompts = []
        self._prepare_data()

    def _prepare_data(self):
        cfg, task, rng = self.cfg, self.task, self.data_rng
        if cfg.algorithm == "sft":
            if cfg.dataset:
                self.train_texts = [t for t in load_dataset(cfg.dataset) if isinstance(t, Text)]
            else:
                self.train_texts = [task.reference_text(p) for p in gen_prompts(task, cfg.n_train, rng)]
            if not self.train_texts:
                raise ConfigError("SFT dataset is empty")
        elif cfg.algorithm in ("reward", "dpo"):
            if cfg.dataset:
                self.train_pairs = [p for p in load_dataset(cfg.dataset) if not isinstance(p, Text)]
            else:
                self.train_pairs = synthetic_pairs(task, cfg.n_train, cfg.pairs_per_prompt, rng)
            self.eval_pairs = synthetic_pairs(task, cfg.n_eval, cfg.pairs_per_prompt, rng)
            if not self.train_pairs:
                raise ConfigError("preference dataset is empty")
        self.eval_prompts = gen_prompts(task, cfg.n_eval, rng)

    def initial(self) -> Checkpoint:
        cfg = self.cfg
        V = cfg.vocab_size
        if cfg.init_checkpoint:
            loaded = Network.load(Path(cfg.init_checkpoint))
            if not isinstance(loaded, PolicyModel):
                raise ConfigError("init_checkpoint must hold a policy")
            policy = loaded
        else:
            policy = PolicyModel.create(cfg.arch, V, cfg.context, cfg.hidden, seed=cfg.seed)
        ck = Checkpoint(0, policy=policy, reference=policy)
        if cfg.algorithm in ("reinforce", "ppo", "trpo"):
            ck.value = ValueModel.create(cfg.arch, V, cfg.context, cfg.hidden, seed=cfg.seed + 1)
        if cfg.algorithm == "reward":
            ck.policy = ck.reference = None
            ck.reward = RewardModel.create(cfg.arch, V, cfg.reward_context, cfg.reward_hidden,
                                           seed=cfg.seed + 2)
        return ck

    # each step function maps (checkpoint, rng) -> (checkpoint, metrics row)

    def step(self, ck: Checkpoint, rng: np.random.Generator) -> tuple[Checkpoint, dict]:
        algo = self.cfg.algorithm
        if algo in RL_ALGORITHMS:
            n = self.cfg.batch_size
            prompts = gen_prompts(self.task, n, rng)
            return rl_iteration(algo, ck, ck.reference, prompts, self.cfg, rng, self.reward_model)
        return getattr(self, f"_step_{algo}")(ck, rng)

    def _step_sft(self, ck, rng):
        step = ck.step + 1
        opt = SGD(self.cfg.lr, self.cfg.momentum, ck.velocity.get("policy"))
        rep = _check(sft_loss(ck.policy, self.train_texts, self.cfg.answer_only), step)
        policy = opt.step(ck.policy, rep.grad, step)
        tb = RolloutBatch.collect(ck.policy, self.train_texts, np.zeros(len(self.train_texts))).tokens(
            ck.policy.context)
        row = _row(step, rep.loss, entropy=mean_entropy(ck.policy, tb),
                   mean_kl_ref=kl_to_reference(ck.policy, ck.reference, tb.ctx))
        return dataclasses.replace(ck, step=step, policy=policy, velocity=_vel(opt)), row

    def _step_rejection(self, ck, rng):
        cfg, task = self.cfg, self.task
        step = ck.step + 1
        prompts = gen_prompts(task, cfg.n_train, rng)
        if self.reward_model is not None:
            selector = lambda t: reward_score(self.reward_model, t)  # noqa: E731
        else:
            selector = lambda t: true_reward(task, t)  # noqa: E731
        kept, rejected = rank_groups(ck.policy, prompts, cfg.group_size, selector, cfg.temperature, rng,
                                     task.answer_len)
        all_r = [true_reward(task, t) for t in kept + rejected]
        opt = SGD(cfg.lr, cfg.momentum, ck.velocity.get("policy"))
        policy, loss = ck.policy, None
        for _ in range(cfg.sft_steps):
            rep = _check(sft_loss(policy, kept, cfg.answer_only), step)
            loss = rep.loss if loss is None else loss
            policy = opt.step(policy, rep.grad, step)
        tb = RolloutBatch.collect(ck.policy, kept, np.zeros(len(kept))).tokens(policy.context)
        row = _row(step, loss, float(np.mean(all_r)), kl_to_reference(ck.policy, ck.reference, tb.ctx),
                   entropy=mean_entropy(ck.policy, tb),
                   accuracy=float(np.mean([true_reward(task, t) for t in kept])))
        return dataclasses.replace(ck, step=step, policy=policy, velocity=_vel(opt)), row

    def _eval_due(self, step: int) -> bool:
        return step % self.cfg.eval_every == 0

    def _minibatch(self, items, rng):
        n = min(self.cfg.batch_size, len(items))
        idx = rng.choice(len(items), size=n, replace=False)
        return [items[i] for i in np.sort(idx)]

    def _step_reward(self, ck, rng):
        step = ck.step + 1
        opt = SGD(self.cfg.lr, self.cfg.momentum, ck.velocity.get("reward"))
        rep = _check(reward_pairs_loss(ck.reward, self._minibatch(self.train_pairs, rng)), step)
        reward = opt.step(ck.reward, rep.grad, step)
        acc = pair_accuracy(reward, self.eval_pairs) if self._eval_due(step) else None
        row = _row(step, rep.loss, accuracy=acc)
        return dataclasses.replace(ck, step=step, reward=reward, velocity=_vel(opt, "reward")), row

    def _step_dpo(self, ck, rng):
        step = ck.step + 1
        opt = SGD(self.cfg.lr, self.cfg.momentum, ck.velocity.get("policy"))
        rep = _check(dpo_pairs_loss(ck.policy, ck.reference, self._minibatch(self.train_pairs, rng),
                                    self.cfg.beta), step)
        policy = opt.step(ck.policy, rep.grad, step)
        acc = dpo_win_rate(policy, self.eval_pairs) if self._eval_due(step) else None
        row = _row(step, rep.loss, accuracy=acc)
        return dataclasses.replace(ck, step=step, policy=policy, velocity=_vel(opt)), row


def _vel(opt: SGD, name: str = "policy") -> dict:
    return {name: opt.velocity} if opt.velocity is not None else {}


def dpo_win_rate(policy: PolicyModel, pairs) -> float:
    """Share of pairs where the preferred answer has the higher log-probability."""
    texts = [t for p in pairs for t in ((p.winner, p.loser) if p.hp == 1 else (p.loser, p.winner))]
    tb = gather(texts, answer_starts(texts), policy.context)
    logp = policy.log_probs(tb.ctx)[np.arange(tb.actions.size), tb.actions]
    seq = np.bincount(tb.seg, weights=logp, minlength=len(texts)).reshape(-1, 2)
    return float(np.mean(seq[:, 0] > seq[:, 1]))


def reinforce_gradient_variance(policy: PolicyModel, value: ValueModel, task: Task, n: int,
                                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate variance of single-sample REINFORCE gradients with the
    zero baseline and with ``value`` as baseline, over ``n`` fresh samples."""
    zero, base = [], []
    for prompt in gen_prompts(task, n, rng):
        text = sample_batch(policy, [prompt], 1.0, task.answer_len, rng)
        batch = RolloutBatch.collect(policy, text, [true_reward(task, text[0])])
        zero.append(reinforce_loss(policy, batch, None).grad)
        base.append(reinforce_loss(policy, batch, value).grad)
    return np.var(zero, axis=0, ddof=1), np.var(base, axis=0, ddof=1)


def shipped_config(name: str) -> Path:
    """Path of a config file bundled with the package, e.g. ``"ppo_copy"``."""
    path = Path(__file__).with_name("configs") / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"no shipped config named {name!r}")
    return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def format_row(row: dict) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    rows: list[dict]
    out_dir: Path


def train(config: TrainConfig, resume: str | Path | None = None) -> TrainResult:
    """Run the configured pipeline, writing ``metrics.csv``, ``config.json``,
    periodic checkpoints under ``checkpoints/`` and a final checkpoint."""
    cfg = config
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    run = Run(cfg)
    metrics_path = out / "metrics.csv"
    header = ",".join(METRIC_COLUMNS) + "\n"
    if resume is not None:
        ck = Checkpoint.load(resume)
        rng = _rng_from_state(ck.rng_state)
        kept = [header]
        if metrics_path.exists():
            for line in metrics_path.read_text().splitlines(keepends=True)[1:]:
                if int(line.split(",", 1)[0]) <= ck.step:
                    kept.append(line)
        metrics_path.write_text("".join(kept))
    else:
        ck = run.initial()
        rng = make_rng(cfg.seed, 2)
        metrics_path.write_text(header)
    rows = []
    with open(metrics_path, "a") as f:
        while ck.step < cfg.iterations:
            try:
                ck, row = run.step(ck, rng)
            except NumericalError as exc:
                bundle = {"error": str(exc), "step": ck.step + 1, "config": cfg.to_dict()}
                (out / "diagnostic.json").write_text(json.dumps(bundle, indent=2))
                ck.rng_state = rng.bit_generator.state
                ck.save(out / "checkpoints" / "abort")
                raise
            rows.append(row)
            f.write(format_row(row))
            f.flush()
            if cfg.checkpoint_every and ck.step % cfg.checkpoint_every == 0:
                ck.rng_state = rng.bit_generator.state
                ck.save(out / "checkpoints" / f"step_{ck.step:05d}")
    ck.rng_state = rng.bit_generator.state
    ck.save(out / "final")
    return TrainResult(ck, rows, out)

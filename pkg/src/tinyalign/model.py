"""Tiny networks over a fixed window of the last ``k`` tokens.

Two architectures share one interface:

* ``"table"`` -- a lookup table with one row of outputs per possible context,
  small enough to enumerate exactly;
* ``"mlp"`` -- one tanh hidden layer over the concatenated one-hot context.

A network with ``V`` outputs is a policy (logits over the vocabulary); a
network with one output is a value head or a reward head.  Parameters live in
one flat float64 vector so that losses, optimizers and finite-difference
checks all see the same thing.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError, NumericalError
from .numerics import log_softmax, make_rng, sample_rows, softmax

PAD, USER, MODEL, EOS = 0, 1, 2, 3
N_RESERVED = 4
ARCHS = ("table", "mlp")
MAX_TABLE_ROWS = 1_000_000


@dataclass(frozen=True)
class Text:
    """Token sequence whose answer begins at the 1-based ``answer_start``."""

    tokens: tuple[int, ...]
    answer_start: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) < 1:
            raise InvalidInputError("a Text needs at least one token")
        if not 1 <= self.answer_start <= len(self.tokens):
            raise InvalidInputError(
                f"answer_start {self.answer_start} outside [1, {len(self.tokens)}]"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.tokens[: self.answer_start - 1]

    @property
    def answer(self) -> tuple[int, ...]:
        return self.tokens[self.answer_start - 1 :]


def contexts(tokens: Sequence[int], positions: Sequence[int], k: int) -> np.ndarray:
    """Left-padded windows of the ``k`` tokens preceding each 1-based position.

    Position ``t`` sees tokens ``1..t-1``; position ``T+1`` sees the whole text.
    """
    padded = np.concatenate([np.full(k, PAD, dtype=np.int64), np.asarray(tokens, dtype=np.int64)])
    pos = np.asarray(positions, dtype=np.int64)
    # token t-1 (1-based) sits at padded index k + t - 2
    offsets = np.arange(k, dtype=np.int64)
    return padded[(pos - 1)[:, None] + offsets[None, :]]


@dataclass(frozen=True)
class Network:
    """Shared machinery; use the PolicyModel/ValueModel/RewardModel subclasses."""

    arch: str
    vocab_size: int
    context: int
    hidden: int
    n_out: int
    params: np.ndarray = field(repr=False)
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise InvalidInputError(f"unknown architecture {self.arch!r}")
        if self.vocab_size < 2:
            raise InvalidInputError("vocab_size must be >= 2")
        if not 1 <= self.context <= 8:
            raise InvalidInputError("context window must be in [1, 8]")
        params = np.array(self.params, dtype=np.float64).reshape(-1)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        expected = self.param_count(self.arch, self.vocab_size, self.context, self.hidden, self.n_out)
        if params.size != expected:
            raise InvalidInputError(f"expected {expected} parameters, got {params.size}")

    # construction -------------------------------------------------------

    @staticmethod
    def param_count(arch: str, vocab_size: int, context: int, hidden: int, n_out: int) -> int:
        if arch == "table":
            rows = vocab_size**context
            if rows > MAX_TABLE_ROWS:
                raise InvalidInputError(f"lookup table with {rows} rows is too large")
            return rows * n_out
        if hidden < 1:
            raise InvalidInputError("mlp needs hidden width >= 1")
        return context * vocab_size * hidden + hidden + hidden * n_out + n_out

    @classmethod
    def create(cls, arch: str = "mlp", vocab_size: int = 8, context: int = 2, hidden: int = 16,
               seed: int = 0, init: str = "uniform", **kw):
        n_out = kw.pop("n_out", cls._default_out(vocab_size))
        n = cls.param_count(arch, vocab_size, context, hidden if arch == "mlp" else 0, n_out)
        if init == "zeros":
            params = np.zeros(n)
        elif init == "uniform":
            params = make_rng(seed).uniform(-0.1, 0.1, size=n)
        else:
            raise InvalidInputError(f"unknown init {init!r}")
        return cls(arch, vocab_size, context, hidden if arch == "mlp" else 0, n_out, params, seed)

    @staticmethod
    def _default_out(vocab_size: int) -> int:
        return 1

    def with_params(self, params: np.ndarray):
        return type(self)(self.arch, self.vocab_size, self.context, self.hidden, self.n_out,
                          params, self.seed)

    @property
    def size(self) -> int:
        return self.params.size

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.descriptor(), sort_keys=True).encode())
        h.update(self.params.tobytes())
        return h.hexdigest()[:16]

    def descriptor(self) -> dict:
        return {"kind": self.kind, "arch": self.arch, "V": self.vocab_size, "k": self.context,
                "h": self.hidden, "n_out": self.n_out, "seed": self.seed}

    kind = "network"

    # forward / backward -------------------------------------------------

    def _check_ids(self, ctx: np.ndarray) -> None:
        if ctx.size and (ctx.min() < 0 or ctx.max() >= self.vocab_size):
            raise InvalidInputError(f"token id outside [0, {self.vocab_size})")

    def _split(self, params: np.ndarray):
        kv, h, o = self.context * self.vocab_size, self.hidden, self.n_out
        emb = params[: kv * h].reshape(kv, h)
        i = kv * h
        b1 = params[i : i + h]
        w2 = params[i + h : i + h + h * o].reshape(o, h)
        b2 = params[i + h + h * o :]
        return emb, b1, w2, b2

    def _rows(self, ctx: np.ndarray) -> np.ndarray:
        powers = self.vocab_size ** np.arange(self.context - 1, -1, -1, dtype=np.int64)
        return ctx @ powers

    def forward(self, ctx: np.ndarray) -> np.ndarray:
        """Outputs ``(N, n_out)`` for an ``(N, k)`` array of contexts."""
        ctx = np.asarray(ctx, dtype=np.int64).reshape(-1, self.context)
        self._check_ids(ctx)
        if self.arch == "table":
            out = self.params.reshape(-1, self.n_out)[self._rows(ctx)]
        else:
            hid = self._hidden(ctx)
            _, _, w2, b2 = self._split(self.params)
            out = hid @ w2.T + b2
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"{self.kind}.forward produced non-finite outputs")
        return out

    def _hidden(self, ctx: np.ndarray) -> np.ndarray:
        emb, b1, _, _ = self._split(self.params)
        cols = ctx + self.vocab_size * np.arange(self.context)[None, :]
        return np.tanh(b1 + emb[cols].sum(axis=1))

    def backward(self, ctx: np.ndarray, dout: np.ndarray) -> np.ndarray:
        """Flat parameter gradient given ``dL/d output`` for each context."""
        ctx = np.asarray(ctx, dtype=np.int64).reshape(-1, self.context)
        dout = np.asarray(dout, dtype=np.float64).reshape(ctx.shape[0], self.n_out)
        if not np.all(np.isfinite(dout)):
            raise NumericalError(f"{self.kind}.backward received non-finite upstream gradient")
        g = np.zeros(self.size)
        if self.arch == "table":
            np.add.at(g.reshape(-1, self.n_out), self._rows(ctx), dout)
            return g
        gemb, gb1, gw2, gb2 = self._split(g)
        _, _, w2, _ = self._split(self.params)
        hid = self._hidden(ctx)
        gw2 += dout.T @ hid
        gb2 += dout.sum(axis=0)
        dpre = (dout @ w2) * (1.0 - hid**2)
        gb1 += dpre.sum(axis=0)
        cols = ctx + self.vocab_size * np.arange(self.context)[None, :]
        for j in range(self.context):
            np.add.at(gemb, cols[:, j], dpre)
        return g

    # persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {**self.descriptor(), "params": self.params.tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @staticmethod
    def from_dict(d: dict) -> "Network":
        cls = MODEL_KINDS[d["kind"]]
        return cls(d["arch"], d["V"], d["k"], d["h"], d["n_out"], np.array(d["params"], dtype=np.float64),
                   d.get("seed", 0))

    @staticmethod
    def load(path) -> "Network":
        return Network.from_dict(json.loads(Path(path).read_text()))


class PolicyModel(Network):
    """Autoregressive categorical policy: logits over the whole vocabulary."""

    kind = "policy"

    @staticmethod
    def _default_out(vocab_size: int) -> int:
        return vocab_size

    def __post_init__(self):
        super().__post_init__()
        if self.n_out != self.vocab_size:
            raise InvalidInputError("a policy must output one logit per token")

    def log_probs(self, ctx: np.ndarray) -> np.ndarray:
        return log_softmax(self.forward(ctx))

    def logp_backward(self, ctx: np.ndarray, actions: np.ndarray, weights: np.ndarray,
                      dlogits: np.ndarray | None = None) -> np.ndarray:
        """Gradient of ``sum_n weights[n] * log pi(actions[n] | ctx[n])``.

        ``dlogits`` adds any further gradient taken directly w.r.t. the logits.
        """
        probs = softmax(self.forward(ctx))
        d = -weights[:, None] * probs
        d[np.arange(actions.size), actions] += weights
        if dlogits is not None:
            d += dlogits
        return self.backward(ctx, d)


class ValueModel(Network):
    kind = "value"


class RewardModel(Network):
    kind = "reward"


MODEL_KINDS = {"policy": PolicyModel, "value": ValueModel, "reward": RewardModel}


# ---------------------------------------------------------------------------
# operations on policies and heads


def _prefix_context(model: Network, prefix: Sequence[int]) -> np.ndarray:
    return contexts(prefix, [len(prefix) + 1], model.context)


def next_token_dist(policy: PolicyModel, prefix: Sequence[int]) -> np.ndarray:
    """Next-token distribution after ``prefix`` (may be empty)."""
    return softmax(policy.forward(_prefix_context(policy, prefix)))[0]


def scored_positions(text: Text, start: int) -> np.ndarray:
    if not 1 <= start <= len(text):
        raise InvalidInputError(f"start {start} outside [1, {len(text)}]")
    return np.arange(start, len(text) + 1)


def token_logprobs(policy: PolicyModel, text: Text, start: int = 1) -> np.ndarray:
    """``log pi(a_t | s_t)`` for ``t = start..T``."""
    pos = scored_positions(text, start)
    ctx = contexts(text.tokens, pos, policy.context)
    actions = np.asarray(text.tokens, dtype=np.int64)[pos - 1]
    return policy.log_probs(ctx)[np.arange(pos.size), actions]


def sequence_logprob(policy: PolicyModel, text: Text, start: int = 1) -> float:
    """Sum of token log-probabilities from ``start`` (1-based) to the end."""
    return float(np.sum(token_logprobs(policy, text, start)))


@dataclass(frozen=True)
class TokenBatch:
    """Scored (context, action) pairs of several texts, flattened in order."""

    ctx: np.ndarray
    actions: np.ndarray
    seg: np.ndarray
    counts: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.counts.size

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        return np.split(values, np.cumsum(self.counts)[:-1])


def gather(texts: Sequence[Text], starts: Sequence[int], k: int) -> TokenBatch:
    """Collect positions ``start_i..T_i`` of every text for a window of ``k``."""
    ctxs, acts, segs, counts = [], [], [], []
    for i, (text, start) in enumerate(zip(texts, starts)):
        pos = scored_positions(text, start)
        ctxs.append(contexts(text.tokens, pos, k))
        acts.append(np.asarray(text.tokens, dtype=np.int64)[pos - 1])
        segs.append(np.full(pos.size, i))
        counts.append(pos.size)
    return TokenBatch(np.concatenate(ctxs), np.concatenate(acts), np.concatenate(segs),
                      np.asarray(counts))


def answer_starts(texts: Sequence[Text], answer_only: bool = True) -> list[int]:
    return [t.answer_start if answer_only else 1 for t in texts]


def _sample_step(policy: PolicyModel, ctx: np.ndarray, temperature: float,
                 rng: np.random.Generator) -> np.ndarray:
    logits = policy.forward(ctx)
    if temperature < 1e-6:
        return np.argmax(logits, axis=1)
    return sample_rows(softmax(logits / temperature), rng)


def sample_batch(policy: PolicyModel, prompts: Sequence[Sequence[int]], temperature: float,
                 max_len: int, rng: np.random.Generator) -> list[Text]:
    """Vectorized ``sample_completion`` over several prompts.

    Each step consumes one uniform per still-active row, in row order.
    """
    if max_len < 1:
        raise InvalidInputError("max_len must be >= 1")
    seqs = [list(p) for p in prompts]
    active = list(range(len(seqs)))
    for _ in range(max_len):
        if not active:
            break
        ctx = np.concatenate([_prefix_context(policy, seqs[i]) for i in active])
        tok = _sample_step(policy, ctx, temperature, rng)
        still = []
        for i, t in zip(active, tok):
            seqs[i].append(int(t))
            if t != EOS:
                still.append(i)
        active = still
    return [Text(s, len(p) + 1) for s, p in zip(seqs, prompts)]


def sample_completion(policy: PolicyModel, prompt: Sequence[int], temperature: float,
                      max_len: int, rng: np.random.Generator) -> Text:
    """Sample until the end token or ``max_len`` new tokens; greedy below 1e-6."""
    return sample_batch(policy, [prompt], temperature, max_len, rng)[0]


def value_estimate(value: ValueModel, prefix: Sequence[int]) -> float:
    return float(value.forward(_prefix_context(value, prefix))[0, 0])


def reward_score(reward: RewardModel, text: Text) -> float:
    return float(reward.forward(contexts(text.tokens, [len(text) + 1], reward.context))[0, 0])


def grad(loss: Callable[[Network], object], model: Network) -> np.ndarray:
    """Analytic gradient of ``loss(model)``.

    ``loss`` returns either a report with ``.loss``/``.grad`` or a
    ``(value, gradient)`` pair.
    """
    out = loss(model)
    value, g = (out.loss, out.grad) if hasattr(out, "grad") else out
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(value):
        raise NumericalError("loss value is not finite")
    if g.shape != (model.size,):
        raise InvalidInputError(f"gradient has shape {g.shape}, expected ({model.size},)")
    if not np.all(np.isfinite(g)):
        raise NumericalError("gradient contains non-finite entries")
    return g

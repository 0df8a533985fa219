"""Synthetic question/answer tasks with programmatic rewards.

Prompts follow the delimiter convention ``<USER> content... <MODEL>`` using
reserved token ids, so delimiters can never collide with content tokens.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetError, InvalidInputError
from .model import MODEL, N_RESERVED, USER, Text
from .numerics import make_rng

TASK_KINDS = ("copy", "reverse", "constant-map")


@dataclass(frozen=True)
class Task:
    """A prompt of ``prompt_len`` content tokens determines the answer.

    ``copy`` repeats the content cyclically, ``reverse`` repeats it reversed,
    ``constant-map`` applies a fixed seeded permutation of content tokens.
    """

    kind: str = "copy"
    vocab_size: int = 16
    prompt_len: int = 2
    answer_len: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidInputError(f"unknown task kind {self.kind!r}")
        if self.vocab_size <= N_RESERVED + 1:
            raise InvalidInputError("vocab_size leaves fewer than two content tokens")
        if self.prompt_len < 1 or self.answer_len < 1:
            raise InvalidInputError("prompt_len and answer_len must be >= 1")

    @property
    def content_tokens(self) -> np.ndarray:
        return np.arange(N_RESERVED, self.vocab_size)

    @property
    def prompt_tokens(self) -> int:
        """Prompt length including both delimiters."""
        return self.prompt_len + 2

    def content(self, text_or_prompt) -> tuple[int, ...]:
        toks = text_or_prompt.tokens if isinstance(text_or_prompt, Text) else tuple(text_or_prompt)
        return tuple(toks[1 : 1 + self.prompt_len])

    def _mapping(self) -> np.ndarray:
        perm = make_rng(self.seed, 7).permutation(self.content_tokens)
        table = np.arange(self.vocab_size)
        table[self.content_tokens] = perm
        return table

    def target(self, prompt) -> tuple[int, ...]:
        """Ground-truth answer tokens for a prompt (or a full Text)."""
        c = self.content(prompt)
        if self.kind == "reverse":
            c = c[::-1]
        elif self.kind == "constant-map":
            m = self._mapping()
            c = tuple(int(m[t]) for t in c)
        return tuple(c[i % len(c)] for i in range(self.answer_len))

    def reference_text(self, prompt) -> Text:
        prompt = tuple(prompt)
        return Text(prompt + self.target(prompt), len(prompt) + 1)


@dataclass(frozen=True)
class PreferencePair:
    winner: Text
    loser: Text
    hp: int = 1

    def __post_init__(self):
        if self.hp not in (0, 1):
            raise InvalidInputError("hp must be 0 or 1")
        if self.winner.prompt != self.loser.prompt:
            raise InvalidInputError("winner and loser must share a prompt")


@dataclass
class SampleGroup:
    """``G`` responses to one question, with rewards and a category label."""

    q: int
    responses: list[Text]
    rewards: list[float]
    category: str = "default"
    logp_old: list[np.ndarray] | None = field(default=None, repr=False)
    sampler_id: str | None = None

    def __post_init__(self):
        if len(self.responses) < 1:
            raise InvalidInputError("a group needs at least one response")
        if len(self.rewards) != len(self.responses):
            raise InvalidInputError("one reward per response")
        prompts = {r.prompt for r in self.responses}
        if len(prompts) != 1:
            raise InvalidInputError("all responses in a group must share the prompt")

    @property
    def G(self) -> int:
        return len(self.responses)


def gen_prompts(task: Task, n: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    content = rng.choice(task.content_tokens, size=(n, task.prompt_len))
    return [(USER, *map(int, row), MODEL) for row in content]


def true_reward(task: Task, text: Text) -> float:
    """Fraction of the ``answer_len`` answer positions matching the target."""
    target = task.target(text)
    answer = text.answer
    hits = sum(1 for a, b in zip(answer, target) if a == b)
    return hits / task.answer_len


def corrupt_answer(task: Task, prompt, n_wrong: int, rng: np.random.Generator) -> Text:
    """Reference answer with exactly ``n_wrong`` positions replaced by wrong tokens."""
    target = list(task.target(prompt))
    for i in rng.choice(task.answer_len, size=n_wrong, replace=False):
        choices = [t for t in task.content_tokens if t != target[i]]
        target[i] = int(rng.choice(choices))
    prompt = tuple(prompt)
    return Text(prompt + tuple(target), len(prompt) + 1)


def make_preference_pairs(task: Task, texts: Sequence[Text],
                          rng: np.random.Generator) -> list[PreferencePair]:
    """All strictly-ordered pairs within each prompt, ranked by ``true_reward``.

    Ties produce no pair.  Output order is shuffled with ``rng``.
    """
    by_prompt: dict[tuple, list[Text]] = {}
    for t in texts:
        by_prompt.setdefault(t.prompt, []).append(t)
    pairs = []
    for group in by_prompt.values():
        scored = [(true_reward(task, t), t) for t in group]
        for (ra, a), (rb, b) in itertools.combinations(scored, 2):
            if ra > rb:
                pairs.append(PreferencePair(a, b))
            elif rb > ra:
                pairs.append(PreferencePair(b, a))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def synthetic_pairs(task: Task, n_prompts: int, per_prompt: int,
                    rng: np.random.Generator) -> list[PreferencePair]:
    """Pairs from reference answers with varying numbers of corrupted positions."""
    texts = []
    for prompt in gen_prompts(task, n_prompts, rng):
        wrong = rng.choice(task.answer_len + 1, size=per_prompt, replace=per_prompt > task.answer_len + 1)
        texts.extend(corrupt_answer(task, prompt, int(w), rng) for w in wrong)
    return make_preference_pairs(task, texts, rng)


# ---------------------------------------------------------------------------
# JSONL persistence


def _text_record(t: Text) -> dict:
    return {"tokens": list(t.tokens), "answer_start": t.answer_start}


def _to_record(item) -> dict:
    if isinstance(item, Text):
        return _text_record(item)
    if isinstance(item, PreferencePair):
        return {"winner": _text_record(item.winner), "loser": _text_record(item.loser), "hp": item.hp}
    raise InvalidInputError(f"cannot serialize {type(item).__name__}")


def _from_record(rec: dict):
    if "winner" in rec:
        return PreferencePair(_from_record(rec["winner"]), _from_record(rec["loser"]), int(rec.get("hp", 1)))
    tokens = rec["tokens"]
    if not all(isinstance(x, int) for x in tokens):
        raise ValueError("tokens must be integers")
    return Text(tokens, int(rec["answer_start"]))


def save_dataset(path, items: Iterable) -> None:
    with open(path, "w") as f:
        for item in items:
            f.write(json.dumps(_to_record(item)) + "\n")


def load_dataset(path) -> list:
    items = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            items.append(_from_record(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
    return items


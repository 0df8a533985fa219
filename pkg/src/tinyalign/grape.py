"""Rubric-based rewards with confidence-weighted aggregation.

Each question category carries a rubric of weighted items.  A scorer turns
(response, item) into a reasoning string, a score in [0, 1] and a confidence
in (0, 1].  Item confidences are averaged over every sample of the category,
then combined with the weights and scores into one reward per sample; the
advantage is the usual group-relative one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .advantage import grpo_advantage
from .errors import ConfigError, InvalidInputError
from .model import Text

WEIGHT_ATOL = 1e-9


@dataclass(frozen=True)
class RubricItem:
    id: str
    category: str
    weight: float
    verifiable: bool
    scorer: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.weight <= 1.0:
            raise ConfigError(f"rubric item {self.id!r}: weight must be in (0, 1]")
        if self.scorer not in SCORERS:
            raise ConfigError(f"rubric item {self.id!r}: unknown scorer {self.scorer!r}")


@dataclass(frozen=True)
class RubricScore:
    reasoning: str
    score: float
    confidence: float

    def __post_init__(self):
        if not self.reasoning:
            raise InvalidInputError("reasoning must be non-empty")
        if not 0.0 <= self.score <= 1.0:
            raise InvalidInputError("score must be in [0, 1]")
        if not 0.0 < self.confidence <= 1.0:
            raise InvalidInputError("confidence must be in (0, 1]")


class CategoryIndex:
    """Partition of sample indices by category."""

    def __init__(self, categories: Sequence[str]):
        self.of = list(categories)
        self.members: dict[str, list[int]] = {}
        for i, c in enumerate(self.of):
            self.members.setdefault(c, []).append(i)

    def peers(self, i: int) -> list[int]:
        """Indices of every sample sharing sample ``i``'s category (``i`` included)."""
        return self.members[self.of[i]]


# ---------------------------------------------------------------------------
# scorers


def _evidence_confidence(n: int, params: Mapping) -> float:
    if "confidence" in params:
        return float(params["confidence"])
    # more answer tokens inspected -> more confident
    return (n + 1) / (n + 2)


def _match_fraction(answer, truth, params):
    n = len(truth)
    hits = sum(1 for a, b in zip(answer, truth) if a == b)
    frac = hits / n
    why = f"{hits} of {n} answer positions match the ground truth"
    return RubricScore(why, frac, _evidence_confidence(n, params))


def _exact_match(answer, truth, params):
    n = len(truth)
    ok = tuple(answer[:n]) == tuple(truth) and len(answer) >= n
    why = "answer equals the ground truth" if ok else "answer differs from the ground truth"
    return RubricScore(why, 1.0 if ok else 0.0, _evidence_confidence(n, params))


def _length_band(answer, truth, params):
    lo, hi = int(params.get("min", 1)), int(params.get("max", 1 << 30))
    ok = lo <= len(answer) <= hi
    why = f"answer length {len(answer)} {'inside' if ok else 'outside'} [{lo}, {hi}]"
    return RubricScore(why, 1.0 if ok else 0.0, _evidence_confidence(len(answer), params))


SCORERS: dict[str, Callable] = {
    "match-fraction": _match_fraction,
    "exact-match": _exact_match,
    "length-band": _length_band,
}


def score_response(text: Text, item: RubricItem, ground_truth: Sequence[int] | None = None) -> RubricScore:
    """Score one response against one rubric item with the item's scorer."""
    if item.verifiable and ground_truth is None:
        raise ConfigError(f"rubric item {item.id!r} is verifiable but no ground truth was given")
    return SCORERS[item.scorer](text.answer, tuple(ground_truth or ()), item.params)


# ---------------------------------------------------------------------------
# aggregation


def avg_confidence(scores: Sequence[Sequence[RubricScore]], index: CategoryIndex, i: int, j: int) -> float:
    """Mean confidence of item ``j`` over the category peers of sample ``i``."""
    peers = index.peers(i)
    if not peers:
        raise InvalidInputError("empty category")
    return float(sum(scores[k][j].confidence for k in peers) / len(peers))


def grape_reward(scores: Sequence[RubricScore], weights: Sequence[float], confidence: Sequence[float]) -> float:
    """Reward of one sample: ``n * sum_j w_j s_j c_j / sum_j c_j`` over its
    ``n`` rubric items, with ``c_j`` the category-averaged confidences."""
    n = len(scores)
    if n == 0 or len(weights) != n or len(confidence) != n:
        raise InvalidInputError("scores, weights and confidences must have equal non-zero length")
    denom = sum(confidence)
    if not denom > 0:
        raise InvalidInputError("total confidence must be positive")
    num = sum(w * s.score * c for w, s, c in zip(weights, scores, confidence))
    return n * num / denom


def grape_advantage(rewards: Sequence[float]) -> np.ndarray:
    """Group-relative advantage; identical to :func:`grpo_advantage`."""
    return grpo_advantage(rewards)


def grape_rewards(scores: Sequence[Sequence[RubricScore]], categories: Sequence[str],
                  rubrics: "RubricRegistry") -> tuple[np.ndarray, list[str]]:
    """Rewards for a batch of scored samples, plus diagnostics for rewards
    outside ``[0, number of items]``."""
    index = CategoryIndex(categories)
    out, notes = np.empty(len(scores)), []
    for i, row in enumerate(scores):
        items = rubrics.items(categories[i])
        conf = [avg_confidence(scores, index, i, j) for j in range(len(items))]
        out[i] = grape_reward(row, [it.weight for it in items], conf)
        if not 0.0 <= out[i] <= len(items):
            notes.append(f"sample {i}: reward {out[i]:.4f} outside [0, {len(items)}]")
    return out, notes


# ---------------------------------------------------------------------------
# rubric registry


class RubricRegistry:
    """Categories mapped to rubric items whose weights sum to one."""

    def __init__(self, categories: Mapping[str, Sequence[RubricItem]]):
        self._items = {c: list(items) for c, items in categories.items()}
        for c, items in self._items.items():
            if not items:
                raise ConfigError(f"category {c!r} has no rubric items")
            total = sum(it.weight for it in items)
            if abs(total - 1.0) > WEIGHT_ATOL:
                raise ConfigError(f"category {c!r}: weights sum to {total}, not 1")

    def items(self, category: str) -> list[RubricItem]:
        try:
            return self._items[category]
        except KeyError:
            raise ConfigError(f"no rubric for category {category!r}") from None

    @property
    def categories(self) -> list[str]:
        return list(self._items)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RubricRegistry":
        cats = {}
        for cat, spec in d["categories"].items():
            cats[cat] = [
                RubricItem(it["id"], cat, float(it["weight"]), bool(it.get("verifiable", True)),
                           it["scorer"], dict(it.get("params", {})))
                for it in spec["items"]
            ]
        return cls(cats)

    @classmethod
    def load(cls, path) -> "RubricRegistry":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"categories": {
            c: {"items": [{"id": it.id, "weight": it.weight, "verifiable": it.verifiable,
                           "scorer": it.scorer, "params": dict(it.params)} for it in items]}
            for c, items in self._items.items()}}


def single_item_registry(category: str, scorer: str = "match-fraction") -> RubricRegistry:
    """One item, unit weight, unit confidence: rewards equal raw scores."""
    return RubricRegistry({category: [RubricItem("score", category, 1.0, True, scorer,
                                                 {"confidence": 1.0})]})


def default_registry(category: str) -> RubricRegistry:
    return RubricRegistry({category: [
        RubricItem("positions", category, 0.7, True, "match-fraction"),
        RubricItem("exact", category, 0.2, True, "exact-match"),
        RubricItem("length", category, 0.1, False, "length-band", {"min": 1}),
    ]})


# ---------------------------------------------------------------------------
# variance of confidence-weighted averages


def lemma_variances(sigma: Sequence[float]) -> tuple[float, float]:
    """Variance of the plain mean and of the inverse-variance weighted mean of
    independent scores with standard deviations ``sigma``."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 1 or s.size < 1 or np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise InvalidInputError("sigma must be a non-empty vector of positive values")
    unweighted = float(np.sum(s**2) / s.size**2)
    weighted = float(1.0 / np.sum(1.0 / s**2))
    return unweighted, weighted


def simulated_weighted_variance(sigma: Sequence[float], n: int, rng: np.random.Generator):
    """Empirical variance of the confidence-weighted mean (confidence = 1/sigma^2)
    over ``n`` simulated score vectors, with its standard error."""
    s = np.asarray(sigma, dtype=np.float64)
    draws = rng.normal(0.0, s, size=(n, s.size))
    weight = 1.0 / s**2
    est = draws @ weight / weight.sum()
    var = float(est.var(ddof=1))
    return var, var * np.sqrt(2.0 / (n - 1))

"""Math kernels: softmax family, information-theory quantities, importance
sampling, finite-difference gradients and seeded categorical sampling.

All logarithms are natural logarithms.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidInputError, NumericalError

PROB_ATOL = 1e-9


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; extra integers select an independent
    sub-stream, e.g. ``make_rng(seed, sample_index)`` for parallel rollouts."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def _finite(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must be finite")
    return arr


def check_prob_vector(p, name: str = "p") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise InvalidInputError(f"{name} must be a non-empty vector")
    if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > PROB_ATOL:
        raise InvalidInputError(f"{name} is not a probability vector")
    return p


def logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))).squeeze(axis)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; works row-wise on 2-D input."""
    z = _finite(logits, "logits")
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.exp(-np.logaddexp(0.0, -x))
    return float(out) if out.ndim == 0 else out


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = -np.logaddexp(0.0, -x)
    return float(out) if out.ndim == 0 else out


def entropy(p) -> float:
    p = check_prob_vector(p)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def cross_entropy(p, q) -> float:
    """``-sum p log q``; returns ``inf`` when q vanishes on the support of p."""
    p = check_prob_vector(p, "p")
    q = check_prob_vector(q, "q")
    if p.shape != q.shape:
        raise InvalidInputError("p and q must have the same length")
    nz = p > 0
    if np.any(q[nz] == 0):
        return float("inf")
    return float(-np.sum(p[nz] * np.log(q[nz])))


def kl_divergence(p, q) -> float:
    """``sum p log(p/q)``; ``inf`` under the same condition as cross_entropy."""
    p = check_prob_vector(p, "p")
    q = check_prob_vector(q, "q")
    if p.shape != q.shape:
        raise InvalidInputError("p and q must have the same length")
    nz = p > 0
    if np.any(q[nz] == 0):
        return float("inf")
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def kl_rows(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) from log-probability matrices (softmax outputs, so
    q is strictly positive)."""
    return np.sum(np.exp(logp) * (logp - logq), axis=-1)


def importance_estimate(values, p_probs, q_probs) -> float:
    """Mean of ``P(x)/Q(x) * x`` over samples drawn from Q."""
    x = _finite(values, "values")
    p = _finite(p_probs, "p_probs")
    q = _finite(q_probs, "q_probs")
    if x.ndim != 1 or x.size < 1 or p.shape != x.shape or q.shape != x.shape:
        raise InvalidInputError("values, p_probs and q_probs must be equal-length vectors")
    if np.any(q <= 0):
        raise InvalidInputError("q_probs must be strictly positive")
    return float(np.sum((p / q) * x) / x.size)


def fd_gradient(f: Callable[[np.ndarray], float], params, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if step <= 0:
        raise InvalidInputError("step must be positive")
    theta = np.array(params, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + step
        up = float(f(theta))
        theta[i] = old - step
        down = float(f(theta))
        theta[i] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"non-finite function value perturbing coordinate {i}")
        g[i] = (up - down) / (2 * step)
    return g


def relative_error(analytic, numeric) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(1, |a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def categorical_sample(p, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; consumes exactly one uniform from ``rng``."""
    p = check_prob_vector(p)
    return int(sample_rows(p[None, :], rng)[0])


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a probability matrix."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = np.sum(cdf <= u[:, None], axis=1)
    return np.minimum(idx, probs.shape[1] - 1)

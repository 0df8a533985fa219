"""
Rubric rewards with confidence weights
======================================

A rubric splits "is this answer good" into weighted items.  Each scorer
returns a score, a confidence and a short explanation.  Confidences are
averaged over every sample in the category before they weight the scores.
"""
import numpy as np

from tinyalign.grape import (CategoryIndex, avg_confidence, default_registry, grape_advantage, grape_rewards,
                             lemma_variances, score_response, simulated_weighted_variance)
from tinyalign.model import USER, MODEL, EOS, Text
from tinyalign.numerics import make_rng

reg = default_registry("copy")
truth = (7, 9, 7)
answers = [(7, 9, 7), (7, 9, 4), (5, 9), (4, 4, 4, 4)]
texts = [Text((USER, 7, 9, MODEL) + a + (EOS,), 5) for a in answers]

scores = [[score_response(t, it, truth) for it in reg.items("copy")] for t in texts]
for a, row in zip(answers, scores):
    print(a, [f"{s.score:.2f}@{s.confidence:.2f}" for s in row])
    print("   ", row[0].reasoning)

idx = CategoryIndex(["copy"] * len(texts))
print("\naveraged confidence per item:",
      [round(avg_confidence(scores, idx, 0, j), 3) for j in range(3)])

rewards, notes = grape_rewards(scores, ["copy"] * len(texts), reg)
print("rewards:   ", np.round(rewards, 3))
print("advantages:", np.round(grape_advantage(rewards), 3))

# Why weight by confidence?  If confidence tracks inverse variance, the
# weighted average of noisy scores is never noisier than the plain mean.
sigma = [0.2, 0.5, 1.5]
unweighted, weighted = lemma_variances(sigma)
sim, se = simulated_weighted_variance(sigma, 50_000, make_rng(0))
print()
print(f"plain mean variance {unweighted:.4f}, weighted {weighted:.4f}, simulated {sim:.4f} +/- {se:.4f}")

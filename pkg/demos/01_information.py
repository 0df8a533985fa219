"""
Entropy, KL and importance weights
==================================

The quantities every loss in the package is built from, on distributions
small enough to check by hand.
"""
import numpy as np

from tinyalign.numerics import cross_entropy, entropy, importance_estimate, kl_divergence, make_rng

# a fair die carries log(6) nats of surprise per roll
die = np.full(6, 1 / 6)
print("fair die entropy:", round(entropy(die), 4))

# a model that spreads mass evenly over a 32000 token vocabulary
print("uniform 32000-token NLL:", round(entropy(np.full(32000, 1 / 32000)), 4))

# a loaded die is more predictable
loaded = np.array([0.5, 0.1, 0.1, 0.1, 0.1, 0.1])
print("loaded die entropy:", round(entropy(loaded), 4))

# cross-entropy never beats entropy; the gap is the KL divergence
print("H(p, q) - H(p):", cross_entropy(loaded, die) - entropy(loaded))
print("KL(p || q):     ", kl_divergence(loaded, die))
print("KL(q || p):     ", kl_divergence(die, loaded), "(not symmetric)")

# Importance weights: estimate a mean under p from samples drawn under q.
# Sample 200 short and 100 tall people, but the population we care about
# is 5% short and 95% tall.
rng = make_rng(0)
short, tall = rng.normal(175, 7, 200), rng.normal(200, 7, 100)
heights = np.concatenate([short, tall])
p = np.r_[np.full(200, 0.05), np.full(100, 0.95)]
q = np.r_[np.full(200, 2 / 3), np.full(100, 1 / 3)]
print()
print("sample mean:          ", heights.mean().round(2))
print("reweighted mean:      ", round(importance_estimate(heights, p, q), 2))
print("0.05*short + 0.95*tall:", round(0.05 * short.mean() + 0.95 * tall.mean(), 2))

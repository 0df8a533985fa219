"""
Learning from preference pairs
==============================

Two ways to use "answer A is better than answer B":

* fit a reward model with the Bradley-Terry loss, then optimize a policy
  against it
* skip the reward model and push the policy directly (DPO)
"""
import tempfile

import numpy as np

from tinyalign.data import Task, synthetic_pairs
from tinyalign.numerics import make_rng
from tinyalign.model import reward_score
from tinyalign.supervised import pair_accuracy
from tinyalign.trainer import TrainConfig, shipped_config, train

task = Task("copy", 16, 2, 3)
pairs = synthetic_pairs(task, 2, 2, make_rng(0))
for p in pairs[:3]:
    print("winner", p.winner.answer, " loser", p.loser.answer)

with tempfile.TemporaryDirectory() as out:
    cfg = TrainConfig.load(shipped_config("reward_copy")).with_overrides(["iterations=300", f"out_dir={out}"])
    res = train(cfg)
reward_model = res.checkpoint.reward
held_out = synthetic_pairs(task, 64, 4, make_rng(1))
print()
print("reward model held-out accuracy:", round(pair_accuracy(reward_model, held_out), 3))
perfect = task.reference_text(pairs[0].winner.prompt)
print("score of a perfect answer:", round(reward_score(reward_model, perfect), 3))
print("score of the losing answer:", round(reward_score(reward_model, pairs[0].loser), 3))

with tempfile.TemporaryDirectory() as out:
    cfg = TrainConfig.load(shipped_config("dpo_copy")).with_overrides(["iterations=60", f"out_dir={out}"])
    res = train(cfg)
acc = [r["accuracy"] for r in res.rows if r["accuracy"] is not None]
print()
print("DPO held-out win rate every 10 steps:", np.round(acc, 3))

"""
Teaching a tiny model to copy
=============================

Train the same small policy with REINFORCE, PPO and GRPO on the copy task
and print the mean reward every few iterations.  A random policy gets
about 1/V of the answer positions right.
"""
import tempfile

from tinyalign.trainer import TrainConfig, shipped_config, train

ITERATIONS = 60

for algo in ("reinforce", "ppo", "grpo"):
    cfg = TrainConfig.load(shipped_config(f"{algo}_copy"))
    with tempfile.TemporaryDirectory() as out:
        cfg = cfg.with_overrides([f"iterations={ITERATIONS}", f"out_dir={out}"])
        res = train(cfg)
    curve = [r["mean_reward"] for r in res.rows][::10]
    print(f"{algo:<10}", " ".join(f"{x:.2f}" for x in curve), f"| final {res.rows[-1]['mean_reward']:.3f}")

# PPO reuses each batch for several gradient steps; the clip keeps the
# later steps from running away.  The fraction of clipped tokens shows
# how far the policy drifts within one batch.
cfg = TrainConfig.load(shipped_config("ppo_copy"))
with tempfile.TemporaryDirectory() as out:
    res = train(cfg.with_overrides(["iterations=30", f"out_dir={out}"]))
print()
print("PPO clip fraction, first and last iteration:",
      round(res.rows[0]["clip_fraction"], 3), round(res.rows[-1]["clip_fraction"], 3))
print("KL to the starting policy after 30 iterations:", round(res.rows[-1]["mean_kl_ref"], 3))

"""
Model-assisted soft actor-critic
================================

The agent learns from real transitions and, every few hundred steps, from
short imagined rollouts of the world model. This is a shortened run; pass a
larger step budget to see the pendulum get swung up and balanced.
"""

import logging
import sys

from noda.orchestrator import TrainConfig, run_noda_sac, steps_to_threshold

logging.basicConfig(level=logging.INFO, format="%(message)s")
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 6000

for kind in ("noda", "none"):
    _, _, metrics, bufs = run_noda_sac(TrainConfig(world_model=kind, n4=steps, eval_interval=2000, seed=0))
    print(kind, "imaginary transitions:", len(bufs["D_m"]))
    for row in metrics.rows:
        print(f"  step {row['env_steps']:6d}  return {row['eval_return_mean']:8.1f}")
    print("  first step at -300 or better:", steps_to_threshold(metrics, -300.0))

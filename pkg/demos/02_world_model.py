"""
Learning a world model
======================

An auto-encoder maps observations to a latent state, a neural ODE moves the
latent state forward under the action, and the decoder maps it back. We fit it
to random-policy pendulum data and compare with a plain auto-encoder model of
the same size.
"""

from noda.envs import Pendulum, collect_random
from noda.model import AEBaselineModel, rollout_model
from noda.orchestrator import run_model_training, split_dataset
from noda.theory import measure_delta_n

train, test = split_dataset(collect_random(Pendulum(), 6000, seed=0), 5000)

# a short run; the acceptance suite uses 20k transitions and 2000 batches
kw = dict(batches=400, batch_size=200, latent_dim=4, hidden=32, tau=0.05, time_scale=0.05, eval_every=100)
noda, curves = run_model_training(train, test, "noda", **kw)
ae, ae_curves = run_model_training(train, test, "ae", **kw)
print("parameters: NODA", noda.n_params, "AE", AEBaselineModel.matched(noda).n_params)
for (i, a), (_, b) in zip(curves["test"], ae_curves["test"]):
    print(f"batch {i:4d}   NODA test MSE {a:.2e}   AE {b:.2e}")

# imagined rollout from one start state, compared with the real pendulum
env = Pendulum()
s0 = env.reset(seed=3).s
actions = [[1.0]] * 10
states, rewards = rollout_model(noda, s0, actions)
trace = measure_delta_n(env, noda, s0, actions)
print("model rollout, last state:", states[-1].round(3))
print("distance to the real rollout per step:", trace.delta.round(3))

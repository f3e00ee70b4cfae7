"""
The pendulum as a Hamiltonian system
====================================

The environment integrates Hamilton's equations for a rod pendulum with a
torque input. With no torque the energy stays put; with torque, the energy
changes by exactly the work done.
"""

import numpy as np

from noda.envs import EnvState, Pendulum

env = Pendulum()
state = env.reset(seed=0)
print("observation [cos, sin, speed]:", state.s)
print("canonical (q, p):", state.u)

# free swing: H is conserved to integrator accuracy
h0 = env.hamiltonian_energy(state.u)
drift = 0.0
for _ in range(500):
    state = env.step([0.0])[0]
    drift = max(drift, abs(env.hamiltonian_energy(state.u) - h0))
print(f"max energy drift over 500 free steps: {drift:.2e}")

# the torque is clipped to [-2, 2], so 5 and 2 give the same motion
a, b = Pendulum(), Pendulum()
a.reset(seed=1)
b.reset(seed=1)
for _ in range(50):
    ua, ub = a.step([5.0])[0].u, b.step([2.0])[0].u
print("torque 5 and torque 2 agree:", np.array_equal(ua, ub))

# energy gained under constant torque equals torque times angle turned
env.state = EnvState(env.observe(np.array([0.3, 0.0])), np.array([0.3, 0.0]), 0.0)
h_before = env.hamiltonian_energy(env.state.u)
u = env.step([1.5])[0].u
print(f"dH = {env.hamiltonian_energy(u) - h_before:.6f}, work = {1.5 * (u[0] - 0.3):.6f}")

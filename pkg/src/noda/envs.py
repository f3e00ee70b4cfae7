"""Analytic environments with Hamiltonian canonical dynamics.

Both environments keep an internal canonical state ``u* = (q, p)`` and expose
an observation ``s`` that is an exact, invertible function of it. Batched
helpers (:meth:`transition`, :meth:`reward`) act directly on observation
arrays so the bound-verification code can treat an environment as a map.
"""
import math
from dataclasses import dataclass

import numpy as np

from .diffcore import DomainError
from .odeint import IntegratorConfig, integrate

TWO_PI = 2.0 * np.pi


def wrap_angle(theta):
    """Map angles to ``[-pi, pi)``."""
    return np.mod(np.asarray(theta) + np.pi, TWO_PI) - np.pi


@dataclass
class EnvState:
    s: np.ndarray
    u: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class PendulumParams:
    m: float = 1.0
    l: float = 1.0
    g_grav: float = 10.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0

    def __post_init__(self):
        for name in ("m", "l", "g_grav", "dt", "max_torque", "max_speed"):
            if not getattr(self, name) > 0:
                raise ValueError(f"pendulum parameter {name} must be positive")


class _Env:
    name = ""
    obs_dim = 0
    act_dim = 0
    canonical_dim = 0
    substeps = 10

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.state = None

    @property
    def dt(self):
        raise NotImplementedError

    @property
    def integrator(self):
        return IntegratorConfig(tau=self.dt, method="rk4", substeps=self.substeps)

    def _rng(self, seed):
        return self.rng if seed is None else np.random.default_rng(seed)

    def sample_action(self, seed=None):
        return self._rng(seed).uniform(self.action_low, self.action_high, size=self.act_dim)

    def _check_action(self, a):
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if a.shape != (self.act_dim,):
            raise ValueError(f"{self.name}: action must have shape ({self.act_dim},), got {a.shape}")
        if not np.isfinite(a).all():
            raise DomainError(f"{self.name}: non-finite action")
        return a

    def _advance(self, u, a):
        return integrate(self.field, u, a, self.integrator)

    def step(self, a):
        """Advance one ``dt``; returns ``(EnvState, reward, done)``."""
        if self.state is None:
            raise RuntimeError("step() before reset()")
        a = self._check_action(a)
        r = float(self.reward(self.state.s, a))
        u = self._post_step(self._advance(self.state.u, a))
        self.state = EnvState(self.observe(u), u, self.state.t + self.dt)
        return self.state, r, False

    def _post_step(self, u):
        return u

    def transition(self, s, a):
        """Batched next observation for observations ``s`` (B, l) and actions ``a`` (B, m)."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.broadcast_to(np.atleast_2d(np.asarray(a, dtype=np.float64)), (len(s), self.act_dim))
        u = self._post_step(self._advance(self.project(s), a))
        return self.observe(u)

    def rollout(self, s0, actions):
        """Observations ``s_1..s_n`` and rewards ``r_0..r_{n-1}`` from ``s0`` under ``actions``."""
        s = np.asarray(s0, dtype=np.float64)[None, :]
        states, rewards = [], []
        for a in actions:
            a = np.asarray(a, dtype=np.float64)[None, :]
            rewards.append(float(self.reward(s, a)[0]))
            s = self.transition(s, a)
            states.append(s[0])
        return np.array(states), np.array(rewards)


class Pendulum(_Env):
    """Torque-driven pendulum; ``q`` is measured from the upright position."""

    name = "pendulum"
    obs_dim = 3
    act_dim = 1
    canonical_dim = 2

    def __init__(self, params=None, seed=0):
        super().__init__(seed)
        self.params = params or PendulumParams()
        self.action_low = -self.params.max_torque
        self.action_high = self.params.max_torque

    @property
    def dt(self):
        return self.params.dt

    @property
    def inertia(self):
        # (1/3) m l^2: p = inertia * dtheta/dt
        return self.params.m * self.params.l ** 2 / 3.0

    @property
    def p_max(self):
        return self.params.max_speed * self.inertia

    def field(self, u, a, t):
        P = self.params
        if u.ndim == 1:
            # single-state path: python floats are far cheaper than tiny-array ufuncs
            q, p = float(u[0]), float(u[1])
            force = 0.5 * P.m * P.g_grav * P.l * math.sin(q) + min(max(float(a[0]), -P.max_torque), P.max_torque)
            if p > self.p_max:
                force = min(force, 0.0)
            elif p < -self.p_max:
                force = max(force, 0.0)
            return np.array([p / self.inertia, force])
        q, p = u[..., 0], u[..., 1]
        torque = np.clip(a[..., 0], -P.max_torque, P.max_torque)
        force = 0.5 * P.m * P.g_grav * P.l * np.sin(q) + torque
        dp = np.where(p > self.p_max, np.minimum(force, 0.0),
                      np.where(p < -self.p_max, np.maximum(force, 0.0), force))
        return np.stack([p / self.inertia, dp], axis=-1)

    def _post_step(self, u):
        # angular velocity clip of the reference task; a no-op while saturation is inactive
        u = np.array(u, dtype=np.float64)
        u[..., 1] = np.clip(u[..., 1], -self.p_max, self.p_max)
        return u

    def hamiltonian_energy(self, u):
        P = self.params
        u = np.asarray(u, dtype=np.float64)
        q, p = u[..., 0], u[..., 1]
        return p * p / (2.0 * self.inertia) + 0.5 * P.m * P.g_grav * P.l * np.cos(q)

    def observe(self, u):
        u = np.asarray(u, dtype=np.float64)
        q, p = u[..., 0], u[..., 1]
        return np.stack([np.cos(q), np.sin(q), p / self.inertia], axis=-1)

    def project(self, s):
        """Canonical coordinates of any observation (angle read off with atan2)."""
        s = np.asarray(s, dtype=np.float64)
        return np.stack([wrap_angle(np.arctan2(s[..., 1], s[..., 0])), s[..., 2] * self.inertia], axis=-1)

    def true_canonical_encode(self, s):
        s = np.asarray(s, dtype=np.float64)
        radius = s[..., 0] ** 2 + s[..., 1] ** 2
        if np.any(np.abs(radius - 1.0) > 1e-6):
            raise DomainError("observation is off the unit circle")
        return self.project(s)

    def true_canonical_decode(self, u):
        return self.observe(u)

    def reward(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        theta = wrap_angle(np.arctan2(s[..., 1], s[..., 0]))
        torque = np.clip(a[..., 0], -self.params.max_torque, self.params.max_torque)
        return -(theta ** 2 + 0.1 * s[..., 2] ** 2 + 0.001 * torque ** 2)

    def reset(self, seed=None):
        rng = self._rng(seed)
        theta = rng.uniform(-np.pi, np.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        u = np.array([theta, theta_dot * self.inertia])
        self.state = EnvState(self.observe(u), u, 0.0)
        return self.state


@dataclass(frozen=True)
class SpringMassParams:
    k1: float = 1.0
    k2: float = 1.0
    dt: float = 0.1
    max_force: float = 1.0
    obs_dim: int = 8
    lift_seed: int = 1234


class SpringMass(_Env):
    """Two unit masses on a line, wall-spring-mass-spring-mass, force on mass 2.

    The observation is a fixed random full-rank linear lift of
    ``(x1, x2, v1, v2)`` to ``obs_dim`` dimensions.
    """

    name = "springmass"
    act_dim = 1
    canonical_dim = 4

    def __init__(self, params=None, seed=0, lift=None):
        super().__init__(seed)
        self.params = params or SpringMassParams()
        self.obs_dim = self.params.obs_dim
        self.action_low = -self.params.max_force
        self.action_high = self.params.max_force
        if lift is None:
            lift = np.random.default_rng(self.params.lift_seed).normal(size=(self.obs_dim, 4)) / 2.0
        self.lift = np.asarray(lift, dtype=np.float64)
        if np.linalg.matrix_rank(self.lift) < 4:
            raise ValueError("lift matrix must have full column rank")
        self._pinv = np.linalg.pinv(self.lift)

    @property
    def dt(self):
        return self.params.dt

    def field(self, u, a, t):
        P = self.params
        x1, x2, p1, p2 = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
        force = np.clip(a[..., 0], -P.max_force, P.max_force)
        stretch = x2 - x1
        return np.stack([p1, p2, -P.k1 * x1 + P.k2 * stretch, -P.k2 * stretch + force], axis=-1)

    def hamiltonian_energy(self, u):
        P = self.params
        u = np.asarray(u, dtype=np.float64)
        x1, x2, p1, p2 = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
        return 0.5 * (p1 ** 2 + p2 ** 2) + 0.5 * P.k1 * x1 ** 2 + 0.5 * P.k2 * (x2 - x1) ** 2

    def observe(self, u):
        return np.asarray(u, dtype=np.float64) @ self.lift.T

    def project(self, s):
        return np.asarray(s, dtype=np.float64) @ self._pinv.T

    def true_canonical_encode(self, s):
        return self.project(s)

    def true_canonical_decode(self, u):
        return self.observe(u)

    def reward(self, s, a):
        u = self.project(s)
        return -(u[..., 0] ** 2 + u[..., 1] ** 2)

    def reset(self, seed=None):
        u = self._rng(seed).uniform(-1.0, 1.0, size=4)
        self.state = EnvState(self.observe(u), u, 0.0)
        return self.state


ENVS = {"pendulum": Pendulum, "springmass": SpringMass}


def make_env(name, seed=0, **kwargs):
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return cls(seed=seed, **kwargs)


def collect_random(env, n_steps, seed, episode_len=200, hold=1):
    """Random-policy transitions ``(s, a, s2, r, done)`` as stacked arrays.

    With ``hold > 1`` each record spans ``hold`` environment steps under one
    held action; ``r`` is then the summed reward.
    """
    rng = np.random.default_rng(seed)
    S, A, S2, R = [], [], [], []
    elapsed = episode_len
    for _ in range(n_steps):
        if elapsed + hold > episode_len:
            env.reset(seed=int(rng.integers(2 ** 31)))
            elapsed = 0
        elapsed += hold
        s = env.state.s
        a = rng.uniform(env.action_low, env.action_high, size=env.act_dim)
        r = 0.0
        for _ in range(hold):
            state, r_k, _ = env.step(a)
            r += r_k
        S.append(s)
        A.append(a)
        S2.append(state.s)
        R.append(r)
    return {
        "s": np.array(S), "a": np.array(A), "s2": np.array(S2),
        "r": np.array(R), "done": np.zeros(n_steps, dtype=bool),
    }

"""Soft actor-critic with twin critics, target networks and replay buffers."""
import numpy as np

from . import nets
from .diffcore import Tape, Tensor, adam_init, adam_step, apply_op, backward

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, obs_dim, act_dim, capacity):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.s2 = np.zeros((capacity, obs_dim))
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def append(self, s, a, s2, r, done):
        i = self.cursor
        self.s[i], self.a[i], self.s2[i], self.r[i], self.done[i] = s, a, s2, r, done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, s, a, s2, r, done):
        for row in zip(s, a, s2, r, done):
            self.append(*row)

    def sample(self, n, rng):
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return self.take(idx)

    def take(self, idx):
        return {"s": self.s[idx], "a": self.a[idx], "s2": self.s2[idx],
                "r": self.r[idx], "done": self.done[idx]}

    def contents(self):
        """All stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        return self.take((start + np.arange(self.size)) % self.capacity)


def merge_batches(*batches):
    return {k: np.concatenate([b[k] for b in batches]) for k in batches[0]}


class SacAgent:
    """Squashed-Gaussian actor and two Q critics with Polyak-averaged targets.

    ``alpha`` is a fixed entropy coefficient.
    """

    def __init__(self, obs_dim, act_dim, action_low, action_high, hidden=64, gamma=0.99,
                 alpha=0.2, rho=0.995, lr=1e-3, seed=0):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.action_low = np.broadcast_to(np.asarray(action_low, dtype=np.float64), (act_dim,)).copy()
        self.action_high = np.broadcast_to(np.asarray(action_high, dtype=np.float64), (act_dim,)).copy()
        self.hidden = hidden
        self.gamma, self.alpha, self.rho, self.lr = gamma, alpha, rho, lr
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        init_rng = np.random.default_rng([seed, 1])
        self.actor = nets.init_mlp(init_rng, "actor", [obs_dim, hidden, hidden, 2 * act_dim])
        self.critics = {}
        for q in ("q1", "q2"):
            self.critics.update(nets.init_mlp(init_rng, q, [obs_dim + act_dim, hidden, hidden, 1]))
        self.targets = {k: v.copy() for k, v in self.critics.items()}
        self.actor_opt = adam_init(self.actor, lr=lr)
        self.critic_opt = adam_init(self.critics, lr=lr)
        self.updates = 0

    @property
    def scale(self):
        return 0.5 * (self.action_high - self.action_low)

    @property
    def center(self):
        return 0.5 * (self.action_high + self.action_low)

    def _policy_numpy(self, s, eps):
        out = nets.mlp_numpy(self.actor, "actor", s)
        mean, log_std = out[:, :self.act_dim], np.clip(out[:, self.act_dim:], LOG_STD_MIN, LOG_STD_MAX)
        pre = mean if eps is None else mean + np.exp(log_std) * eps
        logp = None
        if eps is not None:
            logp = (-0.5 * eps ** 2 - log_std - _HALF_LOG_2PI).sum(1) \
                - (2.0 * (np.log(2.0) - pre - np.logaddexp(0.0, -2.0 * pre))).sum(1)
        return np.tanh(pre) * self.scale + self.center, logp

    def act(self, s, deterministic=False):
        """Action for a single state (or a batch) inside the action bounds."""
        s = np.asarray(s, dtype=np.float64)
        single = s.ndim == 1
        s2 = np.atleast_2d(s)
        eps = None if deterministic else self.rng.standard_normal((len(s2), self.act_dim))
        a, _ = self._policy_numpy(s2, eps)
        a = np.clip(a, self.action_low, self.action_high)
        return a[0] if single else a

    def q_values(self, params, prefix, s, a):
        return nets.mlp(params, prefix, apply_op("concat", s, a, axis=1))

    def critic_target(self, batch, eps=None, alpha=None):
        """``r + gamma (1 - done) (min Q'(s2, a2) - alpha log pi(a2 | s2))``."""
        alpha = self.alpha if alpha is None else alpha
        s2 = batch["s2"]
        if eps is None:
            eps = self.rng.standard_normal((len(s2), self.act_dim))
        a2, logp2 = self._policy_numpy(s2, eps)
        x = np.concatenate([s2, a2], axis=1)
        q_targ = np.minimum(nets.mlp_numpy(self.targets, "q1", x), nets.mlp_numpy(self.targets, "q2", x))[:, 0]
        mask = 1.0 - np.asarray(batch["done"], dtype=np.float64)
        return batch["r"] + self.gamma * mask * (q_targ - alpha * logp2)

    def critic_loss(self, batch, y, params=None):
        P = nets.as_tensors(self.critics) if params is None else params
        s, a = Tensor(batch["s"]), Tensor(batch["a"])
        yt = y[:, None]
        l1 = (self.q_values(P, "q1", s, a) - yt).square().mean()
        l2 = (self.q_values(P, "q2", s, a) - yt).square().mean()
        return l1 + l2

    def actor_loss(self, batch, eps, params=None):
        P = nets.as_tensors(self.actor) if params is None else params
        s = Tensor(batch["s"])
        out = nets.mlp(P, "actor", s)
        k = self.act_dim
        mean = out[:, :k]
        log_std = apply_op("clip", out[:, k:], lo=LOG_STD_MIN, hi=LOG_STD_MAX)
        pre = mean + log_std.exp() * eps
        logp = (log_std * -1.0 - (0.5 * eps ** 2 + _HALF_LOG_2PI)).sum(axis=1)
        squash = (apply_op("softplus", pre * -2.0) + pre - np.log(2.0)) * 2.0
        logp = logp + squash.sum(axis=1)
        a = pre.tanh() * self.scale + self.center
        C = nets.as_tensors(self.critics)
        q1 = self.q_values(C, "q1", s, a)
        q2 = self.q_values(C, "q2", s, a)
        # min(q1, q2) = q1 - relu(q1 - q2)
        q_min = (q1 - apply_op("relu", q1 - q2))[:, 0]
        return (logp * self.alpha - q_min).mean()

    def polyak(self):
        rho = self.rho
        self.targets = {k: rho * self.targets[k] + (1.0 - rho) * self.critics[k] for k in self.targets}


def sac_update(agent, batch):
    """One gradient step on both critics, then the actor, then the targets."""
    if len(batch["s"]) < 2:
        raise ValueError("SAC update needs at least two transitions")
    y = agent.critic_target(batch)
    with Tape() as tape:
        P = {k: tape.param(k, v) for k, v in agent.critics.items()}
        loss_q = agent.critic_loss(batch, y, P)
    agent.critics, agent.critic_opt = adam_step(agent.critics, backward(loss_q), agent.critic_opt)

    eps = agent.rng.standard_normal((len(batch["s"]), agent.act_dim))
    with Tape() as tape:
        P = {k: tape.param(k, v) for k, v in agent.actor.items()}
        loss_pi = agent.actor_loss(batch, eps, P)
    agent.actor, agent.actor_opt = adam_step(agent.actor, backward(loss_pi), agent.actor_opt)

    agent.polyak()
    agent.updates += 1
    agent.last_losses = (loss_q.item(), loss_pi.item())
    return agent


def evaluate_policy(agent, env, episodes=10, horizon=200, seed=0):
    """Mean and std of undiscounted deterministic-policy returns."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    returns = []
    for _ in range(episodes):
        state = env.reset(seed=int(rng.integers(2 ** 31)))
        total = 0.0
        for _ in range(horizon):
            state, r, done = env.step(agent.act(state.s, deterministic=True))
            total += r
            if done:
                break
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


def agent_params(agent):
    return {**agent.actor, **agent.critics, **{f"target.{k}": v for k, v in agent.targets.items()}}


def agent_metadata(agent):
    return {
        "kind": "sac", "obs_dim": str(agent.obs_dim), "act_dim": str(agent.act_dim),
        "hidden": str(agent.hidden), "gamma": repr(agent.gamma), "alpha": repr(agent.alpha),
        "rho": repr(agent.rho), "lr": repr(agent.lr), "seed": str(agent.seed),
        "action_low": ",".join(repr(float(x)) for x in agent.action_low),
        "action_high": ",".join(repr(float(x)) for x in agent.action_high),
    }


def agent_from_checkpoint(params, meta):
    vec = lambda k: [float(x) for x in meta[k].split(",")]
    agent = SacAgent(int(meta["obs_dim"]), int(meta["act_dim"]), vec("action_low"), vec("action_high"),
                     hidden=int(meta["hidden"]), gamma=float(meta["gamma"]), alpha=float(meta["alpha"]),
                     rho=float(meta["rho"]), lr=float(meta["lr"]), seed=int(meta["seed"]))
    agent.actor = {k: params[k] for k in agent.actor}
    agent.critics = {k: params[k] for k in agent.critics}
    agent.targets = {k: params[f"target.{k}"] for k in agent.targets}
    return agent

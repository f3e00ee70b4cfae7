"""NODA world model: auto-encoder around a neural ODE, plus the AE baseline.

An observation ``s`` is encoded to a latent canonical state ``u = (q, p)``
of even length ``2K``, evolved by integrating a learned field ``h(u, a, t)``
over ``[t0, t0 + tau]`` and decoded back. Reward is read off the latent
state *before* evolution.

All public entry points take raw (environment-unit) arrays; normalization
statistics are applied at the model boundary and the loss is computed in
normalized units.
"""
from dataclasses import dataclass

import numpy as np

from . import nets
from .diffcore import (
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    adam_init,
    adam_step,
    apply_op,
    backward,
)
from .odeint import IntegratorConfig, integrate

PARTS = ("encoder", "decoder", "reward", "dynamics")


class IncompatibleCheckpointError(ValueError):
    pass


class ModelRolloutError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"model rollout failed at step {step}: {cause}")
        self.step = step


@dataclass
class LossWeights:
    mu: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.mu < 1.0:
            raise ValueError(f"mu must lie in (0, 1), got {self.mu}")


@dataclass
class Normalizer:
    s_mean: np.ndarray
    s_std: np.ndarray
    a_mean: np.ndarray
    a_std: np.ndarray
    r_mean: float = 0.0
    r_std: float = 1.0

    @classmethod
    def identity(cls, obs_dim, act_dim):
        return cls(np.zeros(obs_dim), np.ones(obs_dim), np.zeros(act_dim), np.ones(act_dim))

    @classmethod
    def from_data(cls, s, a, r, floor=1e-6):
        s, a, r = np.asarray(s), np.asarray(a), np.asarray(r)
        return cls(s.mean(0), np.maximum(s.std(0), floor), a.mean(0), np.maximum(a.std(0), floor),
                   float(r.mean()), float(max(r.std(), floor)))

    def to_meta(self):
        fmt = lambda v: ",".join(repr(float(x)) for x in np.atleast_1d(v))
        return {"norm.s_mean": fmt(self.s_mean), "norm.s_std": fmt(self.s_std),
                "norm.a_mean": fmt(self.a_mean), "norm.a_std": fmt(self.a_std),
                "norm.r_mean": fmt(self.r_mean), "norm.r_std": fmt(self.r_std)}

    @classmethod
    def from_meta(cls, meta):
        arr = lambda k: np.array([float(x) for x in meta[k].split(",")])
        return cls(arr("norm.s_mean"), arr("norm.s_std"), arr("norm.a_mean"), arr("norm.a_std"),
                   float(arr("norm.r_mean")[0]), float(arr("norm.r_std")[0]))


class NodaModel:
    """Encoder ``f``, decoder ``g``, reward decoder ``g'`` and ODE field ``h``."""

    kind = "noda"

    def __init__(self, obs_dim, act_dim, latent_dim=2, hidden=32, tau=0.05, time_scale=None,
                 method="rk4", substeps=10, seed=0, norm=None):
        if latent_dim < 2 or latent_dim % 2:
            raise ValueError(f"latent dimension must be even and >= 2, got {latent_dim}")
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.latent_dim, self.hidden = int(latent_dim), int(hidden)
        self.integrator = IntegratorConfig(tau=tau, method=method, t0=0.0, substeps=substeps)
        # field inputs/outputs are in units of time_scale so that O(1) network
        # outputs correspond to O(1) latent changes per environment step
        self.time_scale = float(time_scale if time_scale is not None else tau)
        self.norm = norm or Normalizer.identity(obs_dim, act_dim)
        self.seed = seed
        self.params = self._init_params(np.random.default_rng(seed))

    def _dynamics_sizes(self):
        return [self.latent_dim + self.act_dim + 1, self.hidden, self.hidden, self.latent_dim]

    def _init_params(self, rng):
        k, l, m, w = self.latent_dim, self.obs_dim, self.act_dim, self.hidden
        params = {}
        params.update(nets.init_mlp(rng, "encoder", [l, w, w, k]))
        params.update(nets.init_mlp(rng, "decoder", [k, w, w, l]))
        params.update(nets.init_mlp(rng, "reward", [k + m, w, w, 1]))
        params.update(nets.init_mlp(rng, "dynamics", self._dynamics_sizes()))
        return dict(sorted(params.items()))

    @property
    def n_params(self):
        return nets.count_params(self.params)

    def tensors(self):
        return nets.as_tensors(self.params)

    # normalized-space building blocks; P maps names to tensors
    def _f(self, P, s_n):
        return nets.mlp(P, "encoder", s_n)

    def _g(self, P, u):
        return nets.mlp(P, "decoder", u)

    def _g_reward(self, P, u, a_n):
        return nets.mlp(P, "reward", apply_op("concat", u, a_n, axis=1))

    def field(self, P, u, a_n, t):
        """Latent vector field ``h(u, a, t)``."""
        tcol = np.full((u.shape[0], 1), t / self.time_scale)
        out = nets.mlp(P, "dynamics", apply_op("concat", u, a_n, tcol, axis=1))
        return out * (1.0 / self.time_scale)

    def _evolve(self, P, u, a_n):
        return integrate(lambda x, act, t: self.field(P, x, act, t), u, a_n, self.integrator)

    def _check(self, s, a=None):
        s = np.atleast_2d(np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64))
        if s.shape[1] != self.obs_dim:
            raise DimensionError(f"state has width {s.shape[1]}, model expects {self.obs_dim}")
        if a is None:
            return s
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a.shape[1] != self.act_dim or len(a) != len(s):
            raise DimensionError(f"action shape {a.shape} does not match states {s.shape}")
        return s, a

    def _norm_s(self, s):
        return (s - self.norm.s_mean) / self.norm.s_std

    def _norm_a(self, a):
        return (a - self.norm.a_mean) / self.norm.a_std

    def forward_normalized(self, P, s_n, a_n):
        """(reconstruction, next state, reward), all in normalized units."""
        u = self._f(P, s_n)
        recon = self._g(P, u)
        s_next = self._g(P, self._evolve(P, u, a_n))
        r = self._g_reward(P, u, a_n)
        return recon, s_next, r

    def predict(self, s, a):
        """Batched raw-unit ``(s_next, r)`` without a tape."""
        s, a = self._check(s, a)
        P = self.tensors()
        u = self._f(P, Tensor(self._norm_s(s)))
        a_n = Tensor(self._norm_a(a))
        s_next = self._g(P, self._evolve(P, u, a_n)).data * self.norm.s_std + self.norm.s_mean
        r = self._g_reward(P, u, a_n).data[:, 0] * self.norm.r_std + self.norm.r_mean
        return s_next, r

    def metadata(self):
        meta = {
            "kind": self.kind, "obs_dim": str(self.obs_dim), "act_dim": str(self.act_dim),
            "latent_dim": str(self.latent_dim), "hidden": str(self.hidden),
            "tau": repr(self.integrator.tau), "time_scale": repr(self.time_scale),
            "method": self.integrator.method, "substeps": str(self.integrator.substeps),
            "seed": str(self.seed),
        }
        meta.update(self.norm.to_meta())
        return meta


class AEBaselineModel(NodaModel):
    """Same auto-encoder, but the ODE call is replaced by a direct network ``(u, a) -> u'``."""

    kind = "ae"

    def _dynamics_sizes(self):
        return [self.latent_dim + self.act_dim, self.hidden, self.hidden, self.latent_dim]

    def _evolve(self, P, u, a_n):
        return nets.mlp(P, "dynamics", apply_op("concat", u, a_n, axis=1))

    @classmethod
    def matched(cls, model, seed=None):
        """AE baseline with the same widths as ``model``; parameter counts agree within 1%."""
        ae = cls(model.obs_dim, model.act_dim, model.latent_dim, model.hidden,
                 tau=model.integrator.tau, time_scale=model.time_scale,
                 method=model.integrator.method, substeps=model.integrator.substeps,
                 seed=model.seed if seed is None else seed, norm=model.norm)
        return ae


MODEL_KINDS = {"noda": NodaModel, "ae": AEBaselineModel}


def build_model(kind, obs_dim, act_dim, **kwargs):
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}") from None
    return cls(obs_dim, act_dim, **kwargs)


def model_from_checkpoint(params, meta):
    m = meta
    model = build_model(
        m["kind"], int(m["obs_dim"]), int(m["act_dim"]), latent_dim=int(m["latent_dim"]),
        hidden=int(m["hidden"]), tau=float(m["tau"]), time_scale=float(m["time_scale"]),
        method=m["method"], substeps=int(m["substeps"]), seed=int(m.get("seed", 0)),
        norm=Normalizer.from_meta(m),
    )
    for k, v in params.items():
        if k not in model.params or model.params[k].shape != v.shape:
            raise IncompatibleCheckpointError(f"parameter {k!r} does not fit the model")
    model.params = {k: np.array(params[k]) for k in model.params}
    return model


def encode(model, s):
    """Latent state ``u = f(s)`` (raw-unit input)."""
    s = model._check(s)
    return model._f(model.tensors(), Tensor(model._norm_s(s))).data


def decode(model, u):
    """Raw-unit observation ``g(u)``."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if u.shape[1] != model.latent_dim:
        raise DimensionError(f"latent has width {u.shape[1]}, model expects {model.latent_dim}")
    return model._g(model.tensors(), Tensor(u)).data * model.norm.s_std + model.norm.s_mean


def forward(model, s, a):
    """``(s_next_pred, r_pred)`` for a batch (or a single state and action)."""
    single = np.ndim(s) == 1
    s_next, r = model.predict(s, a)
    return (s_next[0], float(r[0])) if single else (s_next, r)


def _as_batch(batch):
    if isinstance(batch, dict):
        b = batch
    else:
        b = {
            "s": np.array([t.s for t in batch]), "a": np.array([t.a for t in batch]),
            "s2": np.array([t.s2 for t in batch]), "r": np.array([t.r for t in batch]),
        }
    if len(b["s"]) == 0:
        raise ContractError("empty batch")
    return b


def loss_terms(model, batch, P=None):
    """Mean squared reconstruction, prediction and reward errors (normalized units)."""
    b = _as_batch(batch)
    s, a = model._check(b["s"], b["a"])
    P = model.tensors() if P is None else P
    s_n = model._norm_s(s)
    s2_n = model._norm_s(np.atleast_2d(b["s2"]))
    r_n = ((np.asarray(b["r"], dtype=np.float64) - model.norm.r_mean) / model.norm.r_std)[:, None]
    recon, s_next, r = model.forward_normalized(P, Tensor(s_n), Tensor(model._norm_a(a)))
    recon_t = (recon - s_n).square().sum(axis=1).mean()
    pred_t = (s_next - s2_n).square().sum(axis=1).mean()
    rew_t = (r - r_n).square().sum(axis=1).mean()
    return recon_t, pred_t, rew_t


def compute_loss(model, batch, weights=None, P=None):
    """``mu * (recon + pred) + (1 - mu) * reward`` as a scalar tensor."""
    weights = weights or LossWeights()
    recon_t, pred_t, rew_t = loss_terms(model, batch, P)
    return (recon_t + pred_t) * weights.mu + rew_t * (1.0 - weights.mu)


def train_step(model, batch, opt_state=None, weights=None):
    """One Adam update on all parameters; returns ``(model, opt_state, loss_before)``."""
    if opt_state is None:
        opt_state = adam_init(model.params)
    with Tape() as tape:
        P = {k: tape.param(k, v) for k, v in model.params.items()}
        loss = compute_loss(model, batch, weights, P)
    grads = backward(loss)
    model.params, opt_state = adam_step(model.params, grads, opt_state)
    return model, opt_state, loss.item()


def prediction_mse(model, data):
    """Mean squared one-step prediction error per normalized state entry."""
    s_next, _ = model.predict(data["s"], data["a"])
    err = (s_next - np.asarray(data["s2"])) / model.norm.s_std
    return float(np.mean(err ** 2))


def transfer_load(model, checkpoint, parts):
    """Copy the selected parts' parameters from ``checkpoint`` (params map or model)."""
    src = checkpoint.params if hasattr(checkpoint, "params") else checkpoint
    parts = set(parts)
    unknown = parts - set(PARTS)
    if unknown:
        raise ValueError(f"unknown parts {sorted(unknown)}")
    updates = {}
    for name in sorted(model.params):
        if name.split(".")[0] not in parts:
            continue
        if name not in src:
            raise IncompatibleCheckpointError(f"checkpoint lacks parameter {name!r}")
        if np.shape(src[name]) != model.params[name].shape:
            raise IncompatibleCheckpointError(
                f"parameter {name!r}: checkpoint shape {np.shape(src[name])} "
                f"!= model shape {model.params[name].shape}")
        updates[name] = np.array(src[name], dtype=np.float64)
    model.params = {**model.params, **updates}
    return model


def rollout_model(model, s0, actions):
    """Chain ``n`` one-step predictions from ``s0``; returns states ``s_1..s_n`` and rewards."""
    actions = np.asarray(actions, dtype=np.float64)
    if len(actions) == 0:
        raise ContractError("empty action sequence")
    s = np.asarray(s0, dtype=np.float64)[None, :]
    states, rewards = [], []
    for k, a in enumerate(actions):
        try:
            s, r = model.predict(s, np.atleast_1d(a)[None, :])
        except Exception as e:
            raise ModelRolloutError(k, e) from e
        states.append(s[0])
        rewards.append(float(r[0]))
    return np.array(states), np.array(rewards)


class EnvOracle:
    """Wraps an environment so it can stand wherever a model is expected."""

    kind = "oracle"

    def __init__(self, env):
        self.env = env

    def predict(self, s, a):
        s = np.atleast_2d(s)
        a = np.atleast_2d(a)
        return self.env.transition(s, a), self.env.reward(s, a)

"""Training loops: model-assisted SAC, imaginary rollouts, and the model-only experiments."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .agent import ReplayBuffer, SacAgent, evaluate_policy, merge_batches, sac_update
from .diffcore import adam_init
from .envs import collect_random, make_env
from .model import (
    LossWeights,
    NodaModel,
    Normalizer,
    build_model,
    prediction_mse,
    train_step,
    transfer_load,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    env: str = "pendulum"
    seed: int = 0
    n1: int = 1000          # warmup steps with random actions
    n2: int = 250           # imaginary generation interval (env steps)
    n3: int = 5             # model planning steps per imaginary rollout
    n4: int = 30000         # total real env steps
    b1: int = 256           # agent batch size
    b2: int = 400           # imaginary rollouts per generation
    model_batch: int = 200
    mu: float = 0.5
    world_model: str = "noda"
    eval_interval: int = 4000
    eval_episodes: int = 10
    episode_len: int = 200
    update_every: int = 50
    latent_dim: int = 4
    hidden_width: int = 32
    agent_hidden: int = 64
    tau: float = 0.0        # 0 -> environment dt
    integrator: str = "rk4"
    substeps: int = 10
    lr_model: float = 1e-3
    lr_agent: float = 1e-3
    gamma: float = 0.99
    alpha: float = 0.2
    rho: float = 0.995
    imag_mix_ratio: float = 0.5
    imag_updates_max: int = 50
    imag_updates_min: int = 10
    buffer_size: int = 1_000_000
    model_buffer_size: int = 100_000
    test_size: int = 2000
    wall_clock: bool = False

    def __post_init__(self):
        if self.world_model not in ("noda", "ae", "none"):
            raise ValueError(f"world_model must be noda, ae or none, got {self.world_model!r}")
        if self.n1 > self.n4:
            raise ValueError("warmup steps n1 must not exceed the step budget n4")
        for f in ("n1", "n2", "n3", "n4", "b1", "b2", "model_batch", "eval_interval", "update_every"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        LossWeights(self.mu)


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)

    COLUMNS = ("env_steps", "eval_return_mean", "eval_return_std", "model_test_mse", "model_loss",
               "wall_seconds")

    def add(self, **row):
        if self.rows and row["env_steps"] <= self.rows[-1]["env_steps"]:
            raise ValueError("env_steps must be strictly increasing")
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)


def seed_streams(seed, names):
    """Independent generators per named purpose, all derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _seed_int(rng):
    return int(rng.integers(2 ** 31))


def imaginary_update_count(step, cfg):
    """Extra agent updates after a generation; decays linearly over the second half."""
    half = cfg.n4 / 2.0
    if step <= half:
        return cfg.imag_updates_max
    frac = min((step - half) / max(cfg.n4 - half, 1.0), 1.0)
    return int(round(cfg.imag_updates_max + frac * (cfg.imag_updates_min - cfg.imag_updates_max)))


def generate_imaginary(agent, model, D, D_m, b2, n3, rng):
    """Roll ``b2`` sampled (s, a) pairs through the model for ``n3`` steps into ``D_m``.

    Rollouts whose predictions become non-finite are dropped from that step on.
    Returns ``D_m``.
    """
    if len(D) < b2:
        raise ValueError(f"need at least {b2} real transitions, have {len(D)}")
    batch = D.sample(b2, rng)
    s, a = batch["s"], batch["a"]
    alive = np.ones(b2, dtype=bool)
    for _ in range(n3):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        s2, r = _predict_rows(model, s[idx], a[idx])
        ok = np.isfinite(s2).all(axis=1) & np.isfinite(r)
        if not ok.all():
            log.warning("model diverged on %d imaginary rollouts; dropping them", int((~ok).sum()))
        alive[idx[~ok]] = False
        keep = idx[ok]
        s2, r = s2[ok], r[ok]
        D_m.extend(s[keep], a[keep], s2, r, np.zeros(len(keep), dtype=bool))
        s = s.copy()
        s[keep] = s2
        if keep.size:
            a = a.copy()
            a[keep] = agent.act(s2)
    return D_m


def _predict_rows(model, s, a):
    try:
        return model.predict(s, a)
    except (ArithmeticError, ValueError, RuntimeError):
        s2 = np.full_like(s, np.nan)
        r = np.full(len(s), np.nan)
        for i in range(len(s)):
            try:
                out_s, out_r = model.predict(s[i:i + 1], a[i:i + 1])
                s2[i], r[i] = out_s[0], out_r[0]
            except (ArithmeticError, ValueError, RuntimeError):
                pass
        return s2, r


def make_world_model(cfg, env, norm, seed):
    tau = cfg.tau or env.dt
    return build_model(cfg.world_model, env.obs_dim, env.act_dim, latent_dim=cfg.latent_dim,
                       hidden=cfg.hidden_width, tau=tau, time_scale=env.dt, method=cfg.integrator,
                       substeps=cfg.substeps, seed=seed, norm=norm)


def run_noda_sac(cfg, on_eval=None):
    """Model-assisted SAC; returns ``(agent, model, metrics, buffers)``.

    ``world_model="none"`` trains plain SAC on the same env-step streams.
    """
    rs = seed_streams(cfg.seed, ["env", "explore", "agent", "model", "model_batch", "imag",
                                 "agent_batch", "eval", "test"])
    env = make_env(cfg.env, seed=_seed_int(rs["env"]))
    agent = SacAgent(env.obs_dim, env.act_dim, env.action_low, env.action_high, hidden=cfg.agent_hidden,
                     gamma=cfg.gamma, alpha=cfg.alpha, rho=cfg.rho, lr=cfg.lr_agent,
                     seed=_seed_int(rs["agent"]))
    D = ReplayBuffer(env.obs_dim, env.act_dim, cfg.buffer_size)
    D_m = ReplayBuffer(env.obs_dim, env.act_dim, cfg.model_buffer_size)
    use_model = cfg.world_model != "none"
    model, opt, test = None, None, None
    model_seed = _seed_int(rs["model"])
    if use_model:
        test = collect_random(make_env(cfg.env), cfg.test_size, seed=_seed_int(rs["test"]),
                              episode_len=cfg.episode_len)
    weights = LossWeights(cfg.mu)
    metrics = RunMetrics()
    t_start = time.perf_counter()
    model_losses = []
    state = None
    for step in range(cfg.n4):
        if step % cfg.episode_len == 0:
            state = env.reset(seed=_seed_int(rs["env"]))
        s = state.s
        if step < cfg.n1:
            a = rs["explore"].uniform(env.action_low, env.action_high, size=env.act_dim)
        else:
            a = agent.act(s)
        state, r, done = env.step(a)
        D.append(s, a, state.s, r, done)
        if done:
            state = env.reset(seed=_seed_int(rs["env"]))
        t = step + 1

        if t > cfg.n1 and t % cfg.update_every == 0:
            if use_model and model is None:
                warm = D.take(np.arange(min(cfg.n1, len(D))))
                norm = Normalizer.from_data(warm["s"], warm["a"], warm["r"])
                model = make_world_model(cfg, env, norm, model_seed)
                opt = adam_init(model.params, lr=cfg.lr_model)
            for _ in range(cfg.update_every):
                sac_update(agent, D.sample(cfg.b1, rs["agent_batch"]))
                if use_model:
                    model, opt, loss = train_step(model, D.sample(cfg.model_batch, rs["model_batch"]), opt, weights)
                    model_losses.append(loss)
            if use_model and t % cfg.n2 == 0 and len(D) >= cfg.b2:
                generate_imaginary(agent, model, D, D_m, cfg.b2, cfg.n3, rs["imag"])
                n_real = int(round(cfg.b1 * (1.0 - cfg.imag_mix_ratio)))
                for _ in range(imaginary_update_count(t, cfg)):
                    parts = [D.sample(n_real, rs["agent_batch"])] if n_real else []
                    if cfg.b1 - n_real:
                        parts.append(D_m.sample(cfg.b1 - n_real, rs["agent_batch"]))
                    sac_update(agent, merge_batches(*parts))

        if t % cfg.eval_interval == 0 or t == cfg.n4:
            mean, std = evaluate_policy(agent, make_env(cfg.env), cfg.eval_episodes, cfg.episode_len,
                                        seed=_seed_int(rs["eval"]))
            mse = prediction_mse(model, test) if model is not None else float("nan")
            row = dict(env_steps=t, eval_return_mean=mean, eval_return_std=std, model_test_mse=mse,
                       model_loss=float(np.mean(model_losses)) if model_losses else float("nan"),
                       wall_seconds=(time.perf_counter() - t_start) if cfg.wall_clock else 0.0)
            metrics.add(**row)
            model_losses = []
            log.info("step %d: return %.1f +- %.1f, model mse %.3g", t, mean, std, mse)
            if on_eval is not None:
                on_eval(row)
    return agent, model, metrics, {"D": D, "D_m": D_m}


def steps_to_threshold(metrics, threshold):
    """First ``env_steps`` whose eval return reaches ``threshold`` (inf if never)."""
    for row in metrics.rows:
        if row["eval_return_mean"] >= threshold:
            return row["env_steps"]
    return float("inf")


# --- model-only experiments -------------------------------------------------

def split_dataset(data, n_train):
    train = {k: v[:n_train] for k, v in data.items()}
    test = {k: v[n_train:] for k, v in data.items()}
    return train, test


def run_model_training(train, test, model_kind="noda", batches=2000, batch_size=200, lr=1e-3, seed=0,
                       latent_dim=2, hidden=32, tau=0.05, time_scale=None, substeps=10, method="rk4",
                       mu=0.5, eval_every=50, init=None):
    """Train a world model on a fixed dataset.

    Returns ``(model, curves)`` with ``curves["train"]`` one loss per batch and
    ``curves["test"]`` a list of ``(batch, one-step test MSE)`` every
    ``eval_every`` batches (plus the final batch).
    """
    norm = Normalizer.from_data(train["s"], train["a"], train["r"])
    if init is not None:
        model = init
    else:
        model = build_model(model_kind, train["s"].shape[1], train["a"].shape[1], latent_dim=latent_dim,
                            hidden=hidden, tau=tau, time_scale=time_scale, method=method,
                            substeps=substeps, seed=seed, norm=norm)
    curves = {"train": [], "test": []}
    if batches <= 0:
        return model, curves
    opt = adam_init(model.params, lr=lr)
    rng = np.random.default_rng([seed, 7])
    n = len(train["s"])
    weights = LossWeights(mu)
    for i in range(1, batches + 1):
        idx = rng.integers(0, n, size=batch_size)
        model, opt, loss = train_step(model, {k: v[idx] for k, v in train.items()}, opt, weights)
        curves["train"].append(loss)
        if i % eval_every == 0 or i == batches:
            curves["test"].append((i, prediction_mse(model, test)))
    return model, curves


def loss_rows(curves):
    """Rows for ``losses.csv`` (test loss is NaN between evaluations)."""
    test = dict(curves["test"])
    return [{"batch": i + 1, "train_loss": l, "test_loss": test.get(i + 1, float("nan"))}
            for i, l in enumerate(curves["train"])]


def sweep_latent_dim(train, test, dims, batches=2000, seed=0, **kwargs):
    """Final one-step test loss per latent dimension; everything else held fixed."""
    if not dims:
        raise ValueError("dims must be non-empty")
    table = []
    for k in dims:
        _, curves = run_model_training(train, test, latent_dim=k, batches=batches, seed=seed, **kwargs)
        table.append({"dim": k, "final_test_loss": curves["test"][-1][1] if curves["test"] else float("nan")})
    return table


def run_transfer(pretrain, finetune, pretrain_batches=100, parts=("encoder", "decoder", "reward", "dynamics"),
                 finetune_batches=2000, seed=0, dt=0.05, finetune_steps=2, latent_dim=2, hidden=32,
                 batch_size=200, lr=1e-3, substeps=10, eval_every=50, mu=0.5):
    """Scratch vs transferred fine-tuning on a ``finetune_steps``-step transition task.

    ``pretrain`` and ``finetune`` are ``(train, test)`` pairs. Both fine-tune
    runs share seed and architecture and differ only in initialization.
    """
    common = dict(latent_dim=latent_dim, hidden=hidden, batch_size=batch_size, lr=lr, mu=mu,
                  eval_every=eval_every, time_scale=dt)
    pre_model, pre_curves = run_model_training(*pretrain, batches=pretrain_batches, seed=seed, tau=dt,
                                               substeps=substeps, **common)
    ft_train, ft_test = finetune
    norm = Normalizer.from_data(ft_train["s"], ft_train["a"], ft_train["r"])

    def fresh():
        return NodaModel(ft_train["s"].shape[1], ft_train["a"].shape[1], latent_dim=latent_dim, hidden=hidden,
                         tau=finetune_steps * dt, time_scale=dt, substeps=substeps * finetune_steps,
                         seed=seed, norm=norm)

    _, scratch = run_model_training(ft_train, ft_test, batches=finetune_batches, seed=seed,
                                    init=fresh(), **common)
    transferred_init = transfer_load(fresh(), pre_model, parts)
    _, transferred = run_model_training(ft_train, ft_test, batches=finetune_batches, seed=seed,
                                        init=transferred_init, **common)
    return {"pretrain": pre_curves, "scratch": scratch, "transferred": transferred}


def batches_to_reach(test_curve, target):
    """First batch index at which a ``(batch, loss)`` curve is at or below ``target``."""
    for i, loss in test_curve:
        if loss <= target:
            return i
    return float("inf")

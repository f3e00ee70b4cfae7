"""Empirical Lipschitz / Wasserstein machinery for multi-step and value error bounds.

All suprema here are sample maxima: they are lower estimates of the true
constants. The bound checks are therefore exact statements about the
evaluated set (every pair and one-step error entering the estimates), which
is where :func:`verify_bounds` asserts them.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .diffcore import ContractError


class InsufficientSpreadError(ValueError):
    """Every candidate pair was closer than ``min_sep``."""


class Euclidean:
    """Euclidean distance after dividing each coordinate by ``scale``."""

    def __init__(self, scale=None):
        self.scale = None if scale is None else np.asarray(scale, dtype=np.float64)

    def _x(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x if self.scale is None else x / self.scale

    def __call__(self, x, y):
        x, y = np.asarray(x), np.asarray(y)
        if x.shape[-1] != y.shape[-1]:
            raise ContractError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
        return np.linalg.norm(self._x(x) - self._x(y), axis=-1)

    def pairwise(self, x):
        """Condensed distance vector over all ``i < j`` (scipy ``pdist`` order)."""
        return pdist(self._x(np.atleast_2d(x)))


def _pair_index(n):
    i, j = np.triu_indices(n, k=1)
    return i, j


@dataclass
class LipschitzEstimate:
    value: float
    argmax: tuple = ()     # (i, j, action index) into the inputs
    n_pairs: int = 0


def estimate_lipschitz(fn, states, actions, metric=None, min_sep=1e-6, out_metric=None):
    """Sample estimate of ``sup_a sup_{s1 != s2} d(fn(s1, a), fn(s2, a)) / d(s1, s2)``.

    ``fn(states, actions)`` is batched: states (N, l), actions (N, m). All
    ``i < j`` pairs of ``states`` are evaluated under every row of ``actions``.
    ``out_metric`` defaults to ``metric``; pass a scalar-aware one for reward maps.
    """
    metric = metric or Euclidean()
    out_metric = out_metric or metric
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if len(states) < 2:
        raise ContractError("need at least two states")
    d_in = metric.pairwise(states)
    ok = d_in >= min_sep
    if not ok.any():
        raise InsufficientSpreadError(f"all {d_in.size} pairs are closer than min_sep={min_sep}")
    best, arg = 0.0, None
    ii, jj = _pair_index(len(states))
    for k, a in enumerate(actions):
        out = np.asarray(fn(states, np.broadcast_to(a, (len(states), len(a)))), dtype=np.float64)
        if out.ndim == 1:
            out = out[:, None]
        ratio = out_metric.pairwise(out)[ok] / d_in[ok]
        m = int(np.argmax(ratio))
        if arg is None or ratio[m] > best:
            idx = np.flatnonzero(ok)[m]
            best, arg = float(ratio[m]), (int(ii[idx]), int(jj[idx]), k)
    return LipschitzEstimate(best, arg, int(ok.sum()) * len(actions))


def lipschitz_on_pairs(fn, s1, s2, actions, metric=None, min_sep=1e-6, out_metric=None):
    """Largest ratio over explicit pairs ``(s1[i], s2[i])`` under their own action ``actions[i]``.

    Pairs closer than ``min_sep`` are skipped; an all-skipped input gives 0.
    """
    metric = metric or Euclidean()
    out_metric = out_metric or metric
    s1, s2 = np.atleast_2d(s1), np.atleast_2d(s2)
    actions = np.atleast_2d(actions)
    d_in = metric(s1, s2)
    ok = d_in >= min_sep
    if not ok.any():
        return LipschitzEstimate(0.0, (), 0)
    o1 = np.asarray(fn(s1[ok], actions[ok]), dtype=np.float64)
    o2 = np.asarray(fn(s2[ok], actions[ok]), dtype=np.float64)
    if o1.ndim == 1:
        o1, o2 = o1[:, None], o2[:, None]
    ratio = out_metric(o1, o2) / d_in[ok]
    m = int(np.argmax(ratio))
    i = int(np.flatnonzero(ok)[m])
    return LipschitzEstimate(float(ratio[m]), (i, i, i), int(ok.sum()))


def estimate_reward_lipschitz(reward_fn, states, actions, metric=None, min_sep=1e-6):
    """``K_R``: as :func:`estimate_lipschitz` with an absolute-difference numerator."""
    return estimate_lipschitz(reward_fn, states, actions, metric, min_sep, out_metric=Euclidean())


def wasserstein_point(s_a, s_b, metric=None):
    """Wasserstein distance between point masses at ``s_a`` and ``s_b``: their metric distance."""
    metric = metric or Euclidean()
    s_a, s_b = np.asarray(s_a, dtype=np.float64), np.asarray(s_b, dtype=np.float64)
    if s_a.shape != s_b.shape:
        raise ContractError(f"dimension mismatch: {s_a.shape} vs {s_b.shape}")
    return float(metric(s_a, s_b))


def env_map(env):
    return lambda s, a: env.transition(s, a)


def model_map(model):
    return lambda s, a: model.predict(s, a)[0]


@dataclass
class DeltaTrace:
    delta: np.ndarray          # delta[k] for k = 0..n (delta[0] == 0)
    env_states: np.ndarray     # (n + 1, l)
    model_states: np.ndarray   # (n + 1, l)


def measure_delta_n(env, model, s0, actions, metric=None):
    """Per-step distance between env and model rollouts from a shared start."""
    metric = metric or Euclidean()
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    s_env = np.asarray(s0, dtype=np.float64)[None, :]
    s_mod = s_env.copy()
    env_states, model_states = [s_env[0]], [s_mod[0]]
    for a in actions:
        a = a[None, :]
        s_env = env.transition(s_env, a)
        s_mod = model.predict(s_mod, a)[0]
        env_states.append(s_env[0])
        model_states.append(s_mod[0])
    env_states, model_states = np.array(env_states), np.array(model_states)
    return DeltaTrace(metric(env_states, model_states), env_states, model_states)


def estimate_delta(env, model, states, actions, metric=None):
    """Max one-step distance between env and model next states over ``(states[i], actions[i])``."""
    metric = metric or Euclidean()
    states = np.atleast_2d(states)
    if len(states) == 0:
        raise ContractError("need at least one state")
    actions = np.atleast_2d(actions)
    return float(np.max(metric(env.transition(states, actions), model.predict(states, actions)[0])))


def transition_bound(delta, kbar, n):
    """``delta * sum_{i<n} kbar**i``."""
    if n < 1:
        raise ContractError("n must be >= 1")
    if delta < 0 or kbar < 0:
        raise ContractError("delta and kbar must be non-negative")
    if abs(kbar - 1.0) > 1e-12:
        return delta * (kbar ** n - 1.0) / (kbar - 1.0)
    return n * delta


def value_bound(gamma, k_r, delta, kbar):
    """``gamma K_R Delta / ((1 - gamma)(1 - gamma Kbar))``; ``inf`` when ``gamma Kbar >= 1``."""
    if gamma * kbar >= 1.0:
        return float("inf")
    return gamma * k_r * delta / ((1.0 - gamma) * (1.0 - gamma * kbar))


def estimate_value(dynamics, s, policy, gamma, horizon, reward_fn=None, r_max=None):
    """Truncated discounted return ``sum_{n=0}^{H} gamma^n R(s_n, a_n)`` and its tail bound.

    ``dynamics`` provides ``predict(s, a) -> (s_next, r)``. ``policy`` is either
    an array of at least ``H + 1`` actions or a callable ``s -> a``. Rewards come
    from ``reward_fn(s, a)`` when given (so env and model rollouts can be scored
    by the same function), else from ``dynamics``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ContractError("gamma must lie in [0, 1)")
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    s = np.asarray(s, dtype=np.float64)[None, :]
    value, seen = 0.0, 0.0
    for n in range(horizon + 1):
        a = np.atleast_1d(policy(s[0]) if callable(policy) else policy[n])[None, :]
        s_next, r_model = dynamics.predict(s, a)
        r = float(reward_fn(s, a)[0]) if reward_fn is not None else float(r_model[0])
        value += gamma ** n * r
        seen = max(seen, abs(r))
        s = s_next
    r_max = seen if r_max is None else r_max
    return value, gamma ** (horizon + 1) * r_max / (1.0 - gamma)


@dataclass
class BoundConfig:
    rollouts: int = 100
    n_max: int = 20
    gamma: float = 0.9
    n_state_samples: int = 400
    n_action_samples: int = 5
    heldout_rollouts: int = 20
    min_sep: float = 1e-6
    seed: int = 0


@dataclass
class BoundReport:
    k1: float
    k2: float
    kbar: float
    delta: float
    k_r: float
    gamma: float
    rows: list
    value_gaps: np.ndarray
    value_bound: float
    vacuous: bool
    recursive_checks: int
    recursive_violations: int
    closed_form_violations: int
    value_violations: int
    heldout_rows: list = field(default_factory=list)

    ROW_COLUMNS = ("n", "delta_measured", "bound_closed_form", "bound_recursive", "margin")

    @property
    def value_gap(self):
        return float(np.max(self.value_gaps)) if len(self.value_gaps) else 0.0

    def summary(self):
        return {
            "K1": self.k1, "K2": self.k2, "Kbar": self.kbar, "Delta": self.delta, "K_R": self.k_r,
            "gamma": self.gamma, "value_gap": self.value_gap, "value_bound": self.value_bound,
            "vacuous": int(self.vacuous), "recursive_checks": self.recursive_checks,
            "recursive_violations": self.recursive_violations,
            "closed_form_violations": self.closed_form_violations,
            "value_violations": self.value_violations,
        }

    def summary_row(self):
        return {"n": "all", "delta_measured": max(r["delta_measured"] for r in self.rows),
                "bound_closed_form": self.rows[-1]["bound_closed_form"],
                "bound_recursive": max(r["bound_recursive"] for r in self.rows),
                "margin": min(r["margin"] for r in self.rows)}


def _leq(lhs, rhs):
    # exact inequality up to accumulated rounding in the distance computations
    return lhs <= rhs + 1e-12 * (1.0 + abs(rhs))


def _rollouts(env, model, cfg, rng, count, metric):
    traces, acts = [], []
    for _ in range(count):
        s0 = env.reset(seed=int(rng.integers(2 ** 31))).s
        a = rng.uniform(env.action_low, env.action_high, size=(cfg.n_max + 1, env.act_dim))
        traces.append(measure_delta_n(env, model, s0, a[:cfg.n_max], metric))
        acts.append(a)
    return traces, acts


def verify_bounds(env, model, config=None, state_samples=None, metric=None):
    """Estimate the constants, measure rollout divergence and check both bounds.

    ``state_samples`` (e.g. buffer states) feed the sampled Lipschitz estimates;
    the rollout pairs ``(env state k, model state k)`` under action ``a_k`` are
    always added, which makes the recursive bound hold on every in-sample step.
    """
    cfg = config or BoundConfig()
    rng = np.random.default_rng(cfg.seed)
    if metric is None:
        scale = getattr(getattr(model, "norm", None), "s_std", None)
        metric = Euclidean(scale)
    traces, acts = _rollouts(env, model, cfg, rng, cfg.rollouts, metric)
    heldout, heldout_acts = _rollouts(env, model, cfg, rng, cfg.heldout_rollouts, metric)

    env_s = np.concatenate([t.env_states for t in traces])
    mod_s = np.concatenate([t.model_states for t in traces])
    pair_a = np.concatenate(acts)
    visited = np.concatenate([env_s, mod_s])
    visited_a = np.concatenate([pair_a, pair_a])
    delta_hat = estimate_delta(env, model, visited, visited_a, metric)

    if state_samples is None:
        state_samples = env_s
    state_samples = np.asarray(state_samples)
    if len(state_samples) > cfg.n_state_samples:
        state_samples = state_samples[rng.choice(len(state_samples), cfg.n_state_samples, replace=False)]
    action_samples = rng.uniform(env.action_low, env.action_high, size=(cfg.n_action_samples, env.act_dim))

    f_env, f_mod = env_map(env), model_map(model)
    k1 = max(estimate_lipschitz(f_env, state_samples, action_samples, metric, cfg.min_sep).value,
             lipschitz_on_pairs(f_env, env_s, mod_s, pair_a, metric, cfg.min_sep).value)
    k2 = max(estimate_lipschitz(f_mod, state_samples, action_samples, metric, cfg.min_sep).value,
             lipschitz_on_pairs(f_mod, env_s, mod_s, pair_a, metric, cfg.min_sep).value)
    k_r = max(estimate_reward_lipschitz(env.reward, state_samples, action_samples, metric, cfg.min_sep).value,
              lipschitz_on_pairs(env.reward, env_s, mod_s, pair_a, metric, cfg.min_sep,
                                 out_metric=Euclidean()).value)
    kbar = min(k1, k2)

    def horizon_rows(trs):
        D = np.array([t.delta for t in trs])   # (M, n_max + 1)
        rows = []
        for n in range(1, cfg.n_max + 1):
            measured = float(D[:, n].max())
            closed = transition_bound(delta_hat, kbar, n)
            rows.append({"n": n, "delta_measured": measured, "bound_closed_form": closed,
                         "bound_recursive": delta_hat + kbar * float(D[:, n - 1].max()),
                         "margin": closed - measured})
        return rows

    rows = horizon_rows(traces)
    checks = rec_bad = closed_bad = 0
    for t in traces:
        for k in range(cfg.n_max):
            checks += 1
            rec_bad += not _leq(t.delta[k + 1], delta_hat + k2 * t.delta[k])
            closed_bad += not _leq(t.delta[k + 1], transition_bound(delta_hat, kbar, k + 1))

    vacuous = cfg.gamma * kbar >= 1.0
    gaps, v_bound, v_bad = np.array([]), float("inf"), 0
    if not vacuous:
        v_bound = value_bound(cfg.gamma, k_r, delta_hat, kbar)
        disc = cfg.gamma ** np.arange(cfg.n_max + 1)
        gaps = np.array([
            abs(float(disc @ (env.reward(t.env_states, a) - env.reward(t.model_states, a))))
            for t, a in zip(traces, acts)
        ])
        v_bad = int(sum(not _leq(g, v_bound) for g in gaps))

    return BoundReport(k1, k2, kbar, delta_hat, k_r, cfg.gamma, rows, gaps, v_bound, vacuous,
                       checks, rec_bad, closed_bad, v_bad,
                       heldout_rows=horizon_rows(heldout) if heldout else [])

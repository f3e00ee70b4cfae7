"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that is printed in the terminal summary
under "acceptance criteria". The experiment-scale checks are marked ``slow``
but are part of the default run.
"""
import contextlib
import math
import os
import time

import numpy as np
import pytest

from noda import formats
from noda.cli import dispatch
from noda.diffcore import grad_check
from noda.envs import Pendulum, SpringMass, collect_random
from noda.model import AEBaselineModel, NodaModel, Normalizer, compute_loss, model_from_checkpoint
from noda.odeint import convergence_order
from noda.orchestrator import (
    TrainConfig,
    batches_to_reach,
    run_model_training,
    run_noda_sac,
    run_transfer,
    split_dataset,
    steps_to_threshold,
)
from noda.theory import BoundConfig, verify_bounds

SEEDS = (0, 1, 2)


@contextlib.contextmanager
def criterion(lines, n, title):
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as e:
        lines[n] = f"criterion {n} FAIL  {title}: {info.get('detail', '')} [{type(e).__name__}: {e}]".rstrip()
        raise
    else:
        lines[n] = f"criterion {n} PASS  {title}: {info.get('detail', '')} ({time.perf_counter() - t0:.0f}s)"


def fmt(xs):
    return "[" + ", ".join(f"{x:.3g}" for x in xs) + "]"


# --- 1: gradients -------------------------------------------------------------

def test_criterion_1_gradient_correctness(criteria):
    with criterion(criteria, 1, "loss gradients vs central differences") as info:
        t0 = time.perf_counter()
        worst = 0.0
        for i in range(100):
            rng = np.random.default_rng([1, i])
            env = Pendulum() if i % 2 == 0 else SpringMass()
            batch = collect_random(env, 6, seed=int(rng.integers(2 ** 31)), episode_len=3)
            model = NodaModel(env.obs_dim, env.act_dim, latent_dim=2, hidden=4, substeps=2,
                              seed=int(rng.integers(2 ** 31)),
                              norm=Normalizer.from_data(batch["s"], batch["a"], batch["r"]))
            rep = grad_check(lambda P: compute_loss(model, batch, P=P), model.params, tol=1e-4)
            worst = max(worst, rep.max_rel_error)
            assert rep.passed, f"model {i}: {rep}"
        elapsed = time.perf_counter() - t0
        info["detail"] = f"100 models, worst relative error {worst:.2e}"
        assert elapsed < 120.0


# --- 2: integrator ------------------------------------------------------------

def test_criterion_2_integrator_order(criteria):
    with criterion(criteria, 2, "integrator accuracy and order") as info:
        decay = lambda u, a, t: -u
        exact = np.array([math.exp(-1.0)])
        err100 = convergence_order(decay, [1.0], None, "rk4", [100], exact, tau=1.0)[0][1]
        errs = [e for _, e in convergence_order(decay, [1.0], None, "rk4", [5, 10, 20, 40], exact, tau=1.0)]
        rk4 = [errs[i] / errs[i + 1] for i in range(3)]
        errs = [e for _, e in convergence_order(decay, [1.0], None, "euler", [50, 100, 200, 400], exact, tau=1.0)]
        euler = [errs[i] / errs[i + 1] for i in range(3)]
        info["detail"] = f"RK4 error at S=100 {err100:.2e}, RK4 ratios {fmt(rk4)}, Euler ratios {fmt(euler)}"
        assert err100 <= 1e-8
        assert all(12.0 <= r <= 20.0 for r in rk4)
        assert all(1.8 <= r <= 2.2 for r in euler)


# --- 3: physics ---------------------------------------------------------------

def test_criterion_3_physics_fidelity(criteria):
    with criterion(criteria, 3, "pendulum energy and torque clip") as info:
        env = Pendulum()
        env.reset(seed=0)
        h, worst = env.hamiltonian_energy(env.state.u), 0.0
        for _ in range(500):
            u = env.step([0.0])[0].u
            assert abs(u[1]) < env.p_max     # speed clip stays inactive
            h2 = env.hamiltonian_energy(u)
            worst = max(worst, abs(h2 - h))
            h = h2
        a, b = Pendulum(), Pendulum()
        a.reset(seed=1)
        b.reset(seed=1)
        same = all(a.step([5.0])[0].u.tobytes() == b.step([2.0])[0].u.tobytes() for _ in range(200))
        info["detail"] = f"max |dH| per step {worst:.2e}, torque 5 == torque 2: {same}"
        assert worst <= 1e-6 and same


# --- 4, 7: model learning and bounds --------------------------------------------

@pytest.fixture(scope="module")
def pendulum_split():
    return split_dataset(collect_random(Pendulum(), 25_000, seed=2024), 20_000)


@pytest.fixture(scope="module")
def model_runs(pendulum_split):
    train, test = pendulum_split
    runs = {}
    for kind in ("noda", "ae"):
        for seed in SEEDS:
            runs[kind, seed] = run_model_training(train, test, kind, batches=2000, batch_size=200, lr=1e-3,
                                                  seed=seed, latent_dim=4, hidden=32, tau=0.05,
                                                  time_scale=0.05)
    return runs


@pytest.mark.slow
def test_criterion_4_model_learning(criteria, model_runs):
    with criterion(criteria, 4, "pendulum one-step prediction, NODA vs AE") as info:
        noda = [model_runs["noda", s][1]["test"][-1][1] for s in SEEDS]
        ae = [model_runs["ae", s][1]["test"][-1][1] for s in SEEDS]
        m = model_runs["noda", 0][0]
        gap = abs(AEBaselineModel.matched(m).n_params - m.n_params) / m.n_params
        info["detail"] = (f"NODA test MSE {fmt(noda)} (median {np.median(noda):.3g}), "
                          f"AE {fmt(ae)} (median {np.median(ae):.3g}), parameter gap {gap:.2%}")
        assert model_runs["ae", 0][0].n_params == AEBaselineModel.matched(m).n_params
        assert gap <= 0.01
        assert np.median(noda) <= 1e-3
        assert np.median(noda) <= np.median(ae)


@pytest.mark.slow
def test_criterion_7_bound_soundness(criteria, model_runs, pendulum_split):
    with criterion(criteria, 7, "transition and value bounds on the trained model") as info:
        t0 = time.perf_counter()
        model = model_runs["noda", 0][0]
        rep = verify_bounds(Pendulum(), model, BoundConfig(rollouts=100, n_max=20, gamma=0.9),
                            state_samples=pendulum_split[0]["s"])
        elapsed = time.perf_counter() - t0
        value = ("vacuous (gamma*Kbar >= 1)" if rep.vacuous else
                 f"max gap {rep.value_gap:.3g} vs bound {rep.value_bound:.3g}")
        info["detail"] = (f"Delta {rep.delta:.3g}, K1 {rep.k1:.3g}, K2 {rep.k2:.3g}; "
                          f"{rep.recursive_checks} recursive checks, {rep.recursive_violations} violations, "
                          f"{rep.closed_form_violations} closed-form violations; value {value}")
        assert rep.recursive_checks == 100 * 20
        assert rep.recursive_violations == 0
        assert rep.closed_form_violations == 0
        assert all(r["margin"] >= -1e-12 * (1 + r["bound_closed_form"]) for r in rep.rows)
        if not rep.vacuous:
            assert rep.value_violations == 0 and len(rep.value_gaps) == 100
        assert elapsed < 300.0


# --- 5: latent sweep ----------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_latent_dimension_sweep(criteria):
    with criterion(criteria, 5, "spring-mass latent dimension sweep") as info:
        train, test = split_dataset(collect_random(SpringMass(), 25_000, seed=77), 20_000)
        loss = {k: [] for k in (2, 4, 8)}
        for seed in SEEDS:
            for k in loss:
                _, curves = run_model_training(train, test, "noda", batches=2000, seed=seed, latent_dim=k,
                                               hidden=32, tau=SpringMass().dt, time_scale=SpringMass().dt)
                loss[k].append(curves["test"][-1][1])
        med = {k: float(np.median(v)) for k, v in loss.items()}
        info["detail"] = ", ".join(f"dim {k}: {fmt(v)}" for k, v in loss.items()) + \
            f"; median 4/8 = {med[4] / med[8]:.3g}, 2/4 = {med[2] / med[4]:.3g}"
        assert med[4] <= 1.5 * med[8]
        assert med[2] >= 2.0 * med[4]


# --- 6: transfer --------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_transfer(criteria):
    with criterion(criteria, 6, "pendulum 1-step to 2-step transfer") as info:
        ratios = []
        for seed in SEEDS:
            pre = split_dataset(collect_random(Pendulum(), 25_000, seed=[seed, 1]), 20_000)
            fine = split_dataset(collect_random(Pendulum(), 25_000, seed=[seed, 2], hold=2), 20_000)
            res = run_transfer(pre, fine, pretrain_batches=100, finetune_batches=2000, seed=seed, latent_dim=4)
            target = res["scratch"]["test"][-1][1]
            ratios.append(batches_to_reach(res["transferred"]["test"], target) / 2000)
        info["detail"] = f"batches-to-scratch-final ratios {fmt(ratios)}, median {np.median(ratios):.3g} (need <= 0.5)"
        assert np.median(ratios) <= 0.5


# --- 8: reinforcement learning ------------------------------------------------

@pytest.mark.slow
def test_criterion_8_noda_sac(criteria):
    with criterion(criteria, 8, "pendulum NODA-SAC vs plain SAC") as info:
        seeds = (0, 1, 2, 3)
        final, reach = {"noda": [], "none": []}, {"noda": [], "none": []}
        for kind in final:
            for seed in seeds:
                _, _, metrics, _ = run_noda_sac(TrainConfig(world_model=kind, seed=seed))
                assert metrics.rows[-1]["env_steps"] == 30_000
                final[kind].append(metrics.rows[-1]["eval_return_mean"])
                reach[kind].append(steps_to_threshold(metrics, -300.0))
        med_noda, med_sac = np.median(reach["noda"]), np.median(reach["none"])
        info["detail"] = (f"final returns NODA {fmt(final['noda'])}, SAC {fmt(final['none'])}; "
                          f"steps to -300 NODA {reach['noda']}, SAC {reach['none']}")
        assert np.median(final["noda"]) >= -300.0
        assert med_noda <= 1.1 * med_sac


# --- 9: reproducibility and formats -------------------------------------------

TINY = ["--quiet", "--set", "seed=5", "--set", "n_train=300", "--set", "n_test=100", "--set", "batches=20",
        "--set", "hidden_width=8", "--set", "eval_every=10", "--set", "substeps=2", "--set", "latent_dim=2"]
TINY_RL = ["--set", "n1=100", "--set", "n2=100", "--set", "n3=2", "--set", "n4=300", "--set", "b1=32",
           "--set", "b2=20", "--set", "model_batch=32", "--set", "eval_interval=100", "--set", "eval_episodes=1",
           "--set", "episode_len=50", "--set", "agent_hidden=16", "--set", "test_size=50"]


def run_all(root):
    """Every command once; returns ``{relative path: bytes}`` of everything written."""
    jobs = [
        ("collect", ["--set", "n_steps=200"]),
        ("train-model", []),
        ("train-rl", TINY_RL),
        ("sweep-dim", ["--set", "dims=2,4"]),
        ("transfer", ["--set", "pretrain_batches=5"]),
        ("verify-bounds", ["--set", f"model_ckpt={root}/train-model/model.ckpt", "--set", "rollouts=5",
                           "--set", "n_max=5", "--set", "heldout_rollouts=2"]),
        ("eval", ["--set", f"model_ckpt={root}/train-model/model.ckpt",
                  "--set", f"agent_ckpt={root}/train-rl/agent.ckpt", "--set", "eval_episodes=2",
                  "--set", "horizon=20"]),
    ]
    for cmd, extra in jobs:
        assert dispatch([cmd, "--out", f"{root}/{cmd}"] + TINY + extra) == 0, cmd
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_criterion_9_reproducibility_and_formats(criteria, tmp_path):
    with criterion(criteria, 9, "byte-identical reruns and exact round trips") as info:
        a, b = run_all(tmp_path / "a"), run_all(tmp_path / "b")
        assert sorted(a) == sorted(b)
        differing = [k for k in a if a[k] != b[k]]
        assert not differing, differing

        params, meta = formats.load_checkpoint(tmp_path / "a" / "train-model" / "model.ckpt")
        again = formats.decode_checkpoint(formats.encode_checkpoint(params, meta))
        assert again[1] == meta and all(again[0][k].tobytes() == params[k].tobytes() for k in params)
        model = model_from_checkpoint(params, meta)
        assert all(model.params[k].tobytes() == params[k].tobytes() for k in params)

        data = formats.load_dataset(tmp_path / "a" / "collect" / "data.bin")
        assert formats.encode_dataset(data) == a[os.path.join("collect", "data.bin")]

        raw = a[os.path.join("train-model", "model.ckpt")]
        rejected = 0
        for cut in range(0, len(raw), max(1, len(raw) // 200)):
            with pytest.raises(formats.FormatError):
                formats.decode_checkpoint(raw[:cut])
            rejected += 1
        info["detail"] = f"{len(a)} files identical across reruns, {rejected} truncations rejected"

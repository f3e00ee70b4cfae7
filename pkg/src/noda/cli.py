"""``noda`` command: collect data, train models and agents, sweep, transfer, verify bounds, evaluate.

Usage::

    noda COMMAND [--config PATH] [--set key=value ...] [--out DIR]

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import formats
from .agent import agent_from_checkpoint, agent_metadata, agent_params, evaluate_policy
from .envs import collect_random, make_env
from .model import model_from_checkpoint, prediction_mse
from .orchestrator import (
    TrainConfig,
    loss_rows,
    run_model_training,
    run_noda_sac,
    run_transfer,
    split_dataset,
)
from .theory import BoundConfig, verify_bounds

log = logging.getLogger("noda")

COMMANDS = ("collect", "train-model", "train-rl", "sweep-dim", "transfer", "verify-bounds", "eval")

# keys shared with TrainConfig take its defaults; the rest drive the other commands
DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
DEFAULTS.update({
    "model_kind": "noda",        # train-model: noda or ae
    "batches": 2000,             # gradient steps for model-only commands
    "eval_every": 50,            # test-loss interval (batches)
    "n_steps": 25000,            # collect: transitions
    "n_train": 20000,
    "n_test": 5000,
    "hold": 1,                   # collect: env steps per held action
    "dataset": "",               # optional dataset file instead of fresh collection
    "dims": "2,4,8",
    "parts": "encoder,decoder,reward,dynamics",
    "pretrain_batches": 100,
    "finetune_steps": 2,
    "horizon": 200,              # eval episode length
    "rollouts": 100,
    "n_max": 20,
    "heldout_rollouts": 20,
    "bound_gamma": 0.9,
    "model_ckpt": "",
    "agent_ckpt": "",
})


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="noda", description="Neural-ODE world models and model-assisted SAC.")
    p.add_argument("command", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--config", help="flat key = value settings file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a setting (repeatable; beats the config file)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--quiet", action="store_true")
    return p


def _train_config(cfg):
    return TrainConfig(**{k: cfg[k] for k in DEFAULTS if k in TrainConfig.__dataclass_fields__})


def _model_kwargs(cfg, env):
    return dict(latent_dim=cfg["latent_dim"], hidden=cfg["hidden_width"], tau=cfg["tau"] or env.dt,
                time_scale=env.dt, substeps=cfg["substeps"], method=cfg["integrator"], mu=cfg["mu"],
                batch_size=cfg["model_batch"], lr=cfg["lr_model"], eval_every=cfg["eval_every"])


def _dataset(cfg, env, stream, hold=None):
    if cfg["dataset"]:
        data = formats.load_dataset(cfg["dataset"])
    else:
        seed = np.random.SeedSequence([cfg["seed"], stream]).generate_state(1)[0]
        data = collect_random(env, cfg["n_train"] + cfg["n_test"], seed=int(seed),
                              hold=cfg["hold"] if hold is None else hold)
    if len(data["s"]) <= cfg["n_train"]:
        raise ValueError(f"dataset has {len(data['s'])} records; need more than n_train={cfg['n_train']}")
    return split_dataset(data, cfg["n_train"])


def _load_model(cfg):
    if not cfg["model_ckpt"]:
        raise UsageError("model_ckpt must be set")
    return model_from_checkpoint(*formats.load_checkpoint(cfg["model_ckpt"]))


def cmd_collect(cfg, out):
    env = make_env(cfg["env"], seed=cfg["seed"])
    data = collect_random(env, cfg["n_steps"], seed=cfg["seed"], episode_len=cfg["episode_len"],
                          hold=cfg["hold"])
    formats.save_dataset(data, os.path.join(out, "data.bin"))


def cmd_train_model(cfg, out):
    env = make_env(cfg["env"])
    train, test = _dataset(cfg, env, 0)
    model, curves = run_model_training(train, test, model_kind=cfg["model_kind"], batches=cfg["batches"],
                                       seed=cfg["seed"], **_model_kwargs(cfg, env))
    meta = {**model.metadata(), "env": cfg["env"]}
    formats.save_checkpoint(model.params, meta, os.path.join(out, "model.ckpt"))
    formats.write_metrics(loss_rows(curves), formats.LOSSES, os.path.join(out, "losses.csv"))


def cmd_train_rl(cfg, out):
    tc = _train_config(cfg)
    agent, model, metrics, _ = run_noda_sac(tc)
    formats.write_metrics(metrics.rows, formats.RL, os.path.join(out, "rl.csv"))
    formats.save_checkpoint(agent_params(agent), {**agent_metadata(agent), "env": cfg["env"]},
                            os.path.join(out, "agent.ckpt"))
    if model is not None:
        formats.save_checkpoint(model.params, {**model.metadata(), "env": cfg["env"]},
                                os.path.join(out, "model.ckpt"))


def cmd_sweep_dim(cfg, out):
    env = make_env(cfg["env"])
    train, test = _dataset(cfg, env, 0)
    kw = _model_kwargs(cfg, env)
    kw.pop("latent_dim")
    rows = []
    for k in formats.split_list(cfg["dims"], int):
        _, curves = run_model_training(train, test, latent_dim=k, batches=cfg["batches"], seed=cfg["seed"], **kw)
        formats.write_metrics(loss_rows(curves), formats.LOSSES, os.path.join(out, f"losses_dim{k}.csv"))
        rows.append({"dim": k, "final_test_loss": curves["test"][-1][1]})
    formats.write_metrics(rows, ("dim", "final_test_loss"), os.path.join(out, "sweep.csv"))


def cmd_transfer(cfg, out):
    env = make_env(cfg["env"])
    pre = _dataset(cfg, env, 0, hold=1)
    ft = _dataset({**cfg, "dataset": ""}, env, 1, hold=cfg["finetune_steps"])
    res = run_transfer(pre, ft, pretrain_batches=cfg["pretrain_batches"], parts=formats.split_list(cfg["parts"]),
                       finetune_batches=cfg["batches"], seed=cfg["seed"], dt=env.dt,
                       finetune_steps=cfg["finetune_steps"], latent_dim=cfg["latent_dim"],
                       hidden=cfg["hidden_width"], batch_size=cfg["model_batch"], lr=cfg["lr_model"],
                       substeps=cfg["substeps"], eval_every=cfg["eval_every"], mu=cfg["mu"])
    transferred = dict(res["transferred"]["test"])
    rows = [{"batch": b, "scratch_test_loss": l, "transferred_test_loss": transferred[b]}
            for b, l in res["scratch"]["test"]]
    formats.write_metrics(rows, ("batch", "scratch_test_loss", "transferred_test_loss"),
                          os.path.join(out, "transfer.csv"))


def cmd_verify_bounds(cfg, out):
    model = _load_model(cfg)
    env = make_env(cfg["env"])
    bc = BoundConfig(rollouts=cfg["rollouts"], n_max=cfg["n_max"], gamma=cfg["bound_gamma"],
                     heldout_rollouts=cfg["heldout_rollouts"], seed=cfg["seed"])
    rep = verify_bounds(env, model, bc)
    formats.write_metrics(rep.rows + [rep.summary_row()], formats.BOUNDS, os.path.join(out, "bounds.csv"))
    if rep.heldout_rows:
        formats.write_metrics(rep.heldout_rows, formats.BOUNDS, os.path.join(out, "bounds_heldout.csv"))
    formats.write_metrics([{"key": k, "value": v} for k, v in rep.summary().items()], ("key", "value"),
                          os.path.join(out, "bounds_summary.csv"))
    bad = rep.recursive_violations + rep.closed_form_violations + rep.value_violations
    if bad:
        log.warning("%d in-sample bound violations", bad)


def cmd_eval(cfg, out):
    env = make_env(cfg["env"])
    row = {}
    if cfg["agent_ckpt"]:
        agent = agent_from_checkpoint(*formats.load_checkpoint(cfg["agent_ckpt"]))
        row["eval_return_mean"], row["eval_return_std"] = evaluate_policy(
            agent, env, cfg["eval_episodes"], cfg["horizon"], seed=cfg["seed"])
    if cfg["model_ckpt"]:
        seed = int(np.random.SeedSequence([cfg["seed"], 2]).generate_state(1)[0])
        test = collect_random(env, cfg["n_test"], seed=seed, episode_len=cfg["episode_len"])
        row["model_test_mse"] = prediction_mse(_load_model(cfg), test)
    if not row:
        raise UsageError("eval needs agent_ckpt and/or model_ckpt")
    formats.write_metrics([row], tuple(row), os.path.join(out, "eval.csv"))


HANDLERS = {
    "collect": cmd_collect, "train-model": cmd_train_model, "train-rl": cmd_train_rl,
    "sweep-dim": cmd_sweep_dim, "transfer": cmd_transfer, "verify-bounds": cmd_verify_bounds,
    "eval": cmd_eval,
}


def dispatch(argv):
    """Run one command; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        if args.command not in HANDLERS:
            raise UsageError(f"unknown command {args.command!r}")
        if not args.out:
            raise UsageError("--out DIR is required")
        text = None
        if args.config:
            try:
                with open(args.config) as fh:
                    text = fh.read()
            except OSError as e:
                raise UsageError(f"cannot read config: {e}") from None
        try:
            cfg = formats.resolve_config(DEFAULTS, text, args.overrides, source=args.config or "config")
        except formats.ConfigError as e:
            raise UsageError(str(e)) from None
    except UsageError as e:
        print(f"noda: error: {e}", file=sys.stderr)
        print(f"usage: noda {{{','.join(COMMANDS)}}} [--config PATH] [--set KEY=VALUE] --out DIR",
              file=sys.stderr)
        return 1
    if not args.quiet:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        os.makedirs(args.out, exist_ok=True)
        HANDLERS[args.command](cfg, args.out)
    except UsageError as e:
        print(f"noda: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"noda: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

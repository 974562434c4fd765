"""``sdac`` command line.

    sdac train          [--config FILE] [--preset desk|full] [--seed N] [--epochs N] [--out DIR]
    sdac eval           --checkpoint FILE [--config FILE] [--episodes N] [--seed N] [--out DIR]
    sdac toy-gradinteg  [--eps X] [--zeta X] [--out DIR]
    sdac toy-tdlambda   [--seeds N] [--out DIR]
    sdac oracle-check

Outputs go to ``--out``, else ``$SDAC_OUTPUT_DIR``, else ``./sdac-output``.
Exit codes: 0 success, 1 configuration error, 2 numerical abort, 3 failed oracle check.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import gradinteg, oracles, svgplot, toys
from .envs import ChainTask, PointMassTask
from .trainer import (ConfigError, TrainConfig, TrainingAbort, desk_config, load_agent, train)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3
OUTPUT_ENV = "SDAC_OUTPUT_DIR"
ENVIRONMENTS = {"point-mass": PointMassTask, "chain": ChainTask}
INT_TUPLES = {"policy_hidden", "critic_hidden"}

log = logging.getLogger("sdac")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("arguments", message)


# -- configuration files ----------------------------------------------------------

def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(int(x) for x in items) if key in INT_TUPLES else tuple(float(x) for x in items)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r}") from None


def _env_fields(cls) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls) if not f.name.startswith("_")}


def load_config(path: Optional[str], base: TrainConfig):
    """Read an INI file with ``[train]`` and ``[env]`` sections; unknown names are errors."""
    env_name, env_kw = "point-mass", {}
    if path is None:
        return base, PointMassTask()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError("config", str(exc)) from None
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    for section in parser.sections():
        if section not in ("train", "env"):
            raise ConfigError(f"[{section}]", "unknown section")
    overrides = {}
    defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    if parser.has_section("train"):
        for key, raw in parser.items("train"):
            if key not in defaults:
                raise ConfigError(key, "unknown key in [train]")
            overrides[key] = _convert(key, raw, defaults[key])
    if parser.has_section("env"):
        items = dict(parser.items("env"))
        env_name = items.pop("name", env_name)
        if env_name not in ENVIRONMENTS:
            raise ConfigError("name", f"unknown environment {env_name!r}")
        fields = _env_fields(ENVIRONMENTS[env_name])
        for key, raw in items.items():
            if key not in fields:
                raise ConfigError(key, f"unknown key in [env] for {env_name}")
            env_kw[key] = _convert(key, raw, fields[key])
    cfg = dataclasses.replace(base, **overrides)
    return cfg, ENVIRONMENTS[env_name](**env_kw)


def output_dir(arg: Optional[str]) -> str:
    out = arg or os.environ.get(OUTPUT_ENV) or "sdac-output"
    os.makedirs(out, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------------

def _base(preset: str) -> TrainConfig:
    return desk_config() if preset == "desk" else TrainConfig()


def cmd_train(args) -> int:
    cfg, env = load_config(args.config, _base(args.preset))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    cfg.validate()
    out = output_dir(args.out)

    def report(row):
        if args.verbose:
            costs = " ".join(f"F_{k + 1}={row[f'F_{k + 1}']:.3f}" for k in range(env.n_costs))
            print(f"epoch {row['epoch']:4d}  J={row['return_estimate']:.3f}  {costs}  "
                  f"kl={row['kl']:.2e}  {row['step_kind']}", flush=True)

    res = train(cfg, env, out, on_epoch=report)
    print(f"metrics: {res.metrics_path}")
    print(f"checkpoint: {res.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, env = load_config(args.config, _base(args.preset))
    if not os.path.exists(args.checkpoint):
        raise ConfigError("checkpoint", f"no such file: {args.checkpoint}")
    try:
        agent = load_agent(args.checkpoint, cfg, env)
    except ValueError as exc:
        raise ConfigError("checkpoint", str(exc)) from None
    out = output_dir(args.out)
    rng = np.random.default_rng(args.seed)
    rows = []
    for ep in range(args.episodes):
        obs = env.reset(rng)
        ret, costs = 0.0, np.zeros(env.n_costs)
        for t in range(100_000):
            ev = agent.policy.sample(agent.params, obs, rng.standard_normal(env.action_dim))
            tr = env.step(ev.action, rng)
            ret += cfg.gamma ** t * tr.reward
            costs += cfg.gamma ** t * tr.costs
            if tr.done or tr.truncated:
                break
            obs = tr.next_state
        rows.append([ep, ret, *costs])
    path = os.path.join(out, "eval.csv")
    with open(path, "w", newline="") as fh:
        fh.write("# sdac-eval v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "discounted_return"] + [f"discounted_cost_{k + 1}" for k in range(env.n_costs)])
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    arr = np.array([r[1:] for r in rows])
    print(f"episodes: {args.episodes}  mean discounted return: {arr[:, 0].mean():.4f}")
    for k in range(env.n_costs):
        print(f"mean discounted cost {k + 1}: {arr[:, k + 1].mean():.4f}  (threshold {cfg.thresholds[k]:.4f})")
    print(f"written: {path}")
    return EXIT_OK


def cmd_toy_gradinteg(args) -> int:
    if not (args.eps > 0 and args.zeta > 0):
        raise ConfigError("eps/zeta", "must be positive")
    out = output_dir(args.out)
    problem = gradinteg.toy_problem()
    ours = gradinteg.recover_until_feasible(problem, gradinteg.TOY_START, args.eps, args.zeta)
    naive = gradinteg.naive_recovery(problem, gradinteg.TOY_START, args.eps, args.zeta)
    p1 = os.path.join(out, "gradinteg_trace.csv")
    p2 = os.path.join(out, "naive_trace.csv")
    gradinteg.write_trace_csv(p1, ours)
    gradinteg.write_trace_csv(p2, naive)
    svg = os.path.join(out, "gradinteg.svg")
    svgplot.line_chart(svg, [("gradient integration", [p.x[0] for p in ours], [p.x[1] for p in ours]),
                             ("naive", [p.x[0] for p in naive], [p.x[1] for p in naive])],
                       title="Recovery paths", xlabel="x1", ylabel="x2", markers=True)
    for name, tr in (("gradient integration", ours), ("naive", naive)):
        state = "feasible" if tr[-1].feasible else "infeasible"
        print(f"{name}: {len(tr) - 1} steps, {state} at ({tr[-1].x[0]:.4f}, {tr[-1].x[1]:.4f})")
    print(f"written: {p1}, {p2}, {svg}")
    return EXIT_OK if ours[-1].feasible else EXIT_CHECK


def cmd_toy_tdlambda(args) -> int:
    if args.seeds < 1:
        raise ConfigError("seeds", "must be >= 1")
    out = output_dir(args.out)
    lams = toys.LAMBDAS
    dist = toys.run_grid(lams, range(args.seeds))
    means, stds = toys.summarize(dist)
    p1 = os.path.join(out, "tdlambda_distances.csv")
    p2 = os.path.join(out, "tdlambda_summary.csv")
    toys.write_distances_csv(p1, lams, dist)
    toys.write_summary_csv(p2, lams, means, stds)
    svg = os.path.join(out, "tdlambda.svg")
    iters = np.arange(1, dist.shape[2] + 1)
    svgplot.line_chart(svg, [(f"lambda={lam}", iters, dist[i].mean(axis=0)) for i, lam in enumerate(lams)],
                       title="W1 to Monte Carlo returns", xlabel="iteration", ylabel="mean W1")
    print("lambda  " + "  ".join(f"{'it ' + str(c):>16}" for c in toys.CHECKPOINTS))
    for i, lam in enumerate(lams):
        print(f"{lam:<6}  " + "  ".join(f"{m:.4f} ({s:.4f})".rjust(16) for m, s in zip(means[i], stds[i])))
    print(f"written: {p1}, {p2}, {svg}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    results = oracles.run_all()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdac", description="Safe distributional actor-critic at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train an agent")
    t.add_argument("--config")
    t.add_argument("--preset", choices=("desk", "full"), default="desk")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--preset", choices=("desk", "full"), default="desk")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("toy-gradinteg", help="two-constraint recovery toy")
    g.add_argument("--eps", type=float, default=0.5)
    g.add_argument("--zeta", type=float, default=0.1)
    g.add_argument("--out")
    g.set_defaults(func=cmd_toy_gradinteg)

    d = sub.add_parser("toy-tdlambda", help="two-state TD(lambda) toy")
    d.add_argument("--seeds", type=int, default=5)
    d.add_argument("--out")
    d.set_defaults(func=cmd_toy_tdlambda)

    o = sub.add_parser("oracle-check", help="brute-force cross-checks")
    o.set_defaults(func=cmd_oracle_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, gradinteg.RecoveryError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

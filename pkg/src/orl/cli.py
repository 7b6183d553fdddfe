"""Command line entry point: ``orl {gen-data,mix-data,train,profile,report}``.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numeric failure in
every seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .agent import Td3bcConfig
from .datasets import (
    DATASET_TIERS,
    compute_normalization,
    episode_returns,
    generate_dataset,
    load_dataset,
    mix_datasets,
    save_dataset,
)
from .envs import env_names, get_spec
from .errors import FormatError, UnknownEnvironmentError
from .runner import (
    PAPER_EVAL_EVERY,
    PAPER_STEPS,
    ExperimentConfig,
    curve_csv,
    curve_report,
    default_output_dir,
    profile_training,
    run_experiment,
    stability_csv,
    suite_arms,
    write_artifacts,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
GENERATED_TIERS = [t for t in DATASET_TIERS if t != "mixed"]
log = logging.getLogger("orl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_data_source(p):
    p.add_argument("--dataset", help="dataset file written by gen-data")
    p.add_argument("--env", help=f"environment, one of {env_names()}")
    p.add_argument("--tier", choices=GENERATED_TIERS)
    p.add_argument("--size", type=int)
    p.add_argument("--data-seed", type=int)


def build_parser():
    parser = _Parser(prog="orl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="roll out a scripted policy into a dataset file")
    g.add_argument("--env", required=True)
    g.add_argument("--tier", required=True, choices=GENERATED_TIERS)
    g.add_argument("--size", type=int, default=100_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output path (default under $ORL_OUTPUT_DIR)")

    m = sub.add_parser("mix-data", help="half of each of two datasets, concatenated")
    m.add_argument("first")
    m.add_argument("second")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train TD3+BC (or an ablation arm) over seeds")
    t.add_argument("--config", help="TOML file; command-line flags take precedence")
    _add_data_source(t)
    t.add_argument("--seeds", type=int, nargs="+")
    t.add_argument("--total-steps", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--episodes-per-eval", type=int)
    t.add_argument("--out", help="output directory (default under $ORL_OUTPUT_DIR)")
    t.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    t.add_argument("--alpha", type=float)
    t.add_argument("--no-bc", action="store_true", help="drop the behavior-cloning term")
    t.add_argument("--no-q", action="store_true", help="drop the Q term (pure BC)")
    t.add_argument("--no-norm", action="store_true", help="skip state normalization")
    t.add_argument("--paper-parity", action="store_true",
                   help="256x256 networks, 1M steps, evaluation every 5000 steps")
    t.add_argument("--suite", choices=["ablation", "alpha"],
                   help="run every arm of an ablation or alpha sweep into subdirectories")

    p = sub.add_parser("profile", help="time training steps of TD3+BC, TD3 and BC")
    _add_data_source(p)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--block", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paper-parity", action="store_true")
    p.add_argument("--out", help="timing JSON path (default: stdout only)")

    r = sub.add_parser("report", help="learning curves and stability table from CSV logs")
    r.add_argument("logs", nargs="+")
    r.add_argument("--out", required=True, help="output directory")
    return parser


# -- configuration ------------------------------------------------------------

_AGENT_KEYS = {f.name for f in fields(Td3bcConfig)}
_EXP_KEYS = {"env_name", "dataset_path", "tier", "size", "data_seed", "total_steps",
             "eval_every", "episodes_per_eval", "seeds", "output_dir"}


def read_config_file(path):
    """TOML with experiment keys at top level and agent keys at top level or
    under an ``[agent]`` table."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    agent = dict(raw.pop("agent", {}))
    exp = {}
    for k, v in raw.items():
        if k in _EXP_KEYS:
            exp[k] = v
        elif k in _AGENT_KEYS:
            agent[k] = v
        else:
            raise UsageError(f"unknown config key {k!r} in {path}")
    unknown = set(agent) - _AGENT_KEYS
    if unknown:
        raise UsageError(f"unknown agent keys {sorted(unknown)} in {path}")
    return exp, agent


def experiment_from_args(args) -> ExperimentConfig:
    exp, agent = read_config_file(args.config) if args.config else ({}, {})
    if args.paper_parity:
        agent.setdefault("hidden_sizes", [256, 256])
        exp.setdefault("total_steps", PAPER_STEPS)
        exp.setdefault("eval_every", PAPER_EVAL_EVERY)
    flag_map = {"env": "env_name", "dataset": "dataset_path", "tier": "tier", "size": "size",
                "data_seed": "data_seed", "seeds": "seeds", "total_steps": "total_steps",
                "eval_every": "eval_every", "episodes_per_eval": "episodes_per_eval",
                "out": "output_dir"}
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            exp[key] = value
    if args.alpha is not None:
        agent["alpha"] = args.alpha
    if args.no_bc:
        agent["use_bc_term"] = False
    if args.no_q:
        agent["use_q_term"] = False
    if args.no_norm:
        agent["use_state_norm"] = False
    if exp.get("dataset_path") and "env_name" not in exp:
        exp["env_name"] = load_dataset(exp["dataset_path"]).env_name
    try:
        return ExperimentConfig(**exp, agent=Td3bcConfig(**agent))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _dataset_from_args(args):
    if args.dataset:
        return load_dataset(args.dataset)
    if not args.env:
        raise UsageError("give --dataset or --env (with --tier/--size/--data-seed)")
    return generate_dataset(get_spec(args.env), args.tier or "expert", args.size or 100_000,
                            args.data_seed or 0)


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args):
    spec = get_spec(args.env)
    d = generate_dataset(spec, args.tier, args.size, args.seed)
    d = replace(d, stats=compute_normalization(d))
    out = Path(args.out) if args.out else (
        default_output_dir() / f"{spec.name}-{args.tier}-{args.size}-s{args.seed}.orld")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(d, out)
    load_dataset(out)  # verifies the record checksum
    returns = episode_returns(d, spec.horizon)
    summary = {
        "path": str(out),
        "env": spec.name,
        "tier": args.tier,
        "size": len(d),
        "episodes": int(returns.size),
        "mean_episode_return": float(returns.mean()) if returns.size else None,
        "mu": d.stats.mu.tolist(),
        "sigma": d.stats.sigma.tolist(),
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_mix_data(args):
    d = mix_datasets(load_dataset(args.first), load_dataset(args.second), args.seed)
    d = replace(d, stats=compute_normalization(d))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(d, args.out)
    print(json.dumps({"path": args.out, "size": len(d), "env": d.env_name}))
    return EXIT_OK


def _progress(seed, step, rec):
    log.info("seed %s step %d mean return %.3f", seed, step, rec.mean_return)


def _train_one(exp, out_dir, jobs):
    results, report = run_experiment(exp, jobs=jobs, progress=_progress)
    paths = write_artifacts(exp, results, report, out_dir)
    print(json.dumps({"out": str(out_dir), "mean": report.mean, "std": report.std,
                      "per_seed_final": {str(k): v for k, v in report.per_seed.items()},
                      "failed_seeds": {str(k): v for k, v in report.failed.items()}}))
    return paths, all(r.log is None for r in results)


def cmd_train(args):
    exp = experiment_from_args(args)
    out_dir = Path(exp.output_dir) if exp.output_dir else default_output_dir() / "train"
    if not args.suite:
        _, all_failed = _train_one(exp, out_dir, args.jobs)
        return EXIT_NUMERIC if all_failed else EXIT_OK
    failures = 0
    for name, overrides in suite_arms(args.suite).items():
        arm = replace(exp, agent=replace(exp.agent, **overrides))
        _, all_failed = _train_one(arm, out_dir / name, args.jobs)
        failures += all_failed
    return EXIT_NUMERIC if failures == len(suite_arms(args.suite)) else EXIT_OK


def cmd_profile(args):
    raw = _dataset_from_args(args)
    base = Td3bcConfig.paper_parity() if args.paper_parity else Td3bcConfig()
    timing = profile_training(raw, base, steps=args.steps, block=args.block, seed=args.seed)
    text = json.dumps(timing, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_report(args):
    curve, table = curve_report(args.logs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").write_text(curve_csv(curve))
    (out / "stability.csv").write_text(stability_csv(table))
    print(json.dumps({"curve": str(out / "curve.csv"), "stability": str(out / "stability.csv"),
                      "logs": len(table)}))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "mix-data": cmd_mix_data, "train": cmd_train,
            "profile": cmd_profile, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, UnknownEnvironmentError) as exc:
        print(f"orl: error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"orl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"orl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

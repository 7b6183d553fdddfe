"""Experiment orchestration: training runs, seed sweeps, ablations, profiling."""

from __future__ import annotations

import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .agent import PolicySnapshot, Td3bcConfig, agent_init, train_step, value_divergence
from .checkpoint import save_checkpoint
from .datasets import OfflineDataset, generate_dataset, load_dataset, normalize_dataset
from .envs import get_spec
from .errors import NumericError
from .metrics import (
    AggregateReport,
    RunLog,
    aggregate_over_seeds,
    evaluate_policy,
    log_to_csv,
    read_log_csv,
)

log = logging.getLogger(__name__)

DESK_STEPS, PAPER_STEPS = 50_000, 1_000_000
DESK_EVAL_EVERY, PAPER_EVAL_EVERY = 2_500, 5_000
ALPHA_GRID = (1.0, 2.0, 2.5, 3.0, 4.0)
ABLATION_ARMS = {
    "td3_bc": {},
    "no_bc": {"use_bc_term": False},
    "no_q": {"use_q_term": False},
    "no_norm": {"use_state_norm": False},
}


def default_output_dir():
    return Path(os.environ.get("ORL_OUTPUT_DIR", "runs"))


@dataclass
class ExperimentConfig:
    env_name: str = "lqr1d"
    dataset_path: str | None = None
    tier: str = "expert"
    size: int = 100_000
    data_seed: int = 0
    agent: Td3bcConfig = field(default_factory=Td3bcConfig)
    total_steps: int = DESK_STEPS
    eval_every: int = DESK_EVAL_EVERY
    episodes_per_eval: int = 10
    seeds: tuple = (0, 1, 2)
    output_dir: str | None = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be non-empty and distinct, got {self.seeds}")
        if self.eval_every < 1 or self.total_steps % self.eval_every != 0:
            raise ValueError("eval_every must divide total_steps")
        if self.episodes_per_eval < 1:
            raise ValueError("episodes_per_eval must be >= 1")

    def snapshot(self, seed=None):
        """Everything that determines a run, as plain JSON-able data."""
        d = {
            "env_name": get_spec(self.env_name).name,
            "dataset_path": self.dataset_path,
            "tier": None if self.dataset_path else self.tier,
            "size": None if self.dataset_path else self.size,
            "data_seed": None if self.dataset_path else self.data_seed,
            "total_steps": self.total_steps,
            "eval_every": self.eval_every,
            "episodes_per_eval": self.episodes_per_eval,
            "agent": self.agent.to_dict(),
        }
        if seed is not None:
            d["seed"] = seed
        return d


def eval_base_seed(train_seed, eval_index, episodes):
    """Evaluation episodes never reuse a seed within or across runs."""
    return train_seed * 1_000_000 + eval_index * episodes


def load_experiment_dataset(exp: ExperimentConfig) -> OfflineDataset:
    if exp.dataset_path:
        d = load_dataset(exp.dataset_path)
        if get_spec(d.env_name).name != get_spec(exp.env_name).name:
            raise ValueError(f"dataset is for {d.env_name!r}, experiment for {exp.env_name!r}")
        return d
    return generate_dataset(get_spec(exp.env_name), exp.tier, exp.size, exp.data_seed)


def prepare_dataset(raw: OfflineDataset, config: Td3bcConfig) -> OfflineDataset:
    if config.use_state_norm:
        return normalize_dataset(raw)
    if raw.normalized:
        raise ValueError("dataset is stored normalized but use_state_norm is off")
    return raw


@dataclass
class SeedResult:
    seed: int
    log: RunLog | None
    state: object = None
    error: str | None = None
    max_mean_abs_q: float = 0.0
    diverged: bool = False


def run_seed(exp: ExperimentConfig, raw: OfflineDataset, seed, progress=None) -> SeedResult:
    """Train one seed, evaluating every ``eval_every`` steps."""
    spec = get_spec(exp.env_name)
    cfg = exp.agent
    data = prepare_dataset(raw, cfg)
    stats = data.stats if cfg.use_state_norm else None
    state = agent_init(spec, cfg, seed)
    rng = np.random.default_rng([seed, 1])
    run_log = RunLog(exp.snapshot(seed), [], spec.random_ref, spec.expert_ref,
                     {"train_seconds": 0.0, "eval_seconds": 0.0})
    result = SeedResult(seed, run_log)
    t_train = t_eval = 0.0
    q_recent = []
    try:
        for step in range(1, exp.total_steps + 1):
            t0 = time.perf_counter()
            state, report = train_step(state, data, cfg, rng)
            t_train += time.perf_counter() - t0
            if report.mean_abs_q is not None:
                q_recent.append(report.mean_abs_q)
            if step % exp.eval_every == 0:
                t0 = time.perf_counter()
                idx = step // exp.eval_every - 1
                mean_q = float(np.mean(q_recent)) if q_recent else None
                q_recent = []
                rec = evaluate_policy(
                    PolicySnapshot.of(state, stats), spec, exp.episodes_per_eval,
                    eval_base_seed(seed, idx, exp.episodes_per_eval), step, mean_q,
                )
                run_log.records.append(rec)
                t_eval += time.perf_counter() - t0
                if mean_q is not None:
                    result.max_mean_abs_q = max(result.max_mean_abs_q, mean_q)
                if progress:
                    progress(seed, step, rec)
    except NumericError as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        result.log = None
    run_log.wall_clock.update(train_seconds=t_train, eval_seconds=t_eval)
    result.state = state
    result.diverged = value_divergence(result.max_mean_abs_q, spec.max_abs_return)
    return result


def _run_seed_job(args):
    exp, raw, seed = args
    return run_seed(exp, raw, seed)


def run_experiment(exp: ExperimentConfig, jobs=1, progress=None):
    """Train every seed; failed seeds are reported, never fatal to the others."""
    raw = load_experiment_dataset(exp)
    if jobs > 1:
        import multiprocessing

        with multiprocessing.get_context("spawn").Pool(jobs) as pool:
            results = pool.map(_run_seed_job, [(exp, raw, s) for s in exp.seeds])
    else:
        results = [run_seed(exp, raw, s, progress) for s in exp.seeds]
    ok = [r for r in results if r.log is not None]
    failed = {r.seed: r.error for r in results if r.log is None}
    if ok and all(len(r.log.records) >= 10 for r in ok):
        report = aggregate_over_seeds([r.log for r in ok])
        report.failed = failed
    else:
        # too few evaluations (or no surviving seed) for final performance
        report = AggregateReport({}, float("nan"), float("nan"), {}, failed)
    return results, report


def write_artifacts(exp: ExperimentConfig, results, report: AggregateReport, out_dir):
    """CSV log and checkpoint per seed, plus config, timing and report JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"config": str(out / "config.json"), "logs": {}, "checkpoints": {}}
    (out / "config.json").write_text(json.dumps(exp.snapshot(), indent=2, sort_keys=True))
    timing = {}
    for r in results:
        if r.log is None:
            continue
        csv_path = out / f"seed_{r.seed}.csv"
        csv_path.write_text(log_to_csv(r.log))
        ckpt = out / f"seed_{r.seed}.ckpt"
        save_checkpoint(r.state, exp.agent, ckpt)
        paths["logs"][r.seed] = str(csv_path)
        paths["checkpoints"][r.seed] = str(ckpt)
        timing[str(r.seed)] = r.log.wall_clock
    body = report.to_dict()
    body["diagnostics"] = {
        str(r.seed): {"max_mean_abs_q": r.max_mean_abs_q, "value_divergence": r.diverged}
        for r in results
    }
    (out / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True))
    paths["report"], paths["timing"] = str(out / "report.json"), str(out / "timing.json")
    return paths


def suite_arms(suite):
    """Named Td3bcConfig overrides for an ablation or alpha suite."""
    if suite == "ablation":
        return dict(ABLATION_ARMS)
    if suite == "alpha":
        return {f"alpha_{a:g}": {"alpha": a} for a in ALPHA_GRID}
    raise ValueError(f"unknown suite {suite!r}; expected 'ablation' or 'alpha'")


def with_agent(exp: ExperimentConfig, **overrides) -> ExperimentConfig:
    return replace(exp, agent=replace(exp.agent, **overrides))


# -- profiling ----------------------------------------------------------------

PROFILE_ARMS = {
    "td3_bc": {},
    "td3": {"use_bc_term": False},
    "bc": {"use_q_term": False},
}


def machine_descriptor():
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "orl": __version__,
    }


def profile_training(raw: OfflineDataset, base: Td3bcConfig, steps=10_000, block=500, seed=0):
    """Per-step training time of the TD3+BC, TD3 and BC arms, no evaluation.

    Arms run in interleaved blocks of ``block`` steps so slow drifts of the
    machine hit every arm alike.
    """
    spec = get_spec(raw.env_name)
    arms = {}
    for name, overrides in PROFILE_ARMS.items():
        cfg = replace(base, **overrides)
        arms[name] = {"config": cfg, "data": prepare_dataset(raw, cfg),
                      "state": agent_init(spec, cfg, seed),
                      "rng": np.random.default_rng([seed, 1]), "seconds": 0.0, "steps": 0,
                      "blocks": []}
    done = 0
    while done < steps:
        n = min(block, steps - done)
        for arm in arms.values():
            state, cfg, data, rng = arm["state"], arm["config"], arm["data"], arm["rng"]
            t0 = time.perf_counter()
            for _ in range(n):
                state, _ = train_step(state, data, cfg, rng)
            dt = time.perf_counter() - t0
            arm.update(state=state, seconds=arm["seconds"] + dt, steps=arm["steps"] + n)
            arm["blocks"].append(dt / n)
        done += n
    per_step = {k: a["seconds"] / a["steps"] for k, a in arms.items()}
    return {
        "env_name": raw.env_name,
        "steps_per_arm": {k: a["steps"] for k, a in arms.items()},
        "block_size": block,
        "per_step_seconds": per_step,
        "per_step_median_seconds": {k: float(np.median(a["blocks"])) for k, a in arms.items()},
        "overhead_td3_bc_vs_td3": per_step["td3_bc"] / per_step["td3"] - 1.0,
        "overhead_td3_bc_vs_bc": per_step["td3_bc"] / per_step["bc"] - 1.0,
        "hidden_sizes": list(base.hidden_sizes),
        "batch_size": base.batch_size,
        "machine": machine_descriptor(),
    }


# -- learning-curve report ----------------------------------------------------

def curve_report(csv_paths):
    """Mean and population std of the normalized score per evaluation step
    across logs, plus a per-log stability table.

    Output rows are sorted, so input order never matters.
    """
    if not csv_paths:
        raise ValueError("need at least one log")
    parsed = []
    for p in sorted(csv_paths, key=lambda p: Path(p).name):
        steps, returns, normalized = read_log_csv(p)
        parsed.append((Path(p).name, steps, returns, normalized))
    grid = parsed[0][1]
    for name, steps, *_ in parsed[1:]:
        if not np.array_equal(steps, grid):
            raise ValueError(f"{name} evaluates on a different step grid")
    norm = np.stack([p[3] for p in parsed])
    curve = {"step": grid, "mean": norm.mean(axis=0), "std": norm.std(axis=0),
             "n_logs": len(parsed)}
    table = []
    for name, steps, returns, normalized in parsed:
        means = returns.mean(axis=1)
        window = min(10, len(means))
        row = {"log": name, "final_performance": float(normalized[-window:].mean())}
        row["worst_episode_deviation"] = _pct(returns[-1].min(), returns[-1].mean())
        row["worst_evaluation_deviation"] = _pct(means[-window:].min(), means[-window:].mean())
        table.append(row)
    return curve, table


def _pct(candidate, reference):
    if abs(reference) <= 1e-12:
        return None
    return float(100.0 * (candidate - reference) / abs(reference))


def curve_csv(curve) -> str:
    lines = ["step,mean_normalized,std_normalized,n_logs"]
    for s, m, sd in zip(curve["step"], curve["mean"], curve["std"]):
        lines.append(f"{int(s)},{float(m)!r},{float(sd)!r},{curve['n_logs']}")
    return "\n".join(lines) + "\n"


def stability_csv(table) -> str:
    cols = ["log", "final_performance", "worst_episode_deviation", "worst_evaluation_deviation"]
    lines = [",".join(cols)]
    for row in table:
        lines.append(",".join(str(row[c]) if isinstance(row[c], str) else repr(row[c])
                              for c in cols))
    return "\n".join(lines) + "\n"


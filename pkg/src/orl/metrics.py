"""Evaluation protocol, normalized scores and stability diagnostics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .envs import EnvSpec, rollout
from .errors import DegenerateMeanError

FINAL_WINDOW = 10
DEGENERATE = 1e-12


@dataclass(frozen=True)
class EvaluationRecord:
    train_step: int
    episode_returns: tuple
    episode_seeds: tuple = ()
    mean_abs_q: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "episode_returns", tuple(float(r) for r in self.episode_returns))
        object.__setattr__(self, "episode_seeds", tuple(int(s) for s in self.episode_seeds))
        if not self.episode_returns or not np.all(np.isfinite(self.episode_returns)):
            raise ValueError("an evaluation needs at least one finite episode return")

    @property
    def mean_return(self):
        return float(np.mean(self.episode_returns))


@dataclass
class RunLog:
    config: dict
    records: list
    random_ref: float
    expert_ref: float
    wall_clock: dict = field(default_factory=dict)

    def __post_init__(self):
        steps = [r.train_step for r in self.records]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("evaluation records must have strictly increasing train_step")

    @property
    def seed(self):
        return self.config.get("seed")

    def normalized(self, raw):
        return normalized_score(raw, self.random_ref, self.expert_ref)


@dataclass
class AggregateReport:
    per_seed: dict
    mean: float
    std: float
    stability: dict
    failed: dict = field(default_factory=dict)

    def to_dict(self):
        key = lambda k: (str(type(k)), k)  # noqa: E731
        return {
            "per_seed_final": {str(k): self.per_seed[k] for k in sorted(self.per_seed, key=key)},
            "mean": self.mean,
            "std": self.std,
            "stability": {str(k): self.stability[k] for k in sorted(self.stability, key=key)},
            "failed_seeds": {str(k): self.failed[k] for k in sorted(self.failed, key=key)},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_policy(policy: Callable, env_spec: EnvSpec, episodes=10, base_seed=0,
                    train_step=0, mean_abs_q=None) -> EvaluationRecord:
    """Roll out ``policy`` (observation -> action) for ``episodes`` episodes;
    episode ``i`` resets with seed ``base_seed + i``."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    seeds = [base_seed + i for i in range(episodes)]
    returns = [rollout(env_spec, policy, s) for s in seeds]
    return EvaluationRecord(train_step, returns, seeds, mean_abs_q)


def normalized_score(raw, random_ref, expert_ref):
    if not expert_ref > random_ref:
        raise ValueError(f"expert_ref {expert_ref} must exceed random_ref {random_ref}")
    return 100.0 * (raw - random_ref) / (expert_ref - random_ref)


def percent_difference(candidate, reference):
    if abs(reference) <= DEGENERATE:
        raise DegenerateMeanError(f"reference {reference} too close to zero")
    return 100.0 * (candidate - reference) / abs(reference)


def final_performance(log: RunLog, window=FINAL_WINDOW):
    """Mean normalized score over every episode of the last ``window`` evaluations."""
    if len(log.records) < window:
        raise ValueError(f"need {window} evaluations, log has {len(log.records)}")
    returns = [r for rec in log.records[-window:] for r in rec.episode_returns]
    return log.normalized(float(np.mean(returns)))


def worst_episode_deviation(record: EvaluationRecord):
    """Percent shortfall of the worst episode relative to the evaluation mean."""
    returns = np.asarray(record.episode_returns)
    return percent_difference(float(returns.min()), float(returns.mean()))


def worst_evaluation_deviation(log: RunLog, window=FINAL_WINDOW):
    """Percent shortfall of the worst per-evaluation mean within the last ``window``."""
    if window < 1 or len(log.records) < window:
        raise ValueError(f"window {window} does not fit a log of {len(log.records)} records")
    means = np.array([rec.mean_return for rec in log.records[-window:]])
    return percent_difference(float(means.min()), float(means.mean()))


def _config_without_seed(log):
    return {k: v for k, v in log.config.items() if k != "seed"}


def aggregate_over_seeds(logs: Sequence[RunLog], window=FINAL_WINDOW) -> AggregateReport:
    """Per-seed final performance, its mean and population std, and per-seed
    stability diagnostics."""
    logs = list(logs)
    if not logs:
        raise ValueError("need at least one run log")
    base = _config_without_seed(logs[0])
    for log in logs[1:]:
        if _config_without_seed(log) != base:
            raise ValueError("run logs differ in configuration beyond the seed")
    seeds = [log.seed for log in logs]
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds {seeds}")
    order = sorted(range(len(logs)), key=lambda i: (str(type(seeds[i])), seeds[i]))
    per_seed, stability = {}, {}
    for i in order:
        log = logs[i]
        per_seed[log.seed] = final_performance(log, window)
        stability[log.seed] = {
            "worst_episode_deviation": _safe(worst_episode_deviation, log.records[-1]),
            "worst_evaluation_deviation": _safe(worst_evaluation_deviation, log, window),
        }
    finals = np.array([per_seed[logs[i].seed] for i in order])
    return AggregateReport(per_seed, float(finals.mean()), float(finals.std()), stability)


def _safe(fn, *args):
    try:
        return fn(*args)
    except DegenerateMeanError:
        return None


# -- CSV export ---------------------------------------------------------------

def csv_header(episodes):
    return ["step", *[f"ep_return_{i}" for i in range(episodes)], "mean_return", "normalized_mean"]


def log_to_csv(log: RunLog) -> str:
    """One row per evaluation. Floats use ``repr`` so the text is reproducible."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    episodes = len(log.records[0].episode_returns) if log.records else 10
    w.writerow(csv_header(episodes))
    for rec in log.records:
        mean = rec.mean_return
        w.writerow([rec.train_step, *map(repr, rec.episode_returns), repr(mean),
                    repr(log.normalized(mean))])
    return buf.getvalue()


def read_log_csv(path_or_text):
    """Parse an evaluation CSV into ``(steps, returns, normalized_means)`` arrays."""
    text = path_or_text
    if "\n" not in str(path_or_text):
        with open(path_or_text, newline="") as fh:
            text = fh.read()
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if header[0] != "step" or header[-2:] != ["mean_return", "normalized_mean"]:
        raise ValueError(f"not an evaluation log: header {header}")
    steps = np.array([int(r[0]) for r in body], dtype=np.int64)
    returns = np.array([[float(x) for x in r[1:-2]] for r in body])
    normalized = np.array([float(r[-1]) for r in body])
    return steps, returns, normalized

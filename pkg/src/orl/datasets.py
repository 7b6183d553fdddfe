"""Offline transition datasets: generation, normalization, mixing, sampling, I/O.

Binary layout of a dataset file (all integers and floats little-endian)::

    b"ORLD" | u32 version | u64 header length | JSON header | records

Each record is ``state | action | reward | next_state`` as float64 followed
by one ``terminal`` byte. The header carries the generation metadata and,
when present, the normalization statistics.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import EnvSpec, env_reset, env_step, get_spec, scripted_policy
from .errors import FormatError, ShapeError, VersionError

MAGIC = b"ORLD"
VERSION = 1
DEFAULT_EPSILON = 1e-3
DATASET_TIERS = ("random", "medium", "medium_replay", "medium_expert", "expert", "mixed")
_PREAMBLE = struct.Struct("<4sIQ")


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mu: np.ndarray
    sigma: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ShapeError("mu and sigma must be vectors of equal length")
        if self.epsilon <= 0 or np.any(self.sigma < 0):
            raise ValueError("epsilon must be positive and sigma non-negative")

    def __eq__(self, other):
        return (isinstance(other, NormalizationStats)
                and self.epsilon == other.epsilon
                and _same_bits(self.mu, other.mu)
                and _same_bits(self.sigma, other.sigma))


def _same_bits(a, b):
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def _frozen(a, dtype=np.float64):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    env_name: str
    tier: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    generator_seed: int = 0
    stats: NormalizationStats | None = None
    normalized: bool = False

    def __post_init__(self):
        set_ = object.__setattr__
        for name in ("states", "actions", "rewards", "next_states"):
            set_(self, name, _frozen(getattr(self, name)))
        set_(self, "terminals", _frozen(self.terminals, np.bool_))
        n = len(self.states)
        if n == 0:
            raise ValueError("a dataset needs at least one transition")
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ShapeError("states and actions must be 2-D")
        if (self.next_states.shape != self.states.shape or len(self.actions) != n
                or self.rewards.shape != (n,) or self.terminals.shape != (n,)):
            raise ShapeError("transition fields disagree in length or shape")
        if self.tier not in DATASET_TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")

    def __len__(self):
        return len(self.states)

    @property
    def obs_dim(self):
        return self.states.shape[1]

    @property
    def act_dim(self):
        return self.actions.shape[1]

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return (
            (self.env_name, self.tier, self.generator_seed, self.normalized)
            == (other.env_name, other.tier, other.generator_seed, other.normalized)
            and self.stats == other.stats
            and all(_same_bits(getattr(self, f), getattr(other, f))
                    for f in ("states", "actions", "rewards", "next_states", "terminals"))
        )


@dataclass(frozen=True)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    not_done: np.ndarray
    indices: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.states)


def _collect(spec: EnvSpec, size, rng, choose_action):
    """Roll out episodes until ``size`` transitions exist.

    ``choose_action(obs, fraction_collected)`` picks behavior actions.
    """
    S = np.empty((size, spec.obs_dim))
    A = np.empty((size, spec.act_dim))
    R = np.empty(size)
    S2 = np.empty((size, spec.obs_dim))
    T = np.zeros(size, dtype=bool)
    i = 0
    while i < size:
        state = env_reset(spec, int(rng.integers(2**32)))
        progress = i / size
        while i < size:
            a = choose_action(state.observation, progress)
            res = env_step(spec, state, a)
            S[i], A[i], R[i], S2[i] = state.observation, a, res.reward, res.next_state.observation
            T[i] = res.done and not res.next_state.timeout
            i += 1
            state = res.next_state
            if res.done:
                break
    return S, A, R, S2, T


def generate_dataset(spec: EnvSpec, tier, size, seed) -> OfflineDataset:
    """Roll out scripted behavior policies into a raw (unnormalized) dataset.

    ``medium_replay`` mixes random and medium actions per step, the medium
    probability rising linearly with the fraction of data collected so far.
    ``medium_expert`` is a medium half followed by an expert half.
    """
    if isinstance(spec, str):
        spec = get_spec(spec)
    if tier not in DATASET_TIERS or tier == "mixed":
        raise ValueError(f"cannot generate tier {tier!r}; choose from {DATASET_TIERS[:-1]}")
    if size < 1000:
        raise ValueError("datasets hold at least 1000 transitions")
    return _generate(spec, tier, size, seed)


def _generate(spec, tier, size, seed):
    if tier == "medium_expert":
        med = _generate(spec, "medium", size // 2, seed)
        exp = _generate(spec, "expert", size - size // 2, seed + 1)
        parts = [np.concatenate([getattr(med, f), getattr(exp, f)])
                 for f in ("states", "actions", "rewards", "next_states", "terminals")]
        return OfflineDataset(spec.name, tier, *parts, generator_seed=seed)

    rng = np.random.default_rng(seed)
    if tier == "medium_replay":
        def choose(obs, progress):
            use_medium = rng.random() < progress
            return scripted_policy(spec, "medium" if use_medium else "random", obs, rng)
    else:
        def choose(obs, progress):
            return scripted_policy(spec, tier, obs, rng)
    return OfflineDataset(spec.name, tier, *_collect(spec, size, rng, choose), generator_seed=seed)


def episode_returns(d: OfflineDataset, horizon=None):
    """Returns of the complete episodes embedded in ``d``.

    Episodes are split where ``next_state`` does not continue into the next
    row's ``state`` or at a terminal. With ``horizon`` given, a trailing
    episode shorter than the horizon and not ended by a terminal counts as
    truncated and is dropped.
    """
    breaks = np.flatnonzero(
        np.any(d.next_states[:-1] != d.states[1:], axis=1) | d.terminals[:-1]
    ) + 1
    bounds = np.concatenate([[0], breaks, [len(d)]])
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        complete = d.terminals[hi - 1] or horizon is None or hi - lo >= horizon
        if complete:
            out.append(float(d.rewards[lo:hi].sum()))
    return np.array(out)


def mix_datasets(a: OfflineDataset, b: OfflineDataset, seed) -> OfflineDataset:
    """Half of ``a`` (uniformly, without replacement) followed by half of ``b``."""
    if a.env_name != b.env_name or a.obs_dim != b.obs_dim or a.act_dim != b.act_dim:
        raise ValueError(f"cannot mix {a.env_name!r} with {b.env_name!r}")
    if a.normalized or b.normalized:
        raise ValueError("mix raw datasets and normalize the result")
    rng = np.random.default_rng(seed)
    ia = np.sort(rng.choice(len(a), size=len(a) // 2, replace=False))
    ib = np.sort(rng.choice(len(b), size=len(b) // 2, replace=False))
    parts = [np.concatenate([getattr(a, f)[ia], getattr(b, f)[ib]])
             for f in ("states", "actions", "rewards", "next_states", "terminals")]
    return OfflineDataset(a.env_name, "mixed", *parts, generator_seed=seed)


def compute_normalization(d: OfflineDataset, epsilon=DEFAULT_EPSILON) -> NormalizationStats:
    """Per-feature mean and population std over ``state`` only."""
    return NormalizationStats(d.states.mean(axis=0), d.states.std(axis=0), float(epsilon))


def apply_normalization(x, stats: NormalizationStats):
    """``(s - mu) / (sigma + epsilon)`` on a state array or a whole dataset.

    A dataset gets both ``states`` and ``next_states`` rewritten. Applying the
    same statistics twice is not a no-op.
    """
    if isinstance(x, OfflineDataset):
        if x.obs_dim != stats.mu.size:
            raise ShapeError(f"stats for {stats.mu.size} features, dataset has {x.obs_dim}")
        scale = stats.sigma + stats.epsilon
        return OfflineDataset(
            x.env_name, x.tier, (x.states - stats.mu) / scale, x.actions, x.rewards,
            (x.next_states - stats.mu) / scale, x.terminals,
            generator_seed=x.generator_seed, stats=stats, normalized=True,
        )
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1:] != stats.mu.shape:
        raise ShapeError(f"stats for {stats.mu.size} features, input shape {arr.shape}")
    return (arr - stats.mu) / (stats.sigma + stats.epsilon)


def normalize_dataset(d: OfflineDataset, epsilon=DEFAULT_EPSILON) -> OfflineDataset:
    """Normalize a raw dataset with its stored stats, computing them if absent."""
    if d.normalized:
        return d
    return apply_normalization(d, d.stats or compute_normalization(d, epsilon))


def sample_minibatch(d: OfflineDataset, batch_size, rng) -> Batch:
    """Uniform sample with replacement."""
    if batch_size > len(d) or batch_size < 1:
        raise ValueError(f"batch_size {batch_size} not in [1, {len(d)}]")
    idx = rng.integers(0, len(d), size=batch_size)
    return Batch(d.states[idx], d.actions[idx], d.rewards[idx], d.next_states[idx],
                 1.0 - d.terminals[idx], idx)


def _record_dtype(obs_dim, act_dim):
    return np.dtype([
        ("state", "<f8", (obs_dim,)),
        ("action", "<f8", (act_dim,)),
        ("reward", "<f8"),
        ("next_state", "<f8", (obs_dim,)),
        ("terminal", "u1"),
    ])


def _records(d: OfflineDataset):
    rec = np.empty(len(d), dtype=_record_dtype(d.obs_dim, d.act_dim))
    rec["state"], rec["action"], rec["reward"] = d.states, d.actions, d.rewards
    rec["next_state"], rec["terminal"] = d.next_states, d.terminals
    return rec.tobytes()


def dataset_bytes(d: OfflineDataset) -> bytes:
    body = _records(d)
    header = {
        "env_name": d.env_name,
        "tier": d.tier,
        "size": len(d),
        "obs_dim": d.obs_dim,
        "act_dim": d.act_dim,
        "generator_seed": int(d.generator_seed),
        "normalized": d.normalized,
        "epsilon": d.stats.epsilon if d.stats else None,
        "mu": d.stats.mu.tolist() if d.stats else None,
        "sigma": d.stats.sigma.tolist() if d.stats else None,
        "sha256": hashlib.sha256(body).hexdigest(),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    return _PREAMBLE.pack(MAGIC, VERSION, len(raw)) + raw + body


def save_dataset(d: OfflineDataset, path):
    Path(path).write_bytes(dataset_bytes(d))


def parse_dataset(blob: bytes) -> OfflineDataset:
    if len(blob) < _PREAMBLE.size:
        raise FormatError("file shorter than the preamble", section="preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise VersionError(f"bad magic {magic!r}, expected {MAGIC!r}", section="preamble")
    if version != VERSION:
        raise VersionError(f"format version {version}, this build reads {VERSION}",
                           section="preamble")
    start = _PREAMBLE.size
    if len(blob) < start + hlen:
        raise FormatError("truncated JSON header", section="header")
    try:
        h = json.loads(blob[start:start + hlen])
        n, obs_dim, act_dim = int(h["size"]), int(h["obs_dim"]), int(h["act_dim"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable JSON header: {exc}", section="header") from exc
    dtype = _record_dtype(obs_dim, act_dim)
    body = blob[start + hlen:]
    if len(body) != n * dtype.itemsize:
        raise FormatError(
            f"record block has {len(body)} bytes, expected {n * dtype.itemsize}",
            section="records",
        )
    if h.get("sha256") is not None and hashlib.sha256(body).hexdigest() != h["sha256"]:
        raise FormatError("record checksum mismatch", section="records")
    rec = np.frombuffer(body, dtype=dtype)
    stats = None
    if h.get("mu") is not None:
        stats = NormalizationStats(np.array(h["mu"], dtype=np.float64),
                                   np.array(h["sigma"], dtype=np.float64), h["epsilon"])
    return OfflineDataset(
        h["env_name"], h["tier"], rec["state"].reshape(n, obs_dim),
        rec["action"].reshape(n, act_dim), rec["reward"],
        rec["next_state"].reshape(n, obs_dim), rec["terminal"].astype(bool),
        generator_seed=int(h["generator_seed"]), stats=stats,
        normalized=bool(h.get("normalized", False)),
    )


def load_dataset(path) -> OfflineDataset:
    return parse_dataset(Path(path).read_bytes())

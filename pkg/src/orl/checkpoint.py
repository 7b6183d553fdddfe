"""Binary checkpoints of a :class:`~orl.agent.TrainState`.

Layout mirrors the dataset files: ``b"ORLC" | u32 version | u64 header
length | JSON header | float64 blocks``. The header lists every block by name
and length in storage order, plus optimizer scalars, step counters and a
digest of the training configuration.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .agent import NETWORKS, OPTIMIZERS, Td3bcConfig, TrainState
from .errors import FormatError, VersionError
from .nn import AdamState, Mlp

MAGIC = b"ORLC"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


def checkpoint_bytes(state: TrainState, config: Td3bcConfig) -> bytes:
    blocks, nets, opts = [], {}, {}
    for name in NETWORKS:
        net = getattr(state, name)
        nets[name] = {"layer_sizes": list(net.layer_sizes), "output": net.output_activation}
        blocks.append((name, net.flat))
    for name in OPTIMIZERS:
        opt = getattr(state, name)
        opts[name] = {"step_count": opt.step_count, "learning_rate": opt.learning_rate,
                      "beta1": opt.beta1, "beta2": opt.beta2, "epsilon": opt.epsilon}
        blocks += [(name + ".m", opt.first_moment), (name + ".v", opt.second_moment)]
    blocks += [("action_low", state.action_low), ("action_high", state.action_high)]
    header = {
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "step_count": state.step_count,
        "actor_updates": state.actor_updates,
        "networks": nets,
        "optimizers": opts,
        "blocks": [[name, int(arr.size)] for name, arr in blocks],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in blocks)
    return _PREAMBLE.pack(MAGIC, VERSION, len(raw)) + raw + body


def save_checkpoint(state: TrainState, config: Td3bcConfig, path):
    Path(path).write_bytes(checkpoint_bytes(state, config))


def parse_checkpoint(blob: bytes):
    if len(blob) < _PREAMBLE.size:
        raise FormatError("file shorter than the preamble", section="preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC or version != VERSION:
        raise VersionError(f"not a v{VERSION} checkpoint (magic {magic!r}, v{version})",
                           section="preamble")
    start = _PREAMBLE.size
    try:
        h = json.loads(blob[start:start + hlen])
        sizes = [(name, int(n)) for name, n in h["blocks"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable header: {exc}", section="header") from exc
    body = blob[start + hlen:]
    if len(body) != 8 * sum(n for _, n in sizes):
        raise FormatError("parameter block length mismatch", section="blocks")
    data = np.frombuffer(body, dtype="<f8")
    arrays, offset = {}, 0
    for name, n in sizes:
        arrays[name] = data[offset:offset + n].astype(np.float64)
        offset += n
    config = Td3bcConfig(**h["config"])
    if config.digest() != h["config_hash"]:
        raise FormatError("config hash does not match the stored config", section="header")
    fields = {}
    for name in NETWORKS:
        spec = h["networks"][name]
        fields[name] = Mlp(tuple(spec["layer_sizes"]), arrays[name], spec["output"])
    for name in OPTIMIZERS:
        o = h["optimizers"][name]
        fields[name] = AdamState(arrays[name + ".m"], arrays[name + ".v"], o["step_count"],
                                 o["learning_rate"], o["beta1"], o["beta2"], o["epsilon"])
    state = TrainState(**fields, action_low=arrays["action_low"],
                       action_high=arrays["action_high"], step_count=h["step_count"],
                       actor_updates=h["actor_updates"])
    return state, config


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())

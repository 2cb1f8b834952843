"""Versioned JSON checkpoint container.

Layout (one JSON object)::

    {
      "format": "imanifold-checkpoint",
      "version": 1,
      "kind": "<model kind>",
      "seed": <int>,
      "networks": {"<name>": {"spec": {MlpSpec fields},
                               "params": [{"shape": [...], "data": "<base64>"}, ...]}},
      "arrays": {"<name>": {"shape": [...], "data": "<base64>"}},
      "meta": {...}
    }

Arrays are float64 little-endian bytes, base64 encoded, so values
round-trip exactly. Network parameters are stored in declaration order
(W_1, b_1, W_2, b_2, ...).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Mlp, MlpSpec

FORMAT = "imanifold-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(d["shape"])


@dataclass
class Checkpoint:
    kind: str
    seed: int
    networks: dict[str, Mlp] = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    payload = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "seed": int(ckpt.seed),
        "networks": {
            name: {"spec": net.spec.to_dict(), "params": [encode_array(p.data) for p in net.params]}
            for name, net in ckpt.networks.items()
        },
        "arrays": {name: encode_array(a) for name, a in ckpt.arrays.items()},
        "meta": ckpt.meta,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1))
    return path


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    payload = json.loads(path.read_text())
    if payload.get("format") != FORMAT:
        raise CheckpointError("not an imanifold checkpoint")
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {payload.get('version')} does not match supported version {FORMAT_VERSION}")
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"checkpoint holds a {payload['kind']!r} model, expected {kind!r}")
    networks = {}
    for name, entry in payload["networks"].items():
        net = Mlp(MlpSpec.from_dict(entry["spec"]))
        net.load_flat([decode_array(p) for p in entry["params"]])
        networks[name] = net
    arrays = {name: decode_array(a) for name, a in payload.get("arrays", {}).items()}
    return Checkpoint(payload["kind"], int(payload["seed"]), networks, arrays, payload.get("meta", {}))

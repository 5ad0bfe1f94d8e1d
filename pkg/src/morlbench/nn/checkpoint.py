"""Versioned JSON checkpoints.

A checkpoint is one flat JSON object: format tag, version, a ``metadata``
mapping (layer dims, activation, algorithm tags...) and ``params`` mapping
each parameter name to its shape and row-major values. Floats are written
with ``repr`` precision so load/save round-trips byte for byte.
"""
from __future__ import annotations

import json

import numpy as np

CHECKPOINT_FORMAT = "morlbench-checkpoint"
CHECKPOINT_VERSION = 1


def _to_jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _to_jsonable(v) for k, v in x.items()}
    return x


def dumps_checkpoint(params: dict, metadata: dict) -> str:
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "metadata": _to_jsonable(metadata),
        "params": {k: {"shape": list(v.shape), "data": np.asarray(v, dtype=float).reshape(-1).tolist()}
                   for k, v in sorted(params.items())},
    }
    return json.dumps(record, sort_keys=True)


def loads_checkpoint(text: str) -> tuple[dict, dict]:
    record = json.loads(text)
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {record.get('version')}")
    params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in record["params"].items()}
    return params, record["metadata"]


def save_checkpoint(path, params: dict, metadata: dict) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_checkpoint(params, metadata))


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path) as fh:
        return loads_checkpoint(fh.read())


def save_mlp(path, net, **metadata) -> None:
    meta = {"kind": "mlp", "layer_dims": net.layer_dims, "activation": net.activation}
    meta.update(metadata)
    save_checkpoint(path, net.parameters(), meta)


def load_mlp(path):
    from .mlp import Mlp

    params, meta = load_checkpoint(path)
    net = Mlp(meta["layer_dims"], meta["activation"], seed=0)
    net.load_parameters(params)
    return net, meta

"""Checkpoint serialization and the loss-history CSV export.

Checkpoints are single files: magic "UGGC", a format version, the training
config as an embedded UTF-8 key=value block, and every named matrix
(parameters, Adam moments, loss history) as little-endian float64. The
round trip is bit-exact, which is what makes resumed training reproduce an
uninterrupted run.
"""

from __future__ import annotations

import os

import numpy as np

from ._container import read_container, write_container
from .errors import ContractViolationError, MissingCheckpointError
from .objective import HISTORY_COLUMNS, Checkpoint

CHECKPOINT_MAGIC = b"UGGC"
CHECKPOINT_VERSION = 1

_RNG_STREAMS = ("sampler", "reparam")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays: dict = {"history": np.asarray(ckpt.history, dtype=np.float64)}
    for name, arr in ckpt.params.items():
        arrays[f"p.{name}"] = arr
    for name, arr in ckpt.adam_m.items():
        arrays[f"m.{name}"] = arr
    for name, arr in ckpt.adam_v.items():
        arrays[f"v.{name}"] = arr
    config = dict(ckpt.config)
    config["ckpt.epoch"] = str(int(ckpt.epoch))
    config["ckpt.adam_t"] = str(int(ckpt.adam_t))
    for stream in _RNG_STREAMS:
        seed, sid, counter = ckpt.rng[stream]
        config[f"ckpt.rng.{stream}"] = f"{seed},{sid},{counter}"
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, config,
                    arrays, np.float64)


def load_checkpoint(path) -> Checkpoint:
    if not os.path.exists(path):
        raise MissingCheckpointError(f"no checkpoint at {path}")
    config, arrays = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                                    np.float64)
    if "history" not in arrays:
        raise ContractViolationError("checkpoint lacks a loss history matrix")
    params, adam_m, adam_v = {}, {}, {}
    for name, arr in arrays.items():
        if name.startswith("p."):
            params[name[2:]] = arr
        elif name.startswith("m."):
            adam_m[name[2:]] = arr
        elif name.startswith("v."):
            adam_v[name[2:]] = arr
        elif name != "history":
            raise ContractViolationError(f"unrecognized checkpoint array {name!r}")
    rng = {}
    for stream in _RNG_STREAMS:
        key = f"ckpt.rng.{stream}"
        if key not in config:
            raise ContractViolationError(f"checkpoint lacks rng state {stream!r}")
        rng[stream] = tuple(int(v) for v in config.pop(key).split(","))
    epoch = int(config.pop("ckpt.epoch"))
    adam_t = int(config.pop("ckpt.adam_t"))
    history = arrays["history"].reshape(-1, len(HISTORY_COLUMNS))
    return Checkpoint(params=params, adam_m=adam_m, adam_v=adam_v, adam_t=adam_t,
                      epoch=epoch, history=history, rng=rng, config=config)


def write_history_csv(history: np.ndarray, path, comment: str | None = None) -> None:
    """Loss trace as CSV with the fixed column set, full float precision."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[1] != len(HISTORY_COLUMNS):
        raise ContractViolationError(
            f"history must be (steps, {len(HISTORY_COLUMNS)}), got {history.shape}")
    lines = ([f"# {comment}"] if comment else []) + [",".join(HISTORY_COLUMNS)]
    for row in history:
        cells = [str(int(row[0]))] + [repr(float(v)) for v in row[1:]]
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

"""Save and load trained networks."""

from __future__ import annotations

import dataclasses

import numpy as np

from .container import ContainerError, read_container, write_container
from .model import AcaNet, ModelConfig

__all__ = ["load_checkpoint", "save_checkpoint"]

KIND = "checkpoint"
_STATS = ("running_mean", "running_var")


def save_checkpoint(net: AcaNet, path, extra: dict | None = None) -> None:
    """Parameters (shared weights stored once) plus batch-norm statistics, as float32."""
    arrays = {name: t.data for name, t in net.unique_params().items()}
    for layer, state in net.bn.items():
        for stat in _STATS:
            arrays[f"{layer}.{stat}"] = getattr(state, stat)
    meta = {
        "config": dataclasses.asdict(net.cfg),
        "aliases": dict(sorted(net.aliases.items())),
        "bn_batches": {k: int(s.num_batches_tracked) for k, s in net.bn.items()},
    }
    if extra:
        meta["extra"] = extra
    write_container(path, KIND, arrays, meta)


def load_checkpoint(path) -> AcaNet:
    arrays, meta = read_container(path, kind=KIND)
    try:
        cfg = ModelConfig(**meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"{path}: invalid model config record ({exc})") from exc
    net = AcaNet(cfg, dtype=np.float32)
    for name, t in net.unique_params().items():
        if name not in arrays:
            raise ContainerError(f"{path}: missing parameter {name!r}")
        if arrays[name].shape != t.shape:
            raise ContainerError(f"{path}: parameter {name!r} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name].copy()
    for layer, state in net.bn.items():
        for stat in _STATS:
            key = f"{layer}.{stat}"
            if key not in arrays:
                raise ContainerError(f"{path}: missing batch-norm statistic {key!r}")
            setattr(state, stat, arrays[key].copy())
        state.num_batches_tracked = int(meta.get("bn_batches", {}).get(layer, 0))
    return net

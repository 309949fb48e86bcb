"""Checkpoint persistence: JSON with canonical key order and float repr.

Saving the result of a load reproduces the file byte for byte, so
checkpoints are diff-able and their round-trip is testable. Arrays are
stored as flat JSON number lists; desk-scale models keep this cheap.
"""

from __future__ import annotations

import json
from typing import Optional

import numpy as np

from .errors import IncompatibleCheckpointError
from .models import LatentOdeModel
from .training import AdamaxState

FORMAT_VERSION = 1


def _array_entry(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}


def _entry_array(entry: dict) -> np.ndarray:
    return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])


def checkpoint_payload(model: LatentOdeModel, cfg_echo: dict, epoch: int,
                       opt: Optional[AdamaxState] = None,
                       norm_mean: Optional[np.ndarray] = None,
                       norm_std: Optional[np.ndarray] = None,
                       best_metric: Optional[float] = None) -> dict:
    payload = {
        "format_version": FORMAT_VERSION,
        "config": cfg_echo,
        "epoch": epoch,
        "best_metric": best_metric,
        "params": {p.name: _array_entry(p.value.data) for p in model.parameters()},
        "optimizer": None,
        "norm_stats": None,
    }
    if opt is not None:
        payload["optimizer"] = {
            "step_count": opt.step_count,
            "lr": opt.lr,
            "decay": opt.decay,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "m": {name: [float(x) for x in arr.ravel()] for name, arr in opt.m.items()},
            "u": {name: [float(x) for x in arr.ravel()] for name, arr in opt.u.items()},
        }
    if norm_mean is not None:
        payload["norm_stats"] = {
            "mean": [float(x) for x in np.asarray(norm_mean)],
            "std": [float(x) for x in np.asarray(norm_std)],
        }
    return payload


def dump_checkpoint(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=1)


def save_checkpoint(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        fh.write(dump_checkpoint(payload))


def load_checkpoint(path: str) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint format {payload.get('format_version')!r} is not supported")
    return payload


def apply_params(model: LatentOdeModel, payload: dict) -> None:
    """Load stored parameter arrays into a freshly built model."""
    stored = payload["params"]
    for p in model.parameters():
        if p.name not in stored:
            raise IncompatibleCheckpointError(f"checkpoint lacks parameter '{p.name}'")
        arr = _entry_array(stored[p.name])
        if arr.shape != p.value.shape:
            raise IncompatibleCheckpointError(
                f"parameter '{p.name}' shape {arr.shape} != model {p.value.shape}")
        p.assign(arr)
    extra = set(stored) - {p.name for p in model.parameters()}
    if extra:
        raise IncompatibleCheckpointError(f"checkpoint has unknown parameters {sorted(extra)}")


def restore_optimizer(payload: dict, model: LatentOdeModel) -> Optional[AdamaxState]:
    blob = payload.get("optimizer")
    if blob is None:
        return None
    params = model.parameters()
    opt = AdamaxState(params, lr=blob["lr"], decay=blob["decay"],
                      beta1=blob["beta1"], beta2=blob["beta2"])
    opt.step_count = blob["step_count"]
    for p in params:
        opt.m[p.name] = np.asarray(blob["m"][p.name], dtype=np.float64).reshape(p.value.shape)
        opt.u[p.name] = np.asarray(blob["u"][p.name], dtype=np.float64).reshape(p.value.shape)
    return opt


def norm_stats(payload: dict) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    blob = payload.get("norm_stats")
    if blob is None:
        return None, None
    return (np.asarray(blob["mean"], dtype=np.float64),
            np.asarray(blob["std"], dtype=np.float64))

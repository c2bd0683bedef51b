"""Server-side parameter fusion for homogeneous and width-nested client models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .models import ArchitectureLevel, ParameterSet, ScalableModel, slice_model


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    level: ArchitectureLevel
    params: ParameterSet
    sample_count: int


def fedavg(updates: list[ClientUpdate]) -> ParameterSet:
    """Sample-weighted coordinate mean of same-architecture updates."""
    if not updates:
        raise InvalidArgument("no updates to average")
    level = updates[0].level
    if any(u.level != level for u in updates):
        raise InvalidArgument("fedavg requires every update at one architecture level")
    total = sum(u.sample_count for u in updates)
    if total <= 0:
        raise InvalidArgument("total sample count must be positive")
    out = {}
    for name, ref in updates[0].params.items():
        if any(u.params[name].shape != ref.shape for u in updates):
            raise InvalidArgument(f"{name}: shape mismatch between updates")
        acc = np.zeros_like(ref)
        for u in updates:
            acc += (u.sample_count / total) * u.params[name]
        out[name] = acc
    return out


def hetero_aggregate(global_model: ScalableModel, updates: list[ClientUpdate],
                     weighting: str = "uniform") -> ParameterSet:
    """Nested aggregation: every coordinate becomes the mean over the clients covering it.

    With ``weighting="sample"`` each client counts in proportion to its sample
    count.  Coordinates no client covers keep their previous global value.
    """
    if weighting not in ("uniform", "sample"):
        raise InvalidArgument(f"unknown weighting {weighting!r}")
    params = global_model.params
    sums = {k: np.zeros_like(v) for k, v in params.items()}
    weights = {k: np.zeros_like(v) for k, v in params.items()}
    for u in updates:
        expected = slice_model(global_model, u.level).params
        if set(u.params) != set(params):
            raise InvalidArgument(f"client {u.client_id}: parameter names differ from global")
        w = 1.0 if weighting == "uniform" else float(u.sample_count)
        for name, arr in u.params.items():
            if arr.shape != expected[name].shape:
                raise InvalidArgument(
                    f"client {u.client_id}: {name} has shape {arr.shape}, "
                    f"level {u.level.label} expects {expected[name].shape}")
            region = tuple(slice(0, s) for s in arr.shape)
            sums[name][region] += w * arr
            weights[name][region] += w
    out = {}
    for name, prev in params.items():
        covered = weights[name] > 0
        merged = prev.copy()
        merged[covered] = sums[name][covered] / weights[name][covered]
        out[name] = merged
    return out


def broadcast(global_model: ScalableModel, level: ArchitectureLevel) -> ScalableModel:
    """The sub-model a client at ``level`` receives."""
    return slice_model(global_model, level)

"""Parameter-tree utilities.

Model parameters live in nested dataclasses whose leaves are either
``Tensor`` (trainable, receives gradients) or ``numpy.ndarray`` (state
buffers such as batch-norm running statistics).  The walkers below flatten
such trees into ordered ``name -> leaf`` maps; iteration order is the
dataclass field declaration order, which keeps checkpoints and optimizer
traversal deterministic.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .tensor import Tensor


def _walk(obj, prefix: str, params: dict, buffers: dict) -> None:
    if obj is None:
        return
    if isinstance(obj, Tensor):
        params[prefix] = obj
        return
    if isinstance(obj, np.ndarray):
        buffers[prefix] = obj
        return
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name,
                  params, buffers)
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            _walk(item, f"{prefix}.{i}" if prefix else str(i), params, buffers)
        return
    # ints, floats, strings: structural metadata, not parameters


def named_parameters(tree, prefix: str = "") -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    _walk(tree, prefix, params, buffers)
    return params


def named_buffers(tree, prefix: str = "") -> dict[str, np.ndarray]:
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    _walk(tree, prefix, params, buffers)
    return buffers


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing out-of-range values."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out

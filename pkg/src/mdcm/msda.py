"""Gated multi-scale aggregation: concatenate the four refined stage cls
tokens into one feature vector, derive per-stage-per-class sigmoid gates
from it, and combine the stacked stage logits into the final prediction
``MR[t] = sum_i gate[i, t] * logits[i, t]``.  A plain column-sum baseline is
provided for the gating-vs-summation comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .params import trunc_normal
from .tensor import Tensor


@dataclass
class GateParams:
    w: Tensor
    b: Tensor


def init_gate(rng: np.random.Generator, stage_dims: list[int],
              n_classes: int) -> GateParams:
    total = sum(stage_dims)
    return GateParams(T.parameter(trunc_normal(rng, (total, 4 * n_classes))),
                      T.parameter(np.zeros(4 * n_classes)))


def build_feature(cls_tokens: list[Tensor]) -> Tensor:
    """Concatenate the four refined cls tokens in stage order."""
    if len(cls_tokens) != 4:
        raise ContractError(
            f"build_feature: expected 4 stage cls tokens, got {len(cls_tokens)}")
    lead = cls_tokens[0].data.shape[:-1]
    for t in cls_tokens:
        if t.data.shape[:-1] != lead:
            raise ContractError("build_feature: leading shapes disagree")
    return T.concat(cls_tokens, -1)


def stack_logits(etas: list[Tensor]) -> Tensor:
    """Stack four per-stage logit vectors into (..., 4, n)."""
    if len(etas) != 4:
        raise ContractError(f"stack_logits: expected 4 heads, got {len(etas)}")
    lead = etas[0].data.shape[:-1]
    n = etas[0].data.shape[-1]
    rows = [T.reshape(e, lead + (1, n)) for e in etas]
    return T.concat(rows, -2)


def gating_weights(mf: Tensor, p: GateParams) -> Tensor:
    """Sigmoid gates reshaped row-major to (..., 4, n); stage is the row."""
    total, out = p.w.data.shape
    if mf.data.shape[-1] != total:
        raise ContractError(
            f"gating_weights: feature length {mf.data.shape[-1]} != {total}")
    n = out // 4
    gates = T.sigmoid(T.linear(mf, p.w, p.b))
    return T.reshape(gates, mf.data.shape[:-1] + (4, n))


def aggregate(mc: Tensor, mg: Tensor) -> Tensor:
    """Gated sum over stages: MR[t] = sum_i mg[i, t] * mc[i, t]."""
    if mc.data.shape != mg.data.shape:
        raise ContractError(
            f"aggregate: shapes {mc.data.shape} and {mg.data.shape} differ")
    return T.sum_axis(T.mul(mc, mg), -2)


def aggregate_sum(mc: Tensor) -> Tensor:
    """Ungated baseline: plain column sums over the four stages."""
    return T.sum_axis(mc, -2)

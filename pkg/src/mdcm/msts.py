"""Token selection: patch-merge each stage's grid, score merged tokens by
their channel mean, keep the top-k with deep-to-shallow index propagation,
synthesize per-stage cls tokens from the final stage's cls, refine the
selected set with a squeeze-excitation block plus one transformer layer, and
classify from the refined cls.

Scores feed a discrete argsort, so they are computed on detached values;
gradients reach the merged tokens only through the gathered rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import LayerParams, TokenSeq, init_layer, init_ln, transformer_layer
from .errors import ContractError, DimensionError
from .params import trunc_normal
from .tensor import Tensor


@dataclass
class MergedTokens:
    """2x2-merged patch tokens: ``(..., M, c)`` on grid ``(h/2, w/2)``."""
    tokens: Tensor
    grid: tuple[int, int]


@dataclass
class SelectionResult:
    scores: np.ndarray    # (..., M)
    indices: np.ndarray   # (..., k) in score order
    selected: Tensor      # (..., k, c)


@dataclass
class MergeParams:
    w: Tensor
    b: Tensor


@dataclass
class CttParams:
    """cls transfer: linear -> batch norm -> ReLU -> linear.

    The hidden width equals the input width; the batch-norm running
    statistics are state buffers, not trainable parameters.
    """
    w0: Tensor
    bn_g: Tensor
    bn_b: Tensor
    bn_rm: np.ndarray
    bn_rv: np.ndarray
    w1: Tensor
    b1: Tensor


@dataclass
class SEParams:
    wa: Tensor
    ba: Tensor
    wb: Tensor
    bb: Tensor


@dataclass
class StageHeadParams:
    se: SEParams
    block: LayerParams
    cls_w: Tensor
    cls_b: Tensor


def init_merge(rng: np.random.Generator, c: int) -> MergeParams:
    return MergeParams(T.parameter(trunc_normal(rng, (4 * c, c))),
                       T.parameter(np.zeros(c)))


def init_ctt(rng: np.random.Generator, c4: int, c_out: int) -> CttParams:
    return CttParams(
        w0=T.parameter(trunc_normal(rng, (c4, c4))),
        bn_g=T.parameter(np.ones(c4)),
        bn_b=T.parameter(np.zeros(c4)),
        bn_rm=np.zeros(c4),
        bn_rv=np.ones(c4),
        w1=T.parameter(trunc_normal(rng, (c4, c_out))),
        b1=T.parameter(np.zeros(c_out)),
    )


def init_se(rng: np.random.Generator, c: int, reduction: int) -> SEParams:
    if c % reduction:
        raise ContractError(f"se: channel count {c} not divisible by "
                            f"reduction {reduction}")
    cr = c // reduction
    return SEParams(
        wa=T.parameter(trunc_normal(rng, (c, cr))),
        ba=T.parameter(np.zeros(cr)),
        wb=T.parameter(trunc_normal(rng, (cr, c))),
        bb=T.parameter(np.zeros(c)),
    )


def init_stage_head(rng: np.random.Generator, c: int, n_heads: int,
                    n_classes: int, reduction: int) -> StageHeadParams:
    return StageHeadParams(
        se=init_se(rng, c, reduction),
        block=init_layer(rng, c, c, n_heads),
        cls_w=T.parameter(trunc_normal(rng, (c, n_classes))),
        cls_b=T.parameter(np.zeros(n_classes)),
    )


def merge_gather_indices(grid: tuple[int, int]) -> np.ndarray:
    """Row indices that lay out each 2x2 neighborhood contiguously.

    Cell (r, q) of the merged grid gathers patch rows
    (2r, 2q), (2r, 2q+1), (2r+1, 2q), (2r+1, 2q+1) in that order.
    """
    h, w = grid
    idx = np.empty((h // 2) * (w // 2) * 4, dtype=int)
    pos = 0
    for r in range(h // 2):
        for q in range(w // 2):
            base = 2 * r * w + 2 * q
            idx[pos:pos + 4] = (base, base + 1, base + w, base + w + 1)
            pos += 4
    return idx


def patch_merge(seq: TokenSeq, p: MergeParams) -> MergedTokens:
    """Concatenate each 2x2 token neighborhood (4c) and project back to c.

    The cls row is excluded before merging.
    """
    if seq.grid is None:
        raise DimensionError("patch_merge: sequence has no grid")
    h, w = seq.grid
    if h % 2 or w % 2:
        raise DimensionError(f"patch_merge: odd grid {h}x{w}")
    c = seq.tokens.data.shape[-1]
    lead = seq.tokens.data.shape[:-2]
    patches = T.slice_axis(seq.tokens, -2, 1, h * w + 1)
    gathered = T.gather_rows(patches, merge_gather_indices((h, w)))
    stacked = T.reshape(gathered, lead + ((h // 2) * (w // 2), 4 * c))
    merged = T.add_bias(T.matmul(stacked, p.w), p.b)
    return MergedTokens(merged, (h // 2, w // 2))


def token_scores(merged: MergedTokens) -> np.ndarray:
    """Per-token channel mean of the merged tokens (detached)."""
    return merged.tokens.data.mean(axis=-1)


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending, ties to the lower index."""
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"select_topk: k={k} out of range for {n} scores")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def propagate_deep_indices(deep_indices: np.ndarray, deep_grid: tuple[int, int],
                           shallow_grid: tuple[int, int]) -> np.ndarray:
    """Map deep merged-grid cells to their m x m blocks of shallow cells.

    Returns the sorted union of all covered shallow indices.
    """
    dh, dw = deep_grid
    sh, sw = shallow_grid
    if sh % dh or sw % dw or sh // dh != sw // dw:
        raise ContractError(
            f"propagate_deep_indices: shallow grid {shallow_grid} is not an "
            f"integer multiple of deep grid {deep_grid}")
    m = sh // dh
    out = []
    for idx in np.asarray(deep_indices, dtype=int).ravel():
        r, q = divmod(int(idx), dw)
        for dr in range(m):
            for dq in range(m):
                out.append((r * m + dr) * sw + (q * m + dq))
    return np.unique(np.array(out, dtype=int)) if out else np.empty(0, dtype=int)


def final_selection(scores: np.ndarray, k: int,
                    propagated: np.ndarray | None = None) -> np.ndarray:
    """The stage's kept indices: own top-k united with propagated indices,
    deduplicated, truncated back to k by score (ties to the lower index).

    Because the union always contains the k highest-scoring tokens, the
    score truncation returns exactly the top-k set; the propagation path is
    kept explicit and isolated so a different balancing rule can be swapped
    in without touching callers.
    """
    own = select_topk(scores, k)
    if propagated is None or len(propagated) == 0:
        return own
    union = np.union1d(own, np.asarray(propagated, dtype=int))
    if np.any(union < 0) or np.any(union >= scores.shape[-1]):
        raise ContractError("final_selection: propagated index out of range")
    if len(union) <= k:
        return union[np.argsort(-scores[union], kind="stable")]
    ranked = union[np.argsort(-scores[union], kind="stable")]
    return ranked[:k]


def gather_tokens(merged: MergedTokens, indices: np.ndarray) -> Tensor:
    """Rows of the merged tokens in index order; gradients scatter back."""
    return T.gather_rows(merged.tokens, indices)


def keep_count(keep_ratio: float, n_tokens: int) -> int:
    return max(1, math.ceil(keep_ratio * n_tokens))


def cls_token_transfer(z4_cls: Tensor, p: CttParams, train: bool) -> Tensor:
    """Project the final cls token into a stage's channel width.

    linear -> batch norm (over the batch axis; running stats in eval mode or
    at batch size 1) -> ReLU -> linear.
    """
    x = z4_cls
    squeeze_back = False
    if x.data.ndim == 1:
        x = T.reshape(x, (1, x.data.shape[0]))
        squeeze_back = True
    h = T.matmul(x, p.w0)
    h = T.batch_norm(h, p.bn_g, p.bn_b, p.bn_rm, p.bn_rv, train=train)
    h = T.relu(h)
    out = T.add_bias(T.matmul(h, p.w1), p.b1)
    if squeeze_back:
        out = T.reshape(out, (out.data.shape[-1],))
    return out


def se_refine(tokens: Tensor, p: SEParams) -> Tensor:
    """Squeeze-excitation: mean over rows -> two-layer gate -> scale channels."""
    squeeze = T.mean_axis(tokens, -2)                     # (..., c)
    hidden = T.relu(T.linear(squeeze, p.wa, p.ba))
    excitation = T.sigmoid(T.linear(hidden, p.wb, p.bb))  # (..., c)
    return T.scale_tokens(tokens, excitation)


def stage_head(cls_vec: Tensor, selected: Tensor, p: StageHeadParams,
               ln_eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Concat cls + selected tokens, SE-refine, run one transformer layer,
    and classify from the refined cls row.

    Returns ``(refined_cls, logits)``; logits are raw (no softmax).
    """
    lead = selected.data.shape[:-2]
    c = selected.data.shape[-1]
    if cls_vec.data.shape != lead + (c,):
        raise DimensionError(
            f"stage_head: cls shape {cls_vec.data.shape} does not match "
            f"selected {selected.data.shape}")
    cls_row = T.reshape(cls_vec, lead + (1, c))
    seq = T.concat([cls_row, selected], -2)
    seq = se_refine(seq, p.se)
    out, _ = transformer_layer(TokenSeq(seq, None), p.block, 1, 1, ln_eps)
    refined = T.reshape(T.slice_axis(out.tokens, -2, 0, 1), lead + (c,))
    logits = T.linear(refined, p.cls_w, p.cls_b)
    return refined, logits

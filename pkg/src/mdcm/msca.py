"""Cue activation: turn the cls attention row into a token-importance map,
average it with bilinearly resized maps from earlier stages, convert the
result to a zero-mean z-score mask, and rescale the patch tokens by
``1 + mask`` (cls token untouched).

By default the mask is a detached saliency measurement: no gradient flows
through the attention row or the mean/std statistics.  Setting the config
flag ``msca.detach = false`` keeps the whole mask construction on the tape
instead (the resize is a pair of constant interpolation matmuls, so it is
differentiable for free).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bilinear import interp_matrix
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class ActivationMap:
    """Nonnegative per-patch importances summing to 1 along the last axis.

    ``values`` has shape ``(..., N)`` with ``N == grid[0] * grid[1]``.
    """
    values: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.values.data.shape[-1] != h * w:
            raise DimensionError(
                f"ActivationMap: {self.values.data.shape[-1]} values do not "
                f"fill grid {h}x{w}")


@dataclass
class ScaleMask:
    """Zero-mean signed token weights; ``1 + weights`` scales the tokens."""
    weights: Tensor
    gamma: float
    grid: tuple[int, int]


# Rows whose total mass is at or below this are treated as empty.  A
# saturated softmax can underflow so that a row's patch slice (or its
# downscaled image) sums to zero or to a denormal; taking the reciprocal
# of such a total would overflow to inf and poison the mask with NaN.
_MIN_MASS = 1e-12


def _unit_mass(values: Tensor, n: int) -> Tensor:
    """Rows rescaled to sum 1; rows with (near-)zero mass become uniform.

    A row whose entries sum to ``_MIN_MASS`` or less carries no usable
    saliency information, so it is replaced by the uniform map (with zero
    gradient) instead of being blown up by a huge reciprocal.
    """
    total = T.sum_lastdim(values)
    if np.any(total.data < 0.0):
        raise ContractError("activation map: negative total mass")
    dead = total.data <= _MIN_MASS
    inv = T.powc(T.clamp_min(total, _MIN_MASS), -1.0)
    scaled = T.mul_colvec(values, inv)
    if not np.any(dead):
        return scaled
    keep = T.mul(scaled, T.constant(~dead[..., None] * np.ones(n)))
    fill = np.where(dead[..., None], 1.0 / n, 0.0) * np.ones(n)
    return T.add(keep, T.constant(fill))


def cls_attention_map(attn_row: Tensor, grid: tuple[int, int]) -> ActivationMap:
    """Build the importance map from the cls query's softmax row.

    Accepts the row with the cls self-attention entry (length N+1, entry 0
    dropped) or without it (length N); either way the result is renormalised
    to sum 1.  A row whose patch entries carry no mass (the cls token
    attended only to itself) yields the uniform map.
    """
    h, w = grid
    n = h * w
    length = attn_row.data.shape[-1]
    if length == n + 1:
        patch = T.slice_axis(attn_row, -1, 1, n + 1)
    elif length == n:
        patch = attn_row
    else:
        raise DimensionError(
            f"cls_attention_map: row length {length} fits neither {n} nor "
            f"{n + 1} for grid {h}x{w}")
    return ActivationMap(_unit_mass(patch, n), grid)


def resize_map(amap: ActivationMap, grid: tuple[int, int]) -> ActivationMap:
    """Bilinearly resize a map to another grid and renormalise to sum 1.

    The separable resize is two matmuls against constant interpolation
    matrices, applied from the right so the batch axes pass through.
    """
    if amap.grid == grid:
        return amap
    h, w = amap.grid
    oh, ow = grid
    lead = amap.values.data.shape[:-1]
    img = T.reshape(amap.values, lead + (h, w))
    row_t = T.constant(interp_matrix(h, oh).T)             # (h, oh)
    col_t = T.constant(interp_matrix(w, ow).T)             # (w, ow)
    tmp = T.swap_last2(T.matmul(T.swap_last2(img), row_t))  # (..., oh, w)
    out = T.matmul(tmp, col_t)                              # (..., oh, ow)
    flat = T.reshape(out, lead + (oh * ow,))
    return ActivationMap(_unit_mass(flat, oh * ow), grid)


def accumulate_maps(history: list[ActivationMap],
                    current: ActivationMap) -> ActivationMap:
    """Average the current map with earlier-stage maps resized to its grid.

    Earlier maps must not be coarser than the current grid.  The arithmetic
    mean of all resized maps and the current map is renormalised to sum 1.
    An empty history returns ``current`` unchanged.
    """
    if not history:
        return current
    for m in history:
        if m.grid[0] < current.grid[0] or m.grid[1] < current.grid[1]:
            raise ContractError(
                f"accumulate_maps: history grid {m.grid} is coarser than "
                f"current {current.grid}")
    parts = [resize_map(m, current.grid).values for m in history]
    parts.append(current.values)
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    avg = T.scale(total, 1.0 / len(parts))
    n = current.grid[0] * current.grid[1]
    return ActivationMap(_unit_mass(avg, n), current.grid)


def scale_mask(amap: ActivationMap, gamma: float) -> ScaleMask:
    """Z-score mask: ``(a - mean(A)) / std(A)**gamma`` with population std.

    A uniform map (zero std) yields the all-zero mask: with every token
    equally important there is nothing to enhance or suppress.
    """
    if gamma < 0:
        raise ContractError(f"scale_mask: gamma must be >= 0, got {gamma}")
    vals = amap.values
    n = vals.data.shape[-1]
    if n < 2:
        raise ContractError("scale_mask: need at least 2 tokens")
    mean = T.scale(T.sum_lastdim(vals), 1.0 / n)          # (...,)
    ones = T.constant(np.ones_like(vals.data))
    centered = T.add(vals, T.mul_colvec(ones, T.scale(mean, -1.0)))
    var = T.scale(T.sum_lastdim(T.mul(centered, centered)), 1.0 / n)
    # Variance at or below this is indistinguishable from a uniform map;
    # normalising by it would amplify float noise by >= 1e9.
    tiny = 1e-18
    if np.all(var.data <= tiny):
        return ScaleMask(T.constant(np.zeros_like(vals.data)), gamma, amap.grid)
    if np.any(var.data <= tiny):
        # Mixed batch: (near-)uniform rows get a zero mask, others the z-score.
        live = var.data > tiny
        safe = T.add(var, T.constant(np.where(live, 0.0, 1.0)))
        weights = T.mul_colvec(centered, T.powc(safe, -gamma / 2.0))
        weights = T.mul(weights, T.constant(live[..., None] * np.ones(n)))
        return ScaleMask(weights, gamma, amap.grid)
    weights = T.mul_colvec(centered, T.powc(var, -gamma / 2.0))
    return ScaleMask(weights, gamma, amap.grid)


def apply_mask(seq, mask: ScaleMask, clamp_floor: float = 0.05):
    """Scale patch token k by ``max(1 + m_k, clamp_floor)``; cls untouched.

    The clamp stops extreme suppression from flipping token signs.  Whether
    the mask carries gradients is decided upstream (detached by default).
    """
    from .backbone import TokenSeq  # local import to avoid a cycle

    tokens = seq.tokens
    n = tokens.data.shape[-2] - 1
    if mask.weights.data.shape[-1] != n:
        raise DimensionError(
            f"apply_mask: mask length {mask.weights.data.shape[-1]} != "
            f"patch-token count {n}")
    if not np.all(np.isfinite(mask.weights.data)):
        # Clamping would silently turn NaN into the floor; fail loudly.
        raise ContractError("apply_mask: mask contains non-finite weights")
    factor = T.clamp_min(T.add_const(mask.weights, 1.0), clamp_floor)
    cls_row = T.slice_axis(tokens, -2, 0, 1)
    patches = T.slice_axis(tokens, -2, 1, n + 1)
    scaled = T.mul_colvec(patches, factor)
    return TokenSeq(T.concat([cls_row, scaled], -2), seq.grid)

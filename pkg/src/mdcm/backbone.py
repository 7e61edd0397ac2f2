"""Multi-stage pooled-attention transformer backbone.

The image is cut into non-overlapping patches, linearly embedded with a bias
and a learned position embedding, and prefixed with a learned cls token.
Four stages of transformer layers follow.  Each layer is

    Z' = MHPA(LN(Z)) + Z
    Z_out = MLP(LN(Z')) + Z'

where MHPA projects Q/K/V, average-pools them on the patch-token grid with
per-layer strides (the cls row is never pooled), and applies standard scaled
dot-product attention per head.  The first layer of stages 2-4 pools queries
with stride 2 and doubles the channel count through its projections; the
residual path is pooled identically and passed through a linear shortcut
projection when the channel count changes.

All operations accept an optional batch axis: token tensors are
``(T, c)`` or ``(B, T, c)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import msca
from . import tensor as T
from .config import BackboneConfig, MscaConfig
from .errors import DimensionError
from .msca import ActivationMap
from .params import trunc_normal
from .tensor import Tensor


@dataclass
class TokenSeq:
    """A token sequence with its patch-grid shape.

    Row 0 (along the token axis) is the cls token and is exempt from every
    spatial operation.  ``grid`` is ``None`` for grid-less sequences (the
    per-stage head blocks), in which case pooling is unavailable.
    """
    tokens: Tensor
    grid: tuple[int, int] | None

    def __post_init__(self):
        if self.grid is not None:
            h, w = self.grid
            rows = self.tokens.data.shape[-2]
            if rows != h * w + 1:
                raise DimensionError(
                    f"TokenSeq: {rows} rows != grid {h}x{w} + cls")


@dataclass
class StageOutput:
    seq: TokenSeq
    stage_index: int
    cls_attention: ActivationMap


@dataclass
class LNParams:
    g: Tensor
    b: Tensor


@dataclass
class MhpaParams:
    ln: LNParams
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    skip_w: Tensor | None
    skip_b: Tensor | None
    n_heads: int


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class LayerParams:
    mhpa: MhpaParams
    ln2: LNParams
    mlp: MlpParams


@dataclass
class BackboneParams:
    patch_w: Tensor
    patch_b: Tensor
    cls: Tensor
    pos: Tensor
    stages: list[list[LayerParams]]


def init_ln(c: int) -> LNParams:
    return LNParams(T.parameter(np.ones(c)), T.parameter(np.zeros(c)))


def init_layer(rng: np.random.Generator, c_in: int, c_out: int,
               n_heads: int) -> LayerParams:
    def w(shape):
        return T.parameter(trunc_normal(rng, shape))

    def b(n):
        return T.parameter(np.zeros(n))

    needs_skip = c_in != c_out
    mhpa = MhpaParams(
        ln=init_ln(c_in),
        wq=w((c_in, c_out)), bq=b(c_out),
        wk=w((c_in, c_out)), bk=b(c_out),
        wv=w((c_in, c_out)), bv=b(c_out),
        wo=w((c_out, c_out)), bo=b(c_out),
        skip_w=w((c_in, c_out)) if needs_skip else None,
        skip_b=b(c_out) if needs_skip else None,
        n_heads=n_heads,
    )
    hidden = 4 * c_out
    mlp = MlpParams(w1=w((c_out, hidden)), b1=b(hidden),
                    w2=w((hidden, c_out)), b2=b(c_out))
    return LayerParams(mhpa=mhpa, ln2=init_ln(c_out), mlp=mlp)


def init_backbone(rng: np.random.Generator, cfg: BackboneConfig) -> BackboneParams:
    grid = cfg.base_grid()
    n_tokens = grid * grid + 1
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
    d = cfg.embed_dim
    stages: list[list[LayerParams]] = []
    c_prev = d
    for i in range(4):
        c_out = cfg.stage_dims[i]
        layers = []
        for j in range(cfg.stage_depths[i]):
            c_in = c_prev if j == 0 else c_out
            layers.append(init_layer(rng, c_in, c_out, cfg.stage_heads[i]))
        stages.append(layers)
        c_prev = c_out
    return BackboneParams(
        patch_w=T.parameter(trunc_normal(rng, (patch_dim, d))),
        patch_b=T.parameter(np.zeros(d)),
        cls=T.parameter(trunc_normal(rng, (1, d))),
        pos=T.parameter(trunc_normal(rng, (n_tokens, d))),
        stages=stages,
    )


def extract_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """Row-major non-overlapping patches: (..., h, w, c) -> (..., N, o*o*c)."""
    *lead, h, w, c = image.shape
    gh, gw = h // patch, w // patch
    x = image.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)               # (..., gh, gw, patch, patch, c)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def patch_embed(image: np.ndarray, cfg: BackboneConfig,
                p: BackboneParams) -> TokenSeq:
    """Embed an image (or batch) into tokens: cls + patches + positions."""
    img = np.asarray(image, dtype=np.float64)
    expect = (cfg.image_size, cfg.image_size, cfg.channels)
    if img.shape[-3:] != expect:
        raise DimensionError(
            f"patch_embed: image shape {img.shape} does not end in {expect}")
    patches = T.constant(extract_patches(img, cfg.patch_size))
    tok = T.add_bias(T.matmul(patches, p.patch_w), p.patch_b)
    if img.ndim == 4:
        cls_tok = T.broadcast_rows(T.reshape(p.cls, (1, 1, cfg.embed_dim)),
                                   img.shape[0])
    else:
        cls_tok = p.cls
    tokens = T.concat([cls_tok, tok], -2)
    tokens = T.add_bias(tokens, p.pos)
    grid = cfg.base_grid()
    return TokenSeq(tokens, (grid, grid))


def pool_tokens(x: Tensor, grid: tuple[int, int], stride: int) -> Tensor:
    """Average-pool the patch rows on the grid; the cls row passes through."""
    if stride == 1:
        return x
    if grid is None:
        raise DimensionError("pool_tokens: grid-less sequence cannot be pooled")
    h, w = grid
    cls_row = T.slice_axis(x, -2, 0, 1)
    patches = T.slice_axis(x, -2, 1, h * w + 1)
    pooled = T.avgpool_grid(patches, grid, stride)
    return T.concat([cls_row, pooled], -2)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., T, c) -> (..., H, T, c/H)
    lead = x.data.shape[:-2]
    t, c = x.data.shape[-2:]
    d = c // n_heads
    y = T.reshape(x, lead + (t, n_heads, d))
    nd = y.data.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(y, perm)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., H, T, d) -> (..., T, H*d)
    lead = x.data.shape[:-3]
    h, t, d = x.data.shape[-3:]
    nd = x.data.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.reshape(T.transpose(x, perm), lead + (t, h * d))


def mhpa(seq: TokenSeq, p: MhpaParams, q_pool_stride: int = 1,
         kv_pool_stride: int = 1,
         ln_eps: float = 1e-5) -> tuple[TokenSeq, ActivationMap | None]:
    """Pooling attention with pre-norm and residual.

    Computes ``attention(LN(Z)) + shortcut(Z)`` where the shortcut is pooled
    exactly like the queries and linearly projected when the channel count
    changes.  Returns the new sequence and the cls query's post-softmax
    attention row over patch keys as an importance map (``None`` for
    grid-less sequences).
    """
    x = seq.tokens
    grid = seq.grid
    if grid is not None:
        h, w = grid
        if q_pool_stride > 1 and (h % q_pool_stride or w % q_pool_stride):
            raise DimensionError(
                f"mhpa: grid {h}x{w} not divisible by q stride {q_pool_stride}")
        if kv_pool_stride > 1 and (h % kv_pool_stride or w % kv_pool_stride):
            raise DimensionError(
                f"mhpa: grid {h}x{w} not divisible by kv stride {kv_pool_stride}")
    elif q_pool_stride != 1 or kv_pool_stride != 1:
        raise DimensionError("mhpa: grid-less sequence cannot be pooled")

    xn = T.layer_norm(x, p.ln.g, p.ln.b, ln_eps)
    q = T.add_bias(T.matmul(xn, p.wq), p.bq)
    k = T.add_bias(T.matmul(xn, p.wk), p.bk)
    v = T.add_bias(T.matmul(xn, p.wv), p.bv)
    q = pool_tokens(q, grid, q_pool_stride)
    k = pool_tokens(k, grid, kv_pool_stride)
    v = pool_tokens(v, grid, kv_pool_stride)

    d_head = q.data.shape[-1] // p.n_heads
    qh = _split_heads(q, p.n_heads)
    kh = _split_heads(k, p.n_heads)
    vh = _split_heads(v, p.n_heads)
    logits = T.scale(T.matmul(qh, T.swap_last2(kh)), 1.0 / np.sqrt(d_head))
    attn = T.softmax_lastdim(logits)          # (..., H, Tq, Tk)
    ctx = _merge_heads(T.matmul(attn, vh))
    out = T.add_bias(T.matmul(ctx, p.wo), p.bo)

    shortcut = x
    if p.skip_w is not None:
        shortcut = T.add_bias(T.matmul(shortcut, p.skip_w), p.skip_b)
    shortcut = pool_tokens(shortcut, grid, q_pool_stride)
    tokens = T.add(out, shortcut)

    if grid is None:
        return TokenSeq(tokens, None), None
    out_grid = (grid[0] // q_pool_stride, grid[1] // q_pool_stride)
    key_grid = (grid[0] // kv_pool_stride, grid[1] // kv_pool_stride)
    row = T.slice_axis(attn, -2, 0, 1)        # (..., H, 1, Tk)
    row = T.mean_axis(row, -3)                # (..., 1, Tk)
    row = T.reshape(row, row.data.shape[:-2] + (row.data.shape[-1],))
    amap = msca.cls_attention_map(row, key_grid)
    return TokenSeq(tokens, out_grid), amap


def transformer_layer(seq: TokenSeq, p: LayerParams, q_pool_stride: int = 1,
                      kv_pool_stride: int = 1, ln_eps: float = 1e-5
                      ) -> tuple[TokenSeq, ActivationMap | None]:
    """One pre-norm block: pooled attention + residual, then MLP + residual."""
    mid, amap = mhpa(seq, p.mhpa, q_pool_stride, kv_pool_stride, ln_eps)
    xn = T.layer_norm(mid.tokens, p.ln2.g, p.ln2.b, ln_eps)
    hidden = T.relu(T.add_bias(T.matmul(xn, p.mlp.w1), p.mlp.b1))
    out = T.add_bias(T.matmul(hidden, p.mlp.w2), p.mlp.b2)
    return TokenSeq(T.add(mid.tokens, out), mid.grid), amap


def forward_stages(image: np.ndarray, cfg: BackboneConfig,
                   p: BackboneParams,
                   msca_cfg: MscaConfig | None = None) -> list[StageOutput]:
    """Run the four stages; apply the cue-activation mask between stages.

    When cue activation is enabled, the mask built from each of stages 1-3
    is applied to that stage's output before it is recorded and fed onward,
    so both the next stage and the downstream token selection see the
    adjusted tokens.  Stage 4 is never masked.  Each ``StageOutput`` carries
    the stage's final-layer cls attention map, resized to the stage's token
    grid when key pooling left it finer.
    """
    seq = patch_embed(image, cfg, p)
    history: list[ActivationMap] = []
    outputs: list[StageOutput] = []
    for i, layers in enumerate(p.stages, start=1):
        amap: ActivationMap | None = None
        for j, lp in enumerate(layers):
            q_stride = 2 if (i >= 2 and j == 0) else 1
            seq, amap = transformer_layer(seq, lp, q_stride, cfg.kv_stride,
                                          cfg.ln_eps)
        amap = msca.resize_map(amap, seq.grid)
        if msca_cfg is not None and msca_cfg.enabled:
            if msca_cfg.detach:
                amap = ActivationMap(amap.values.detach(), amap.grid)
            if i <= 3:
                merged = msca.accumulate_maps(history, amap)
                mask = msca.scale_mask(merged, msca_cfg.gamma)
                seq = msca.apply_mask(seq, mask, msca_cfg.clamp_floor)
        history.append(amap)
        outputs.append(StageOutput(seq=seq, stage_index=i, cls_attention=amap))
    return outputs


def cls_vector(seq: TokenSeq) -> Tensor:
    """Row 0 as a vector: (..., T, c) -> (..., c)."""
    row = T.slice_axis(seq.tokens, -2, 0, 1)
    lead = row.data.shape[:-2]
    return T.reshape(row, lead + (row.data.shape[-1],))

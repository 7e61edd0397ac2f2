"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every differentiable computation in the package runs through this module.
Operations executed while a :class:`Tape` is active append one node each, in
creation order, which is already a topological order of the computation DAG.
``backward`` walks the tape once, in reverse, accumulating gradients at
fan-out points.  Tensors that do not require gradients never receive one.

Design constraints honoured here:

* all arrays are float64; inputs of other dtypes are converted on entry,
* a fresh tape is used per training step (the caller drops the old one),
* gradients of leaves have exactly the shape of the leaf,
* broadcasting in the binary elementwise ops is restricted to scalar-vs-array
  and equal shapes; structured broadcasts get dedicated ops (``add_bias``,
  ``mul_colvec``, ``scale_tokens``) whose backward passes reduce explicitly.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

Array = np.ndarray

_TAPES: list["Tape"] = []


def _f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus optional autodiff bookkeeping.

    ``requires_grad`` marks leaves (parameters).  Results of operations on
    grad-requiring inputs carry a ``node`` while a tape is active; ``grad``
    is populated by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.node: "Node | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    """A leaf tensor that never receives gradients."""
    return Tensor(data)


class Node:
    """One recorded operation: its output, inputs, and backward closure.

    ``bwd`` maps the output gradient to an iterable of ``(input, grad)``
    pairs; inputs that need no gradient may be paired with ``None``.
    """

    __slots__ = ("op", "out", "bwd")

    def __init__(self, op: str, out: Tensor,
                 bwd: Callable[[Array], Iterable[tuple[Tensor, Array | None]]]):
        self.op = op
        self.out = out
        self.bwd = bwd


class Tape:
    """Append-only operation record; also a context manager.

    Creation order equals topological order, so ``backward`` is a single
    reverse sweep.  Tapes are not thread-safe; one tape per training step.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPES.pop()
        return False


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _needs_grad(*tensors: Tensor | None) -> bool:
    return any(t is not None and (t.requires_grad or t.node is not None)
               for t in tensors)


def _record(op: str, out: Tensor, inputs: Sequence[Tensor | None], bwd) -> Tensor:
    tape = active_tape()
    if tape is not None and _needs_grad(*inputs):
        node = Node(op, out, bwd)
        out.node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Run one reverse sweep from a scalar loss.

    Gradients accumulate at fan-out points; each node is visited exactly
    once, in reverse creation order.  Leaves keep their gradient in
    ``.grad``; intermediate gradients are freed as soon as their node has
    been processed.  Returns a map from each reached grad-requiring leaf to
    its gradient.  Raises ``ContractError`` for a non-scalar loss or a loss
    that is not on the innermost active tape.
    """
    if loss.node is None:
        raise ContractError("backward: loss is not attached to an active tape")
    if loss.data.shape != ():
        raise ContractError(
            f"backward: loss must be a scalar, got shape {loss.data.shape}")
    tape = active_tape()
    if tape is None or (tape.nodes[-1].out is not loss
                        and loss.node not in tape.nodes):
        raise ContractError("backward: loss was recorded on a different tape")

    loss.grad = np.ones((), dtype=np.float64)
    leaves: dict[Tensor, Tensor] = {}
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for inp, gi in node.bwd(g):
            if inp is None or gi is None:
                continue
            if inp.requires_grad or inp.node is not None:
                if gi.shape != inp.data.shape:
                    raise ContractError(
                        f"backward: gradient shape {gi.shape} does not match "
                        f"tensor shape {inp.data.shape} in op '{node.op}'")
                inp.grad = gi if inp.grad is None else inp.grad + gi
                if inp.node is None and inp.requires_grad and inp not in leaves:
                    leaves[inp] = inp
        node.out.grad = None  # all consumers already processed
    return {leaf: Tensor(leaf.grad) for leaf in leaves}


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Elementwise and scalar ops
# ---------------------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # Broadcasting is restricted to scalar-vs-array and identical shapes.
    if a.data.shape == b.data.shape:
        return
    if a.data.shape == () or b.data.shape == ():
        return
    raise DimensionError(
        f"{op}: shapes {a.data.shape} and {b.data.shape} are neither equal "
        f"nor scalar-vs-array")


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    # Undo scalar broadcast in binary ops.
    if shape == ():
        return np.sum(g)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record("add", out, (a, b), lambda g: (
        (a, _reduce_to(g, a.data.shape)), (b, _reduce_to(g, b.data.shape))))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record("sub", out, (a, b), lambda g: (
        (a, _reduce_to(g, a.data.shape)), (b, _reduce_to(-g, b.data.shape))))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record("mul", out, (a, b), lambda g: (
        (a, _reduce_to(g * b.data, a.data.shape)),
        (b, _reduce_to(g * a.data, b.data.shape))))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    return _record("scale", out, (x,), lambda g: ((x, g * c),))


def add_const(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data + c)
    return _record("add_const", out, (x,), lambda g: ((x, g),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record("relu", out, (x,), lambda g: ((x, g * mask),))


def sigmoid(x: Tensor) -> Tensor:
    # Stable two-branch logistic.
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor(y)
    return _record("sigmoid", out, (x,), lambda g: ((x, g * y * (1.0 - y)),))


def powc(x: Tensor, p: float) -> Tensor:
    """Elementwise ``x ** p`` for a constant exponent (caller owns domain)."""
    p = float(p)
    y = x.data ** p
    out = Tensor(y)
    return _record("powc", out, (x,),
                   lambda g: ((x, g * p * x.data ** (p - 1.0)),))


def sqrt(x: Tensor) -> Tensor:
    return powc(x, 0.5)


def log(x: Tensor) -> Tensor:
    """Natural log with the argument clamped below at 1e-12.

    The clamp guards ``log 0``; where it engages the local gradient is zero.
    """
    floor = 1e-12
    clamped = np.maximum(x.data, floor)
    live = x.data > floor
    out = Tensor(np.log(clamped))
    return _record("log", out, (x,),
                   lambda g: ((x, np.where(live, g / clamped, 0.0)),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    live = x.data > floor
    out = Tensor(np.where(live, x.data, floor))
    return _record("clamp_min", out, (x,),
                   lambda g: ((x, np.where(live, g, 0.0)),))


# ---------------------------------------------------------------------------
# Structured broadcasts
# ---------------------------------------------------------------------------

def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b``'s shape matches the trailing axes of ``x``.

    The gradient of ``b`` sums over the broadcast leading axes.
    """
    if b.data.ndim > x.data.ndim or x.data.shape[x.data.ndim - b.data.ndim:] != b.data.shape:
        raise DimensionError(
            f"add_bias: bias shape {b.data.shape} does not match trailing "
            f"axes of {x.data.shape}")
    lead = tuple(range(x.data.ndim - b.data.ndim))
    out = Tensor(x.data + b.data)
    return _record("add_bias", out, (x, b), lambda g: (
        (x, g), (b, g.sum(axis=lead) if lead else g.copy())))


def mul_colvec(x: Tensor, v: Tensor) -> Tensor:
    """``x * v[..., None]``: one scalar per row of the last axis.

    ``v.shape`` must equal ``x.shape[:-1]``.  Gradient of ``v`` sums over
    the last axis of ``x``.
    """
    if v.data.shape != x.data.shape[:-1]:
        raise DimensionError(
            f"mul_colvec: v shape {v.data.shape} != leading shape "
            f"{x.data.shape[:-1]}")
    out = Tensor(x.data * v.data[..., None])
    return _record("mul_colvec", out, (x, v), lambda g: (
        (x, g * v.data[..., None]), (v, (g * x.data).sum(axis=-1))))


def scale_tokens(x: Tensor, v: Tensor) -> Tensor:
    """``x * v[..., None, :]``: one scalar per channel, shared across rows.

    ``x`` has shape ``(..., T, c)`` and ``v`` shape ``(..., c)``.  Gradient
    of ``v`` sums over the row axis.
    """
    if v.data.shape != x.data.shape[:-2] + x.data.shape[-1:]:
        raise DimensionError(
            f"scale_tokens: v shape {v.data.shape} incompatible with "
            f"{x.data.shape}")
    out = Tensor(x.data * v.data[..., None, :])
    return _record("scale_tokens", out, (x, v), lambda g: (
        (x, g * v.data[..., None, :]), (v, (g * x.data).sum(axis=-2))))


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Tile a ``(1, ...)`` tensor to ``(n, ...)``; backward sums over copies."""
    if x.data.shape[0] != 1:
        raise DimensionError(f"broadcast_rows: leading axis must be 1, "
                             f"got {x.data.shape}")
    out = Tensor(np.broadcast_to(x.data, (n,) + x.data.shape[1:]).copy())
    return _record("broadcast_rows", out, (x,),
                   lambda g: ((x, g.sum(axis=0, keepdims=True)),))


# ---------------------------------------------------------------------------
# Matrix multiply
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    ``a`` is ``(..., m, k)``.  ``b`` is either ``(k, n)`` (shared across the
    leading axes of ``a``, gradient summed over them) or ``(..., k, n)`` with
    leading axes equal to ``a``'s.
    """
    a, b = _coerce(a), _coerce(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise DimensionError(
            f"matmul: operands must have ndim >= 2, got {da.shape} and {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree: {da.shape} @ {db.shape}")
    if db.ndim == 2:
        out = Tensor(da @ db)

        def bwd(g: Array):
            ga = g @ db.T
            k, n = db.shape
            gb = da.reshape(-1, k).T @ g.reshape(-1, n)
            return ((a, ga), (b, gb))
        return _record("matmul", out, (a, b), bwd)
    if da.shape[:-2] != db.shape[:-2]:
        raise DimensionError(
            f"matmul: leading dimensions disagree: {da.shape} @ {db.shape}")
    out = Tensor(da @ db)

    def bwd(g: Array):
        return ((a, g @ db.swapaxes(-1, -2)), (b, da.swapaxes(-1, -2) @ g))
    return _record("matmul", out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``(..., k) @ (k, n) [+ b]``.

    Unlike ``matmul`` this accepts inputs without a row axis (plain
    vectors and stacks of vectors).
    """
    lead = x.data.shape[:-1]
    k = x.data.shape[-1]
    flat = reshape(x, (int(np.prod(lead)) if lead else 1, k))
    y = matmul(flat, w)
    if b is not None:
        y = add_bias(y, b)
    return reshape(y, lead + (w.data.shape[-1],))


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    src = x.data.shape
    return _record("reshape", out, (x,), lambda g: ((x, g.reshape(src)),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(np.transpose(x.data, axes))
    return _record("transpose", out, (x,),
                   lambda g: ((x, np.transpose(g, inv)),))


def swap_last2(x: Tensor) -> Tensor:
    axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    return transpose(x, axes)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g: Array):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(parts, pieces))
    return _record("concat", out, tuple(parts), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx].copy())

    def bwd(g: Array):
        full = np.zeros_like(x.data)
        full[idx] = g
        return ((x, full),)
    return _record("slice_axis", out, (x,), bwd)


def gather_rows(x: Tensor, indices: Array) -> Tensor:
    """Select rows along axis -2.

    ``indices`` is 1-D (applied to every leading slice) or, for a 3-D ``x``
    of shape ``(B, T, c)``, 2-D with shape ``(B, k)``.  Indices must be
    distinct within each row set and in range; duplicates are a contract
    violation (selection produces distinct tokens).
    """
    idx = np.asarray(indices)
    T = x.data.shape[-2]
    if np.any(idx < 0) or np.any(idx >= T):
        raise ContractError(f"gather_rows: index out of range for {T} rows")
    if idx.ndim == 1:
        if len(np.unique(idx)) != idx.size:
            raise ContractError("gather_rows: duplicate indices")
        out = Tensor(x.data[..., idx, :].copy())

        def bwd(g: Array):
            full = np.zeros_like(x.data)
            full[..., idx, :] = g
            return ((x, full),)
        return _record("gather_rows", out, (x,), bwd)
    if idx.ndim == 2 and x.data.ndim == 3:
        if idx.shape[0] != x.data.shape[0]:
            raise DimensionError(
                f"gather_rows: batch sizes differ: {idx.shape} vs {x.data.shape}")
        for row in idx:
            if len(np.unique(row)) != row.size:
                raise ContractError("gather_rows: duplicate indices in a row")
        out = Tensor(np.take_along_axis(x.data, idx[:, :, None], axis=1))
        barange = np.arange(x.data.shape[0])[:, None]

        def bwd(g: Array):
            full = np.zeros_like(x.data)
            full[barange, idx] = g  # distinct per row, plain assignment
            return ((x, full),)
        return _record("gather_rows", out, (x,), bwd)
    raise DimensionError(
        f"gather_rows: unsupported index rank {idx.ndim} for input rank "
        f"{x.data.ndim}")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data))
    shape = x.data.shape
    return _record("sum_all", out, (x,),
                   lambda g: ((x, np.broadcast_to(g, shape).copy()),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    out = Tensor(np.sum(x.data, axis=axis))
    nd = x.data.ndim
    ax = axis % nd
    n = x.data.shape[ax]

    def bwd(g: Array):
        return ((x, np.repeat(np.expand_dims(g, ax), n, axis=ax)),)
    return _record("sum_axis", out, (x,), bwd)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.data.shape[axis % x.data.ndim]
    return scale(sum_axis(x, axis), 1.0 / n)


def sum_lastdim(x: Tensor) -> Tensor:
    return sum_axis(x, -1)


# ---------------------------------------------------------------------------
# Fused neural ops
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stabilised softmax along the last axis."""
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g: Array):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((x, (g - dot) * y),)
    return _record("softmax_lastdim", out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance, then affine.

    Population variance; ``gain`` and ``bias`` have the last-axis shape.
    """
    c = x.data.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise DimensionError(
            f"layer_norm: gain/bias must have shape ({c},), got "
            f"{gain.data.shape} and {bias.data.shape}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g: Array):
        lead = tuple(range(g.ndim - 1))
        dgain = np.sum(g * xhat, axis=lead) if lead else g * xhat
        dbias = np.sum(g, axis=lead) if lead else g.copy()
        gh = g * gain.data
        dx = inv * (gh - np.mean(gh, axis=-1, keepdims=True)
                    - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        return ((x, dx), (gain, dgain), (bias, dbias))
    return _record("layer_norm", out, (x, gain, bias), bwd)


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor,
               running_mean: Array, running_var: Array,
               train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over axis 0 of a ``(B, c)`` input.

    In training mode with B > 1, batch statistics (population variance)
    normalise the batch and the running statistics are updated in place with
    the given momentum.  With B == 1 in training mode, or in eval mode, the
    running statistics are used (a single sample has zero batch variance).
    """
    if x.data.ndim != 2:
        raise DimensionError(f"batch_norm: expected (B, c), got {x.data.shape}")
    B = x.data.shape[0]
    if train and B > 1:
        mu = np.mean(x.data, axis=0)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=0)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = Tensor(xhat * gain.data + bias.data)

        def bwd(g: Array):
            dgain = np.sum(g * xhat, axis=0)
            dbias = np.sum(g, axis=0)
            gh = g * gain.data
            dx = inv * (gh - np.mean(gh, axis=0)
                        - xhat * np.mean(gh * xhat, axis=0))
            return ((x, dx), (gain, dgain), (bias, dbias))
        return _record("batch_norm", out, (x, gain, bias), bwd)

    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g: Array):
        dgain = np.sum(g * xhat, axis=0)
        dbias = np.sum(g, axis=0)
        return ((x, g * (gain.data * inv)), (gain, dgain), (bias, dbias))
    return _record("batch_norm_eval", out, (x, gain, bias), bwd)


def avgpool_grid(x: Tensor, grid: tuple[int, int], stride: int) -> Tensor:
    """Average-pool rows laid out as an ``h x w`` grid along axis -2.

    ``x`` has shape ``(..., h*w, c)``; output ``(..., (h//s)*(w//s), c)``.
    Both grid sides must be divisible by the stride.
    """
    h, w = grid
    s = int(stride)
    if x.data.shape[-2] != h * w:
        raise DimensionError(
            f"avgpool_grid: row count {x.data.shape[-2]} != grid {h}x{w}")
    if s == 1:
        return x
    if h % s or w % s:
        raise DimensionError(f"avgpool_grid: grid {h}x{w} not divisible by {s}")
    lead = x.data.shape[:-2]
    c = x.data.shape[-1]
    xv = x.data.reshape(lead + (h // s, s, w // s, s, c))
    out = Tensor(xv.mean(axis=(-2, -4)).reshape(lead + ((h // s) * (w // s), c)))

    def bwd(g: Array):
        gv = g.reshape(lead + (h // s, 1, w // s, 1, c)) / (s * s)
        gv = np.broadcast_to(gv, lead + (h // s, s, w // s, s, c))
        return ((x, gv.reshape(lead + (h * w, c)).copy()),)
    return _record("avgpool_grid", out, (x,), bwd)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def _relative_error(analytic: Array, numeric: Array) -> Array:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | Array,
               h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure function of its tensor argument returning a scalar
    tensor.  Relative error per element is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not (0.0 < h <= 1e-2):
        raise ContractError(f"grad_check: h must be in (0, 1e-2], got {h}")
    base = x.data.copy() if isinstance(x, Tensor) else _f64(x).copy()

    probe = Tensor(base.copy(), requires_grad=True)
    with Tape():
        y = f(probe)
        if y.data.shape != ():
            raise ContractError("grad_check: f must return a scalar")
        backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(base.copy())).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    return float(np.max(_relative_error(analytic, numeric))) if base.size else 0.0


def finite_diff_params(loss_fn: Callable[[], Tensor],
                       params: dict[str, Tensor],
                       h: float = 1e-5,
                       max_coords: int | None = None,
                       rng: np.random.Generator | None = None) -> float:
    """Central-difference check of ``loss_fn`` against every named parameter.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values on
    each call.  When ``max_coords`` is set, at most that many coordinates per
    parameter tensor are probed (chosen by ``rng``); otherwise all are.
    Returns the maximum relative error across all probed coordinates.
    """
    if not (0.0 < h <= 1e-2):
        raise ContractError(f"finite_diff_params: h must be in (0, 1e-2], got {h}")
    zero_grads(params.values())
    with Tape():
        loss = loss_fn()
        backward(loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = float(_relative_error(np.asarray(grad[i]), np.asarray(numeric)))
            if err > worst:
                worst = err
    return worst

"""Corner-aligned separable bilinear resampling.

A 1-D resize from ``n_in`` to ``n_out`` samples is a linear map; its matrix
has rows of at most two interpolation weights.  Output position ``i`` samples
input coordinate ``i * (n_in - 1) / (n_out - 1)`` (corners map to corners);
a single-sample output reads the centre coordinate ``(n_in - 1) / 2``.
2-D resizing applies the row matrix on the left and the column matrix on the
right, so the same matrices serve plain numpy arrays and tape tensors.
"""

from __future__ import annotations

import numpy as np

_cache: dict[tuple[int, int], np.ndarray] = {}


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """The ``(n_out, n_in)`` corner-aligned bilinear interpolation matrix."""
    key = (n_in, n_out)
    if key in _cache:
        return _cache[key]
    m = np.zeros((n_out, n_in))
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    _cache[key] = m
    return m


def resize2d(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes of ``arr`` from (h, w) to (out_h, out_w)."""
    h, w = arr.shape[-2], arr.shape[-1]
    r = interp_matrix(h, out_h)
    c = interp_matrix(w, out_w)
    return np.einsum("ij,...jk,lk->...il", r, arr, c, optimize=True)


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an ``(h, w, channels)`` image."""
    moved = np.moveaxis(img, -1, 0)          # (c, h, w)
    out = resize2d(moved, out_h, out_w)
    return np.moveaxis(out, 0, -1)

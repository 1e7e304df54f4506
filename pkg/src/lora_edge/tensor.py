"""Dense float64 tensor primitives: reshaping, unfolding, core contraction, convolution.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Every function here is pure and returns fresh arrays.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an operation's contract."""


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    t = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        t = reshape(t, shape)
    if t.ndim < 1 or any(n < 1 for n in t.shape):
        raise ShapeError(f"tensor needs order >= 1 and positive extents, got {t.shape}")
    return t


def reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    new_shape = tuple(int(n) for n in new_shape)
    if int(np.prod(new_shape)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def unfold_step(t: np.ndarray, left_rows: int) -> np.ndarray:
    """Row-major matricization with ``left_rows`` rows."""
    if left_rows < 1 or t.size % left_rows:
        raise ShapeError(f"{left_rows} does not divide {t.size}")
    return reshape(t, (left_rows, t.size // left_rows))


def mode1_contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Contract the trailing rank index of ``a`` [p,m,q] with the leading one of ``b`` [q,n,s]."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"expected 3-way cores, got {a.shape} and {b.shape}")
    if a.shape[2] != b.shape[0]:
        raise ShapeError(f"rank mismatch: {a.shape} x {b.shape}")
    p, m, q = a.shape
    _, n, s = b.shape
    out = a.reshape(p * m, q) @ b.reshape(q, n * s)
    return out.reshape(p, m, n, s)


def _conv_dims(w: np.ndarray, x: np.ndarray, stride: int, padding: int):
    nsp = w.ndim - 2
    if nsp not in (1, 2):
        raise ShapeError(f"weight must be [C_out, C_in, k] or [C_out, C_in, k, k], got {w.shape}")
    if x.ndim != nsp + 2:
        raise ShapeError(f"input {x.shape} does not match {nsp}D weight {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    ksize = w.shape[2:]
    out = tuple((n + 2 * padding - k) // stride + 1 for n, k in zip(x.shape[2:], ksize))
    if any(o < 1 for o in out):
        raise ShapeError(f"empty output extent for input {x.shape}, kernel {ksize}, padding {padding}")
    return nsp, ksize, out


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    width = [(0, 0), (0, 0)] + [(padding, padding)] * (x.ndim - 2)
    return np.pad(x, width)


def _windows(xp: np.ndarray, ksize, stride: int) -> np.ndarray:
    axes = tuple(range(2, xp.ndim))
    win = sliding_window_view(xp, ksize, axis=axes)
    sl = (slice(None), slice(None)) + (slice(None, None, stride),) * len(axes)
    return win[sl]  # [B, C_in, *out, *k]


def conv_forward(w: np.ndarray, x: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` [B, C_in, *spatial] with ``w`` [C_out, C_in, *k]."""
    nsp, ksize, _ = _conv_dims(w, x, stride, padding)
    win = _windows(_pad(x, padding), ksize, stride)
    x_axes = [1] + list(range(2 + nsp, 2 + 2 * nsp))
    w_axes = list(range(1, 2 + nsp))
    y = np.tensordot(win, w, axes=(x_axes, w_axes))  # [B, *out, C_out]
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def conv_backward(
    w: np.ndarray, x: np.ndarray, grad_out: np.ndarray, stride: int = 1, padding: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv_forward(w, x))`` w.r.t. ``w`` and ``x``."""
    nsp, ksize, out = _conv_dims(w, x, stride, padding)
    expected = (x.shape[0], w.shape[0]) + out
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out {grad_out.shape} does not match forward output {expected}")
    xp = _pad(x, padding)
    win = _windows(xp, ksize, stride)
    sp = list(range(2, 2 + nsp))
    grad_w = np.tensordot(grad_out, win, axes=([0] + sp, [0] + sp))  # [C_out, C_in, *k]

    grad_xp = np.zeros_like(xp)
    # go[b, *out, c_in] for each kernel offset
    for offset in np.ndindex(*ksize):
        contrib = np.tensordot(grad_out, w[(slice(None), slice(None)) + offset], axes=([1], [0]))
        contrib = np.moveaxis(contrib, -1, 1)
        sl = (slice(None), slice(None)) + tuple(
            slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out)
        )
        grad_xp[sl] += contrib
    if padding:
        inner = (slice(None), slice(None)) + (slice(padding, -padding),) * nsp
        grad_xp = grad_xp[inner]
    return np.ascontiguousarray(grad_w), np.ascontiguousarray(grad_xp)

"""Tensor-train factorization by sequential truncated SVDs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import NumericError, truncated_svd
from .tensor import ShapeError, mode1_contract, reshape, unfold_step


@dataclass
class TTCores:
    cores: list[np.ndarray]

    def __post_init__(self):
        if not self.cores:
            raise ShapeError("a tensor train needs at least one core")
        for k, g in enumerate(self.cores):
            if g.ndim != 3:
                raise ShapeError(f"core {k + 1} is not 3-way: {g.shape}")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
            raise ShapeError("boundary ranks must be 1")
        for k in range(len(self.cores) - 1):
            if self.cores[k].shape[2] != self.cores[k + 1].shape[0]:
                raise ShapeError(
                    f"rank mismatch between core {k + 1} {self.cores[k].shape} "
                    f"and core {k + 2} {self.cores[k + 1].shape}"
                )

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(g.shape[2] for g in self.cores)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(g.shape[1] for g in self.cores)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [g.shape for g in self.cores]

    def param_count(self) -> int:
        return sum(g.size for g in self.cores)


def _clamped_ranks(shape: Sequence[int], r_target: int) -> list[int]:
    ranks = [1]
    remaining = int(np.prod(shape))
    for n in shape[:-1]:
        rows = ranks[-1] * n
        remaining //= n
        ranks.append(min(r_target, rows, remaining))
    ranks.append(1)
    return ranks


def tt_svd(w: np.ndarray, r_target: int) -> TTCores:
    """Decompose ``w`` left to right; step k truncates to min(r_target, rows, cols)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim < 2:
        raise ShapeError(f"TT-SVD needs a tensor of order >= 2, got {w.shape}")
    if r_target < 1:
        raise ValueError(f"target rank must be >= 1, got {r_target}")
    if not np.all(np.isfinite(w)):
        raise NumericError("tensor contains non-finite entries")
    shape = w.shape
    cores = []
    rank = 1
    residual = w
    for n in shape[:-1]:
        mat = unfold_step(residual, rank * n)
        svd = truncated_svd(mat, r_target)
        cores.append(reshape(svd.u, (rank, n, svd.rank)))
        rank = svd.rank
        residual = svd.singular_values[:, None] * svd.vt
    cores.append(reshape(residual, (rank, shape[-1], 1)))
    return TTCores(cores)


def tt_full(cores: Sequence[np.ndarray]) -> np.ndarray:
    """Chain mode-1 contractions left to right; returns [r_0, n_1, ..., n_d, r_d]."""
    out = cores[0]
    for g in cores[1:]:
        lead = out.shape[:-1]
        merged = mode1_contract(out.reshape(1, -1, out.shape[-1]), g)
        out = merged.reshape(lead + g.shape[1:])
    return out


def tt_reconstruct(c: TTCores, target_shape: Sequence[int]) -> np.ndarray:
    full = tt_full(c.cores)
    return reshape(full, target_shape)


def tt_param_count(shape: Sequence[int], r_target: int) -> tuple[list[int], int]:
    ranks = _clamped_ranks(list(shape), r_target)
    per_core = [ranks[k] * n * ranks[k + 1] for k, n in enumerate(shape)]
    return per_core, sum(per_core)


def tt_core_grads(cores: Sequence[np.ndarray], grad_full: np.ndarray, which: Sequence[int]) -> dict[int, np.ndarray]:
    """Gradients of ``sum(grad_full * tt_full(cores))`` w.r.t. the 1-based cores in ``which``.

    ``grad_full`` may have any shape with the right element count.
    """
    d = len(cores)
    modes = [g.shape[1] for g in cores]
    grads = {}
    for k in which:
        if not 1 <= k <= d:
            raise IndexError(f"core index {k} outside 1..{d}")
        i = k - 1
        g = cores[i]
        n_left = int(np.prod(modes[:i], dtype=np.int64))
        n_right = int(np.prod(modes[i + 1 :], dtype=np.int64))
        left = tt_full(cores[:i]).reshape(n_left, g.shape[0]) if i else np.ones((1, 1))
        right = tt_full(cores[i + 1 :]).reshape(g.shape[2], n_right) if i < d - 1 else np.ones((1, 1))
        gf = grad_full.reshape(n_left, modes[i], n_right)
        grads[k] = np.einsum("ap,aib,qb->piq", left, gf, right, optimize=True)
    return grads

"""Truncated SVD via one-sided (Hestenes) Jacobi rotations."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError

_EPS = np.finfo(np.float64).eps


class NumericError(ValueError):
    pass


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # [m, r]
    singular_values: np.ndarray  # [r], non-increasing
    vt: np.ndarray  # [r, n]

    @property
    def rank(self) -> int:
        return len(self.singular_values)

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint column pairings covering every pair once per sweep (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            left, right = zip(*pairs)
            rounds.append((np.array(left), np.array(right)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _jacobi(a: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of ``a`` (m >= n). Returns (rotated a, accumulated V)."""
    work = a.copy()
    n = work.shape[1]
    v = np.eye(n)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for left, right in rounds:
            ci, cj = work[:, left], work[:, right]
            alpha = np.einsum("ij,ij->j", ci, ci)
            beta = np.einsum("ij,ij->j", cj, cj)
            gamma = np.einsum("ij,ij->j", ci, cj)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            work[:, left], work[:, right] = c * ci - s * cj, s * ci + c * cj
            vi, vj = v[:, left], v[:, right]
            v[:, left], v[:, right] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            break
    return work, v


def _complete(q: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of ``q`` not flagged ``good`` with an orthonormal completion."""
    m = q.shape[0]
    basis = [q[:, j] for j in range(q.shape[1]) if good[j]]
    candidates = iter(np.eye(m))
    for j in range(q.shape[1]):
        if good[j]:
            continue
        for e in candidates:
            vec = e.copy()
            for _ in range(2):
                for b in basis:
                    vec -= (b @ vec) * b
            norm = np.linalg.norm(vec)
            if norm > 0.5:
                q[:, j] = vec / norm
                basis.append(q[:, j])
                break
    return q


def truncated_svd(a: np.ndarray, r: int, tol: float = 1e-15, max_sweeps: int = 80) -> SvdResult:
    """Rank-``min(r, m, n)`` SVD of a 2-way tensor with a deterministic sign convention.

    Each column of ``u`` has its largest-magnitude entry made non-negative
    (first index wins ties); the matching row of ``vt`` is flipped along with it.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"truncated_svd needs a matrix, got shape {a.shape}")
    if r < 1:
        raise ValueError(f"target rank must be >= 1, got {r}")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix contains non-finite entries")
    m, n = a.shape
    transposed = n > m
    work, v = _jacobi(a.T if transposed else a, tol, max_sweeps)

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, work, v = sigma[order], work[:, order], v[:, order]
    cutoff = sigma[0] * max(m, n) * _EPS if sigma.size else 0.0
    good = sigma > cutoff
    q = np.zeros_like(work)
    q[:, good] = work[:, good] / sigma[good]
    q = _complete(q, good)

    u, vt = (v, q.T) if transposed else (q, v.T)
    k = min(r, m, n)
    u, sigma, vt = u[:, :k].copy(), sigma[:k].copy(), vt[:k].copy()

    lead = np.argmax(np.abs(u), axis=0)
    flip = u[lead, np.arange(k)] < 0
    u[:, flip] *= -1.0
    vt[flip] *= -1.0
    return SvdResult(u=u, singular_values=sigma, vt=vt)

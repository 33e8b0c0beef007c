"""Dense linear algebra: Jacobi SVD, spectral diagnostics, PowerRemap and PCA.

Matrices are plain 2-D ``float64`` numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_EPS = np.finfo(np.float64).eps
MAX_SWEEPS = 60


class LinalgError(ValueError):
    pass


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise LinalgError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise LinalgError(f"non-finite entry at {tuple(int(i) for i in bad)}")
    return a


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # Circle-method tournament: every round is a set of disjoint column pairs,
    # so all rotations of a round commute and can be applied at once.
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        if p:
            rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1], *players[1:-1]]
    return tuple(rounds)


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged in ``keep`` by an orthonormal completion."""
    rows = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if keep[j]]
    filled = u.copy()
    candidates = iter(np.eye(rows))
    for j in range(u.shape[1]):
        if keep[j]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > 0.5:
                break
        else:
            raise LinalgError("cannot complete orthonormal basis")
        v /= norm
        basis.append(v)
        filled[:, j] = v
    return filled


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, cols = a.shape
    # Row j of ``state`` holds column j of the working matrix followed by
    # column j of V, so one gather/scatter rotates both.
    state = np.hstack([a.T, np.eye(cols)])
    tol = _EPS * rows
    rounds = [(p, q, np.concatenate([p, q]), len(p)) for p, q in _round_robin(cols)]
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(MAX_SWEEPS):
            rotated = False
            for p, q, pq, h in rounds:
                block = state[pq]
                ap, aq = block[:h, :rows], block[h:, :rows]
                alpha = np.einsum("ij,ij->i", ap, ap)
                beta = np.einsum("ij,ij->i", aq, aq)
                gamma = np.einsum("ij,ij->i", ap, aq)
                active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                if not active.any():
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * np.where(active, gamma, 1.0))
                t = np.where(active, np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta)), 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                cs = np.concatenate([c, c])[:, None]
                ss = np.concatenate([-s, s])[:, None]
                state[pq] = cs * block + ss * np.concatenate([block[h:], block[:h]])
            if not rotated:
                break

    work, v = state[:, :rows].T, state[:, rows:].T
    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma, work, v = sigma[order], work[:, order], v[:, order]
    keep = sigma > np.finfo(np.float64).tiny
    u = np.zeros_like(work)
    u[:, keep] = work[:, keep] / sigma[keep]
    if not keep.all():
        u = _complete_basis(u, keep)
    return u, sigma, np.ascontiguousarray(v)


def svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``m = U @ diag(sigma) @ V.T`` by one-sided (Hestenes) Jacobi.

    Rotations run on the thin dimension: for an ``r x c`` input, ``U`` is
    ``r x min(r, c)`` and ``V`` is ``c x min(r, c)``. ``sigma`` is
    nonincreasing. Raises :class:`LinalgError` on non-finite input.
    """
    a = as_matrix(m)
    if a.shape[0] < a.shape[1]:
        v, sigma, u = svd(a.T)
        return u, sigma, v
    if a.size == 0:
        return np.zeros(a.shape), np.zeros(a.shape[1]), np.eye(a.shape[1])
    scale = np.max(np.abs(a))
    if scale == 0.0:
        u = _complete_basis(np.zeros(a.shape), np.zeros(a.shape[1], dtype=bool))
        return u, np.zeros(a.shape[1]), np.eye(a.shape[1])
    u, sigma, v = _jacobi_tall(a / scale)
    return u, sigma * scale, v


@dataclass(frozen=True)
class Spectrum:
    singular_values: np.ndarray
    energies: np.ndarray
    entropy: float
    effective_rank: float
    condition_number: float


def spectrum_of(sigma) -> Spectrum:
    """Spectral diagnostics from a vector of singular values (natural-log entropy)."""
    s = np.sort(np.abs(np.asarray(sigma, dtype=np.float64)))[::-1]
    if s.size == 0 or s[0] == 0.0:
        raise LinalgError("zero spectrum")
    z = (s / s[0]) ** 2
    p = z / z.sum()
    nz = p > 0
    entropy = float(-np.sum(p[nz] * np.log(p[nz])))
    kappa = math.inf if s[-1] == 0.0 else float(s[0] / s[-1])
    return Spectrum(
        singular_values=s,
        energies=p,
        entropy=entropy,
        effective_rank=math.exp(entropy),
        condition_number=kappa,
    )


def spectrum(m) -> Spectrum:
    _, sigma, _ = svd(m)
    return spectrum_of(sigma)


def remap_singular_values(sigma, gamma: float) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64)
    smax = s.max()
    return smax * (s / smax) ** gamma


def power_remap(m, gamma: float) -> np.ndarray:
    """Compress the singular spectrum: ``sigma' = sigma_max * (sigma / sigma_max) ** gamma``.

    Singular vectors are kept; the largest singular value is unchanged. For
    ``gamma > 1`` the spectral entropy can only go down.
    """
    return power_remap_chain(m, (gamma,))[0]


def power_remap_chain(m, gammas) -> list[np.ndarray]:
    """``power_remap`` at several exponents from a single factorization of ``m``."""
    gammas = [float(g) for g in gammas]
    for g in gammas:
        if not g > 0:
            raise LinalgError(f"gamma must be > 0, got {g}")
    u, sigma, v = svd(m)
    if sigma.size == 0 or sigma[0] == 0.0:
        raise LinalgError("power_remap of an all-zero matrix")
    return [(u * remap_singular_values(sigma, g)) @ v.T for g in gammas]


def pca_basis(points, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` principal directions of a point set.

    Returns ``(basis, center)`` with ``basis`` of shape ``(d, k)``; project
    with ``(x - center) @ basis``. Each column's largest-magnitude entry is
    made positive so the basis is reproducible.
    """
    x = as_matrix(points)
    n, d = x.shape
    if k < 1 or k > d:
        raise LinalgError(f"k must be in [1, {d}], got {k}")
    if n < k + 1:
        raise LinalgError(f"need at least {k + 1} points for k={k}, got {n}")
    center = x.mean(axis=0)
    centered = x - center
    if not np.any(centered):
        raise LinalgError("zero variance")
    _, _, v = svd(centered)
    basis = v[:, :k].copy()
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(k)])
    return basis * np.where(signs == 0, 1.0, signs), center


def project(points, basis: np.ndarray, center: np.ndarray) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - center) @ basis

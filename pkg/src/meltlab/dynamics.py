"""Exact-score reverse diffusion for isotropic Gaussian mixtures.

Under a variance-preserving forward process the marginal at time ``s`` is
again a mixture, with means ``sqrt(abar(s)) * mu_j`` and shared variance
``v(s) = 1 - abar(s) + abar(s) * sigma0**2``. The reverse SDE is a noisy
gradient flow on ``u = -g^2 log p + Phi`` with ``Phi = -beta |x|^2 / 4``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from meltlab.lab.rng import rng_stream
from meltlab.linalg import pca_basis


class DynamicsError(ValueError):
    pass


@dataclass(frozen=True)
class VPProcess:
    beta_min: float = 0.1
    beta_max: float = 20.0

    def beta(self, s):
        return self.beta_min + np.asarray(s, dtype=np.float64) * (self.beta_max - self.beta_min)

    def g(self, s):
        return np.sqrt(self.beta(s))

    def alpha_bar(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.exp(-(self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s))

    def drift(self, x, s):
        return -0.5 * self.beta(s) * x


@dataclass(frozen=True)
class GMM:
    weights: np.ndarray
    means: np.ndarray
    var0: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        if w.ndim != 1 or len(w) != len(mu):
            raise DynamicsError("need one weight per mean")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DynamicsError(f"weights must be nonnegative and sum to 1, got {w}")
        if self.var0 < 0:
            raise DynamicsError("var0 must be >= 0")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def symmetric(cls, mu: float, sigma0: float = 0.0, weights=(0.5, 0.5)) -> "GMM":
        """Two modes at ``+-mu`` on a line."""
        return cls(np.asarray(weights, dtype=np.float64), np.array([[mu], [-mu]]), sigma0 * sigma0)


def _marginal(gmm: GMM, s, vp: VPProcess) -> tuple[np.ndarray, float]:
    if not 0.0 < float(s) <= 1.0:
        raise DynamicsError(f"s must be in (0, 1], got {s}")
    ab = float(vp.alpha_bar(s))
    return math.sqrt(ab) * gmm.means, (1.0 - ab) + ab * gmm.var0


def _as_points(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != d:
        raise DynamicsError(f"points must end in dimension {d}, got shape {x.shape}")
    return x


def _responsibilities(x: np.ndarray, means: np.ndarray, v: float, weights: np.ndarray):
    diff = x[..., None, :] - means  # (..., J, d)
    logits = np.log(np.where(weights > 0, weights, 1.0)) - 0.5 * np.einsum("...jd,...jd->...j", diff, diff) / v
    logits = np.where(weights > 0, logits, -np.inf)
    top = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - top)
    z = e.sum(axis=-1, keepdims=True)
    return diff, e / z, (top + np.log(z))[..., 0]


def log_density(x, s, gmm: GMM, vp: VPProcess) -> np.ndarray:
    d = gmm.dim
    x = _as_points(x, d)
    means, v = _marginal(gmm, s, vp)
    _, _, lse = _responsibilities(x, means, v, gmm.weights)
    return lse - 0.5 * d * math.log(2.0 * math.pi * v)


def gmm_marginal_score(x, s, gmm: GMM, vp: VPProcess) -> np.ndarray:
    """Gradient of ``log p(x, s)``; the result has the shape of ``x`` (as points)."""
    x = _as_points(x, gmm.dim)
    means, v = _marginal(gmm, s, vp)
    diff, r, _ = _responsibilities(x, means, v, gmm.weights)
    return -np.einsum("...j,...jd->...d", r, diff) / v


def log_density_hessian(x, s, gmm: GMM, vp: VPProcess) -> np.ndarray:
    """Hessian of ``log p`` at ``x``: ``-I/v + Cov_r[(x - m_j)/v]`` over responsibilities."""
    x = _as_points(x, gmm.dim)
    means, v = _marginal(gmm, s, vp)
    diff, r, _ = _responsibilities(x, means, v, gmm.weights)
    g = -diff / v
    mean_g = np.einsum("...j,...jd->...d", r, g)
    second = np.einsum("...j,...jd,...je->...de", r, g, g)
    eye = np.eye(gmm.dim)
    return -eye / v + second - mean_g[..., :, None] * mean_g[..., None, :]


def potential(x, s, gmm: GMM, vp: VPProcess, include_drift: bool = True) -> np.ndarray:
    """``u = -g^2 log p + Phi`` with ``Phi(0, s) = 0``.

    ``include_drift=False`` drops ``Phi``, i.e. the landscape seen in the frame
    that co-moves with the contracting means.
    """
    x = _as_points(x, gmm.dim)
    u = -vp.beta(s) * log_density(x, s, gmm, vp)
    if include_drift:
        u = u - 0.25 * vp.beta(s) * np.einsum("...d,...d->...", x, x)
    return u


def potential_gradient(x, s, gmm: GMM, vp: VPProcess, include_drift: bool = True) -> np.ndarray:
    x = _as_points(x, gmm.dim)
    grad = -vp.beta(s) * gmm_marginal_score(x, s, gmm, vp)
    if include_drift:
        grad = grad + vp.drift(x, s)
    return grad


def reverse_step(x, s, ds, gmm: GMM, vp: VPProcess, noise) -> np.ndarray:
    """One Euler-Maruyama step from ``s`` to ``s - ds``: ``x - grad u ds + g sqrt(ds) noise``."""
    if ds <= 0:
        raise DynamicsError("ds must be > 0")
    x = _as_points(x, gmm.dim)
    noise = np.asarray(noise, dtype=np.float64).reshape(x.shape)
    return x - potential_gradient(x, s, gmm, vp) * ds + float(vp.g(s)) * math.sqrt(ds) * noise


def origin_curvature(gmm: GMM, s, vp: VPProcess) -> float:
    """Second derivative at the origin of ``-g^2 log p`` for a 1-D mixture."""
    if gmm.dim != 1:
        raise DynamicsError("origin curvature is defined for 1-D mixtures")
    return float(-vp.beta(s) * log_density_hessian(np.zeros(1), s, gmm, vp)[0, 0])


def detect_bifurcation(gmm: GMM, vp: VPProcess, s_grid) -> float:
    """First grid time, scanning from large ``s`` down, where the origin stops being a minimum.

    The curvature is taken in the co-moving frame, where the drift term is
    absent; there the origin is unstable exactly when ``abar mu^2 > v``.
    """
    s_grid = np.sort(np.asarray(s_grid, dtype=np.float64))[::-1]
    stable_seen = False
    for s in s_grid:
        c = origin_curvature(gmm, s, vp)
        if c >= 0:
            stable_seen = True
        elif stable_seen:
            return float(s)
    raise DynamicsError("no bifurcation in range")


def critical_alpha_bar(mu: float, sigma0: float) -> float:
    """``abar`` at which ``abar mu^2 = (1 - abar) + abar sigma0^2``."""
    denom = mu * mu + 1.0 - sigma0 * sigma0
    if denom <= 1.0:
        raise DynamicsError("modes never separate")
    return 1.0 / denom


def critical_time(mu: float, sigma0: float, vp: VPProcess) -> float:
    """Closed-form bifurcation time of a symmetric 1-D mixture."""
    ab = critical_alpha_bar(mu, sigma0)
    # abar(s) = exp(-(b0 s + (b1 - b0) s^2 / 2)): solve the quadratic for s.
    a = 0.5 * (vp.beta_max - vp.beta_min)
    b = vp.beta_min
    c = math.log(ab)
    return (-b + math.sqrt(b * b - 4.0 * a * c)) / (2.0 * a)


@dataclass
class TrajectoryBundle:
    paths: np.ndarray  # (n_paths, n_steps + 1, d)
    s_grid: np.ndarray  # (n_steps + 1,), decreasing
    seeds: np.ndarray  # per-path substream indices
    labels: np.ndarray  # nearest data mode at the final step


def time_grid(n_steps: int, s_start: float = 1.0, s_end: float = 1e-3) -> np.ndarray:
    return np.linspace(s_start, s_end, n_steps + 1)


def ensemble_run(
    gmm: GMM,
    vp: VPProcess,
    n_paths: int = 100,
    seed: int = 0,
    n_steps: int = 1000,
    s_end: float = 1e-3,
) -> tuple[TrajectoryBundle, np.ndarray]:
    """Integrate reverse paths from ``x ~ N(0, I)`` at ``s = 1``; returns the bundle and mode fractions."""
    if n_paths < 1:
        raise DynamicsError("n_paths must be >= 1")
    d = gmm.dim
    s_grid = time_grid(n_steps, 1.0, s_end)
    streams = [rng_stream(seed, "path", i) for i in range(n_paths)]
    draws = np.stack([st.normal((n_steps + 1, d)) for st in streams])
    x = draws[:, 0, :]
    paths = np.empty((n_paths, n_steps + 1, d))
    paths[:, 0] = x
    for i in range(n_steps):
        s, ds = s_grid[i], s_grid[i] - s_grid[i + 1]
        x = reverse_step(x, s, ds, gmm, vp, draws[:, i + 1, :])
        paths[:, i + 1] = x
    labels = nearest_mode(x, gmm)
    fractions = np.bincount(labels, minlength=len(gmm.weights)) / n_paths
    return TrajectoryBundle(paths, s_grid, np.arange(n_paths), labels), fractions


def nearest_mode(x, gmm: GMM) -> np.ndarray:
    x = _as_points(x, gmm.dim)
    d2 = ((x[:, None, :] - gmm.means[None]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


def local_minima(values: np.ndarray) -> np.ndarray:
    """Indices of strict interior local minima of a 1-D sequence."""
    v = np.asarray(values)
    inner = (v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])
    return np.flatnonzero(inner) + 1


def potential_slice(
    x_a,
    x_b,
    alpha_grid,
    s_grid,
    gmm: GMM,
    vp: VPProcess,
    include_drift: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """``u(cos(a) x_a(s) + sin(a) x_b(s), s)`` on the ``(alpha, s)`` grid, plus minima counts per ``s``.

    ``x_a`` and ``x_b`` are endpoint paths sampled on ``s_grid``. Returns
    ``(u, counts)`` with ``u`` of shape ``(len(alpha_grid), len(s_grid))``.
    """
    d = gmm.dim
    xa = _as_points(x_a, d).reshape(len(s_grid), d)
    xb = _as_points(x_b, d).reshape(len(s_grid), d)
    alpha = np.asarray(alpha_grid, dtype=np.float64)
    ca, sa = np.cos(alpha), np.sin(alpha)
    u = np.empty((len(alpha), len(s_grid)))
    for j, s in enumerate(s_grid):
        pts = ca[:, None] * xa[j] + sa[:, None] * xb[j]
        u[:, j] = potential(pts, s, gmm, vp, include_drift)
    counts = np.array([len(local_minima(u[:, j])) for j in range(len(s_grid))])
    return u, counts


DEFAULT_ALPHA_RANGE = (-0.2 * math.pi, 1.2 * math.pi)


def project_trajectories(bundle: TrajectoryBundle, basis=None, center=None) -> np.ndarray:
    """Map every path point onto a 2-D principal subspace of the final states."""
    d = bundle.paths.shape[-1]
    if d < 2:
        raise DynamicsError("need dimension >= 2 to project onto two components")
    if basis is None:
        basis, center = pca_basis(bundle.paths[:, -1, :], 2)
    return (bundle.paths - center) @ basis

"""Conditioning clouds on analytic surfaces and the component count of occupancy grids."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Surface:
    """Unit-radius analytic surface centred at the origin: ``sphere`` (d=3) or ``circle`` (d=2)."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("sphere", "circle"):
            raise GeometryError(f"unknown surface {self.kind!r}")

    @property
    def dim(self) -> int:
        return 3 if self.kind == "sphere" else 2

    @property
    def area(self) -> float:
        # The circle's perimeter stands in for area in two dimensions.
        return 4.0 * math.pi if self.kind == "sphere" else 2.0 * math.pi

    @classmethod
    def for_dim(cls, d: int) -> "Surface":
        if d == 3:
            return cls("sphere")
        if d == 2:
            return cls("circle")
        raise GeometryError(f"no analytic surface for d={d}")


UNIT_SPHERE = Surface("sphere")
UNIT_CIRCLE = Surface("circle")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    surface: Surface | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] not in (2, 3):
            raise GeometryError(f"points must have shape (N, 2|3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise GeometryError("non-finite point")
        if self.surface is not None:
            if self.surface.dim != p.shape[1]:
                raise GeometryError(f"{self.surface.kind} needs d={self.surface.dim}, got {p.shape[1]}")
            err = np.abs(np.linalg.norm(p, axis=1) - 1.0)
            if err.size and err.max() > 1e-9:
                raise GeometryError(f"point off the unit {self.surface.kind} by {err.max():.3g}")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def golden_angle_sample(n: int, d: int = 3) -> PointCloud:
    """Deterministic near-uniform points on the unit sphere (golden angle) or circle (equal spacing)."""
    if n < 1:
        raise GeometryError("need at least one point")
    i = np.arange(n, dtype=np.float64)
    if d == 3:
        y = 1.0 - 2.0 * (i + 0.5) / n
        r = np.sqrt(1.0 - y * y)
        theta = GOLDEN_ANGLE * i
        pts = np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)
    elif d == 2:
        theta = 2.0 * np.pi * i / n
        pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    else:
        raise GeometryError(f"d must be 2 or 3, got {d}")
    return PointCloud(_unit_rows(pts), Surface.for_dim(d))


def _unit_rows(p: np.ndarray) -> np.ndarray:
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def rotate_circle(cloud: PointCloud, angle: float) -> PointCloud:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return PointCloud(_unit_rows(cloud.points @ rot.T), cloud.surface)


def jitter_renormalize(cloud: PointCloud, sigma: float, rng) -> PointCloud:
    """Add isotropic Gaussian noise to every point and push it back onto the unit surface.

    ``rng`` is anything with a ``normal(shape)`` method (see ``meltlab.lab.rng``).
    """
    if sigma < 0:
        raise GeometryError(f"sigma must be >= 0, got {sigma}")
    p = cloud.points
    if sigma == 0:
        return cloud
    out = p + sigma * rng.normal(p.shape)
    norms = np.linalg.norm(out, axis=1)
    for i in np.flatnonzero(norms < 1e-12):
        while np.linalg.norm(out[i]) < 1e-12:
            out[i] = p[i] + sigma * rng.normal(p.shape[1])
    surface = cloud.surface or Surface.for_dim(cloud.dim)
    return PointCloud(_unit_rows(out), surface)


def slerp_path(a: PointCloud, b: PointCloud, rho: float) -> PointCloud:
    """Per-point geodesic interpolation between paired unit vectors at fraction ``rho``."""
    if len(a) != len(b) or a.dim != b.dim:
        raise GeometryError("clouds must have matching size and dimension")
    if not 0.0 <= rho <= 1.0:
        raise GeometryError(f"rho must be in [0, 1], got {rho}")
    pa, pb = a.points, b.points
    for name, p in (("a", pa), ("b", pb)):
        if np.abs(np.linalg.norm(p, axis=1) - 1.0).max() > 1e-9:
            raise GeometryError(f"cloud {name} is not unit-norm")
    surface = a.surface or Surface.for_dim(a.dim)
    if rho == 0.0:
        return PointCloud(pa, surface)
    if rho == 1.0:
        return PointCloud(pb, surface)
    omega = np.arccos(np.clip(np.einsum("ij,ij->i", pa, pb), -1.0, 1.0))
    if np.any(omega >= math.pi - 1e-6):
        i = int(np.argmax(omega))
        raise GeometryError(f"antipodal pair at index {i}: geodesic undefined")
    out = np.empty_like(pa)
    near = omega < 1e-6
    if near.any():
        lerp = (1.0 - rho) * pa[near] + rho * pb[near]
        out[near] = _unit_rows(lerp)
    far = ~near
    w = omega[far]
    sw = np.sin(w)
    out[far] = (np.sin((1.0 - rho) * w) / sw)[:, None] * pa[far] + (np.sin(rho * w) / sw)[:, None] * pb[far]
    return PointCloud(out, surface)


def project_to_surface(points, surface: Surface) -> PointCloud:
    """Nearest point on the unit surface, i.e. radial normalisation."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.shape[1] != surface.dim:
        raise GeometryError(f"{surface.kind} needs d={surface.dim}, got {p.shape[1]}")
    norms = np.linalg.norm(p, axis=1)
    if np.any(norms < 1e-12):
        raise GeometryError("cannot project the origin: every surface point is equally near")
    return PointCloud(p / norms[:, None], surface)


def areal_density(n: int, surface: Surface) -> float:
    if surface.area <= 0:
        raise GeometryError("zero-area surface")
    return n / surface.area


@dataclass(frozen=True)
class OccupancyField:
    grid: np.ndarray
    threshold: float = 0.0
    resolution: tuple[int, ...] = ()

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim not in (2, 3):
            raise GeometryError(f"occupancy grid must be 2-D or 3-D, got shape {g.shape}")
        if not np.all((g == 0) | (g == 1)):
            raise GeometryError("occupancy entries must be 0 or 1")
        g = g.astype(np.uint8)
        g.flags.writeable = False
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "resolution", g.shape)

    @classmethod
    def from_values(cls, values, threshold: float = 0.0) -> "OccupancyField":
        v = np.asarray(values, dtype=np.float64)
        return cls((v > threshold).astype(np.uint8), threshold)


def _offsets(ndim: int) -> list[tuple[int, ...]]:
    out = []
    for axis in range(ndim):
        for step in (-1, 1):
            off = [0] * ndim
            off[axis] = step
            out.append(tuple(off))
    return out


def count_components(field: OccupancyField) -> int:
    """Number of face-connected occupied regions (4-connected in 2-D, 6-connected in 3-D)."""
    g = field.grid
    shape = g.shape
    seen = np.zeros(shape, dtype=bool)
    offsets = _offsets(g.ndim)
    count = 0
    for start in zip(*np.nonzero(g)):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        queue = deque([start])
        while queue:
            cell = queue.popleft()
            for off in offsets:
                nb = tuple(c + o for c, o in zip(cell, off))
                if all(0 <= c < s for c, s in zip(nb, shape)) and g[nb] and not seen[nb]:
                    seen[nb] = True
                    queue.append(nb)
    return count


def components_of(values, threshold: float = 0.0) -> int:
    return count_components(OccupancyField.from_values(values, threshold))


def write_points_csv(path, cloud: PointCloud, comment: str = "") -> None:
    """One point per row under an ``x,y[,z]`` header; values use shortest round-trip decimals.

    A nonempty ``comment`` is written first as a ``#`` line.
    """
    header = ["x", "y", "z"][: cloud.dim]
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(comment if comment.startswith("#") else f"# {comment}")
            fh.write("\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in cloud.points:
            w.writerow([repr(float(v)) for v in row])


def read_points_csv(path, surface: Surface | None = None) -> PointCloud:
    with open(Path(path), newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0] not in (["x", "y"], ["x", "y", "z"]):
        raise GeometryError(f"{path}: expected header x,y[,z]")
    pts = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    return PointCloud(pts.reshape(-1, len(rows[0])), surface)

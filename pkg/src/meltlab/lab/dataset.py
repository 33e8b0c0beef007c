"""Toy training data: filled disks as +-1 occupancy fields, conditioned on points of their boundary circle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiskDataset:
    field_size: int = 32
    extent: float = 1.25
    radius_min: float = 0.45
    radius_max: float = 1.1
    center_max: float = 0.12
    points_min: int = 6
    points_max: int = 24

    def coords(self) -> np.ndarray:
        """Cell-centre coordinates along one axis of the ``[-extent, extent]`` square."""
        n = self.field_size
        return -self.extent + (np.arange(n) + 0.5) * (2.0 * self.extent / n)

    def disk_field(self, center, radius: float) -> np.ndarray:
        """+1 inside the disk, -1 outside; rows index y and columns index x."""
        c = self.coords()
        yy, xx = np.meshgrid(c, c, indexing="ij")
        inside = (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius * radius
        return np.where(inside, 1.0, -1.0)

    def boundary_cloud(self, center, radius: float, n: int, rng) -> np.ndarray:
        theta = 2.0 * np.pi * rng.uniform(n)
        return np.asarray(center) + radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)

    def batch(self, size: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """Fields ``(B, S, S)`` and clouds ``(B, points_max, 2)``.

        Clouds with fewer points are padded by repeating their own points, which
        leaves a max-pooled encoding unchanged.
        """
        fields = np.empty((size, self.field_size, self.field_size))
        clouds = np.empty((size, self.points_max, 2))
        for b in range(size):
            u = rng.uniform(4)
            radius = self.radius_min + (self.radius_max - self.radius_min) * u[0]
            center = self.center_max * (2.0 * u[1:3] - 1.0)
            n = self.points_min + int(u[3] * (self.points_max - self.points_min + 1))
            fields[b] = self.disk_field(center, radius)
            pts = self.boundary_cloud(center, radius, n, rng)
            clouds[b] = pts[np.arange(self.points_max) % n]
        return fields, clouds

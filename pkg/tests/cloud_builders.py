"""Synthetic cloud constructions shared across registration tests."""

from __future__ import annotations

import numpy as np

from swarmlio.cloud import PointCloud


def grid_plane(extent, step, fixed_axis, fixed_value, intensity, jitter=0.0, rng=None):
    a = np.arange(extent[0], extent[1] + 1e-9, step)
    b = np.arange(extent[2], extent[3] + 1e-9, step)
    A, B = np.meshgrid(a, b, indexing="ij")
    flat = np.zeros((A.size, 3))
    axes = [i for i in range(3) if i != fixed_axis]
    flat[:, axes[0]] = A.ravel()
    flat[:, axes[1]] = B.ravel()
    flat[:, fixed_axis] = fixed_value
    if jitter and rng is not None:
        flat = flat + rng.normal(scale=jitter, size=flat.shape)
    return PointCloud(flat, np.full(len(flat), float(intensity)))


def walls_and_floor(rng=None, step=0.3) -> PointCloud:
    """Two vertical walls plus a floor, ~2k points, distinct intensities."""
    floor = grid_plane((0, 8, 0, 8), step, 2, 0.0, 50.0, 0.005, rng)
    wall_a = grid_plane((0, 8, 0.2, 3.2), step * 0.8, 0, 0.0, 200.0, 0.005, rng)
    wall_b = grid_plane((0, 8, 0.2, 3.2), step * 0.8, 1, 8.0, 120.0, 0.005, rng)
    return PointCloud.concatenate([floor, wall_a, wall_b])


def random_blob(rng, n=200, scale=3.0, intensity_range=(0.0, 255.0)) -> PointCloud:
    return PointCloud(
        rng.uniform(-scale, scale, size=(n, 3)),
        rng.uniform(*intensity_range, size=n),
    )

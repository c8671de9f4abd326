"""Point cloud container, voxel downsampling, and the ASCII cloud format.

File format: one `x y z intensity` line per point, `#` comments allowed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Point:
    position: np.ndarray
    intensity: float


class PointCloud:
    """Positions (N,3), intensities (N,), optional per-point relative times.

    Relative times live in [0, 1) over the scan sweep and must be
    non-decreasing when present.
    """

    __slots__ = ("positions", "intensities", "times")

    def __init__(self, positions, intensities=None, times=None):
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        if intensities is None:
            intensities = np.zeros(n)
        self.intensities = np.asarray(intensities, dtype=float).reshape(n)
        if times is not None:
            times = np.asarray(times, dtype=float).reshape(n)
            if n > 1 and np.any(np.diff(times) < 0):
                raise ValueError("per-point times must be non-decreasing")
        self.times = times

    def __len__(self) -> int:
        return len(self.positions)

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros(0))

    def point(self, i: int) -> Point:
        return Point(self.positions[i].copy(), float(self.intensities[i]))

    def transformed(self, pose) -> "PointCloud":
        return PointCloud(pose.apply(self.positions), self.intensities.copy(),
                          None if self.times is None else self.times.copy())

    @staticmethod
    def concatenate(clouds: list["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if len(c) > 0]
        if not clouds:
            return PointCloud.empty()
        return PointCloud(
            np.vstack([c.positions for c in clouds]),
            np.concatenate([c.intensities for c in clouds]),
        )


def voxel_downsample(cloud: PointCloud, res: float) -> PointCloud:
    """Centroid per occupied voxel; output ordered by (z, y, x) voxel key."""
    if res <= 0:
        raise ValueError("voxel resolution must be > 0")
    if len(cloud) == 0:
        return PointCloud.empty()
    keys = np.floor(cloud.positions / res).astype(np.int64)
    # lexsort: last key is primary, so order is z, then y, then x
    order = np.lexsort((keys[:, 0], keys[:, 1], keys[:, 2]))
    sk = keys[order]
    boundaries = np.any(np.diff(sk, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(boundaries)[0] + 1])
    counts = np.diff(np.concatenate([starts, [len(sk)]]))
    pos_sorted = cloud.positions[order]
    int_sorted = cloud.intensities[order]
    sums = np.add.reduceat(pos_sorted, starts, axis=0)
    isums = np.add.reduceat(int_sorted, starts)
    return PointCloud(sums / counts[:, None], isums / counts)


def save_cloud(path, cloud: PointCloud, comments: tuple[str, ...] = ()) -> None:
    with open(path, "w") as f:
        for c in comments:
            f.write(f"# {c}\n")
        for p, i in zip(cloud.positions, cloud.intensities):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {i:.3f}\n")


def load_cloud(path, return_comments: bool = False):
    comments = []
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                comments.append(line[1:].strip())
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}: expected 'x y z intensity', got {line!r}")
            rows.append([float(v) for v in parts])
    arr = np.array(rows).reshape(-1, 4)
    cloud = PointCloud(arr[:, :3], arr[:, 3])
    if return_comments:
        return cloud, comments
    return cloud


def scan_relative_times(cloud: PointCloud) -> np.ndarray:
    """Relative firing times recovered from body-frame azimuth (azimuth / 2pi)."""
    az = np.arctan2(cloud.positions[:, 1], cloud.positions[:, 0])
    return np.mod(az, 2 * np.pi) / (2 * np.pi)


def save_scan(path, cloud: PointCloud, t: float) -> None:
    save_cloud(path, cloud, comments=(f"time {t:.9f}",))


def load_scan(path) -> tuple[float, PointCloud]:
    cloud, comments = load_cloud(path, return_comments=True)
    t = None
    for c in comments:
        if c.startswith("time"):
            t = float(c.split()[1])
    if t is None:
        raise ValueError(f"{path}: missing '# time' header")
    times = scan_relative_times(cloud)
    order = np.argsort(times, kind="stable")
    cloud = PointCloud(cloud.positions[order], cloud.intensities[order], times[order])
    return t, cloud

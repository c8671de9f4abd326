"""Global descriptors and loop-closure detection.

A scan is summarized by a polar rings-by-sectors matrix of maximum point
heights; yaw shows up as a circular column shift, so candidate retrieval
runs in two stages: ring-key (per-ring occupancy) nearest neighbors, then
a full column-shift search minimizing column-wise cosine distance.
Surviving candidates are verified geometrically with the registration
module, yielding relative-pose loop factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .factors import between_residual
from .geometry import Pose, rot_z
from .registration import GicpConfig, NeighborIndex, align_gicp


@dataclass(frozen=True)
class ScanContextConfig:
    rings: int = 20
    sectors: int = 60
    max_radius: float = 80.0
    # occupied bins are floored to a small positive height so occupancy is
    # recoverable from the matrix alone (e.g. after wire transfer)
    occupied_floor: float = 1e-3
    candidates: int = 5
    distance_accept: float = 0.3
    exclusion_seconds: float = 30.0
    fitness_accept: float = 0.2  # m^2


@dataclass(frozen=True)
class ScanContext:
    matrix: np.ndarray  # (rings, sectors), max height per bin, 0 = empty

    @property
    def ring_key(self) -> np.ndarray:
        return (self.matrix > 0).mean(axis=1)

    @property
    def sectors(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class LoopCandidate:
    query: tuple[int, int]  # (robot_id, keyframe_id)
    match: tuple[int, int]
    sector_shift: int
    descriptor_distance: float


@dataclass(frozen=True)
class LoopFactorMeasurement:
    """Verified loop closure: relative pose of `match` in the `query` frame."""

    query: tuple[int, int]
    match: tuple[int, int]
    measurement: Pose
    covariance: np.ndarray  # 6x6, tangent order [rotation, translation]
    fitness: float


def describe(cloud: PointCloud, cfg: ScanContextConfig = ScanContextConfig()) -> ScanContext:
    mat = np.zeros((cfg.rings, cfg.sectors))
    if len(cloud) > 0:
        xy = cloud.positions[:, :2]
        radius = np.linalg.norm(xy, axis=1)
        keep = radius < cfg.max_radius
        if np.any(keep):
            radius = radius[keep]
            az = np.mod(np.arctan2(xy[keep, 1], xy[keep, 0]), 2 * np.pi)
            z = cloud.positions[keep, 2]
            ring = np.minimum(
                (radius / (cfg.max_radius / cfg.rings)).astype(int), cfg.rings - 1
            )
            sector = np.minimum(
                (az / (2 * np.pi / cfg.sectors)).astype(int), cfg.sectors - 1
            )
            height = np.maximum(z, cfg.occupied_floor)
            np.maximum.at(mat, (ring, sector), height)
    return ScanContext(mat)


def _column_norms(mat: np.ndarray) -> np.ndarray:
    return np.linalg.norm(mat, axis=0)


def shifted_distance(a: ScanContext, b: ScanContext, shift: int) -> float:
    """Cosine distance between columns of roll(a, shift) and b.

    Averaged over columns where at least one side is non-empty; a column
    empty on exactly one side contributes distance 1.
    """
    am = np.roll(a.matrix, shift, axis=1)
    bm = b.matrix
    na = _column_norms(am)
    nb = _column_norms(bm)
    counted = (na > 0) | (nb > 0)
    if not np.any(counted):
        return 0.0
    both = (na > 0) & (nb > 0)
    sim = np.zeros(am.shape[1])
    sim[both] = np.einsum("ij,ij->j", am, bm)[both] / (na[both] * nb[both])
    return float((1.0 - sim[counted]).mean())


def best_shift(a: ScanContext, b: ScanContext) -> tuple[int, float]:
    """Sector shift of `a` minimizing the column-wise cosine distance to `b`."""
    sectors = a.sectors
    # all circular shifts at once: rolled[s] = roll(a, s)
    idx = (np.arange(sectors)[None, :] - np.arange(sectors)[:, None]) % sectors
    rolled = a.matrix[:, idx]  # (rings, shifts, sectors)
    na = np.linalg.norm(rolled, axis=0)  # (shifts, sectors)
    nb = _column_norms(b.matrix)  # (sectors,)
    dots = np.einsum("isj,ij->sj", rolled, b.matrix)
    both = (na > 0) & (nb > 0)[None, :]
    counted = (na > 0) | (nb > 0)[None, :]
    sim = np.where(both, dots / np.where(both, na * nb[None, :], 1.0), 0.0)
    dist_sum = np.where(counted, 1.0 - sim, 0.0).sum(axis=1)
    counts = counted.sum(axis=1)
    dists = np.where(counts > 0, dist_sum / np.maximum(counts, 1), 0.0)
    s = int(np.argmin(dists))
    return s, float(dists[s])


@dataclass
class DescriptorDatabase:
    """Append-only keyframe descriptor store queried for loop candidates."""

    cfg: ScanContextConfig = field(default_factory=ScanContextConfig)

    def __post_init__(self):
        self._entries: list[tuple[int, int, float, ScanContext]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, robot_id: int, keyframe_id: int, t: float, descriptor: ScanContext):
        self._entries.append((robot_id, keyframe_id, t, descriptor))

    def query(
        self,
        query_id: tuple[int, int],
        q: ScanContext,
        t: float,
        k: int | None = None,
    ) -> list[LoopCandidate]:
        """k nearest by ring key, refined by shift search, sorted ascending.

        Same-robot entries within the temporal exclusion window are skipped,
        as is the query keyframe itself.
        """
        if not self._entries:
            return []
        k = self.cfg.candidates if k is None else k
        eligible = []
        for robot_id, kf_id, et, desc in self._entries:
            if (robot_id, kf_id) == query_id:
                continue
            if robot_id == query_id[0] and abs(t - et) <= self.cfg.exclusion_seconds:
                continue
            eligible.append((robot_id, kf_id, desc))
        if not eligible:
            return []
        keys = np.stack([d.ring_key for _, _, d in eligible])
        dists = np.linalg.norm(keys - q.ring_key, axis=1)
        order = np.argsort(dists, kind="stable")[:k]
        out = []
        for i in order:
            robot_id, kf_id, desc = eligible[i]
            shift, dist = best_shift(q, desc)
            out.append(LoopCandidate(query_id, (robot_id, kf_id), shift, dist))
        out.sort(key=lambda c: (c.descriptor_distance, c.match))
        return out


def covariance_from_fitness(
    fitness: float,
    base_fitness: float = 0.01,
    base_trans: float = 0.01,
    base_rot: float = 0.005,
    clamp: tuple[float, float] = (1e-6, 1.0),
) -> np.ndarray:
    """Diagonal 6x6 covariance scaled linearly from a registration fitness."""
    scale = max(fitness, 0.0) / base_fitness
    st = float(np.clip(base_trans * scale, *clamp))
    sr = float(np.clip(base_rot * scale, *clamp))
    return np.diag([sr**2] * 3 + [st**2] * 3)


def verify(
    query_kf,
    match_kf,
    shift: int,
    gicp_cfg: GicpConfig = GicpConfig(),
    cfg: ScanContextConfig = ScanContextConfig(),
) -> LoopFactorMeasurement | None:
    """Geometric check of a candidate: align query scan onto the match scan.

    The initial guess is a pure yaw of shift * (360/sectors) degrees. The
    aligned transform maps query-frame points into the match frame, so the
    loop measurement X_query^-1 X_match is its inverse.
    """
    if len(query_kf.cloud) == 0 or len(match_kf.cloud) == 0:
        raise ValueError("cannot verify empty keyframe clouds")
    init = Pose(rot_z(shift * 2 * np.pi / cfg.sectors), np.zeros(3))
    result = align_gicp(query_kf.cloud, NeighborIndex(match_kf.cloud, gicp_cfg), init, gicp_cfg)
    if not result.converged or result.fitness > cfg.fitness_accept:
        return None
    return LoopFactorMeasurement(
        query=(query_kf.robot_id, query_kf.keyframe_id),
        match=(match_kf.robot_id, match_kf.keyframe_id),
        measurement=result.transform.inverse(),
        covariance=covariance_from_fitness(result.fitness),
        fitness=result.fitness,
    )


def loop_residual(xa: Pose, xb: Pose, z: Pose) -> np.ndarray:
    """Local coordinates of z^-1 xa^-1 xb; zero when z = between(xa, xb)."""
    return between_residual(xa, xb, z)

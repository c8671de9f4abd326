"""Trajectory evaluation: TUM-format I/O and absolute translation error.

ATE associates samples by nearest timestamp (within 0.05 s), finds the
closed-form rigid alignment (rotation + translation, no scale) minimizing
the squared position errors, and reports translation RMSE statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, Rotation


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        if len(self.times) != len(self.poses):
            raise ValueError("times and poses length mismatch")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


def save_tum(path, traj: Trajectory):
    with open(path, "w") as f:
        for t, p in zip(traj.times, traj.poses):
            qw, qx, qy, qz = p.rotation.q
            x, y, z = p.translation
            f.write(f"{t:.9f} {x:.9f} {y:.9f} {z:.9f} {qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n")


def load_tum(path) -> Trajectory:
    times = []
    poses = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise ValueError(f"{path}: expected 8 columns, got {len(vals)}")
            t, x, y, z, qx, qy, qz, qw = vals
            times.append(t)
            poses.append(Pose(Rotation(np.array([qw, qx, qy, qz])), np.array([x, y, z])))
    return Trajectory(np.array(times), poses)


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.05):
    """Nearest-neighbor timestamp pairs within max_dt; each gt sample used once."""
    pairs = []
    gt_times = gt.times
    for i, t in enumerate(est.times):
        j = int(np.argmin(np.abs(gt_times - t)))
        if abs(gt_times[j] - t) <= max_dt:
            pairs.append((i, j))
    seen = set()
    unique = []
    for i, j in pairs:
        if j not in seen:
            seen.add(j)
            unique.append((i, j))
    return unique


def rigid_alignment(source: np.ndarray, target: np.ndarray) -> Pose:
    """Least-squares rotation+translation mapping source points onto target."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    H = (source - mu_s).T @ (target - mu_t)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = mu_t - R @ mu_s
    return Pose(Rotation.from_matrix(R), t)


def ate(est: Trajectory, gt: Trajectory, max_dt: float = 0.05) -> dict:
    """Aligned translation error: rmse, mean, max, and the alignment used."""
    pairs = associate(est, gt, max_dt)
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 matched pairs, got {len(pairs)}")
    e = est.positions()[[i for i, _ in pairs]]
    g = gt.positions()[[j for _, j in pairs]]
    T = rigid_alignment(e, g)
    aligned = e @ T.rotation.matrix().T + T.translation
    errs = np.linalg.norm(aligned - g, axis=1)
    return {
        "rmse": float(np.sqrt(np.mean(errs**2))),
        "mean": float(errs.mean()),
        "max": float(errs.max()),
        "matches": len(pairs),
        "transform": T,
    }


def endpoint_error(est: Trajectory, gt: Trajectory) -> dict:
    """Start-anchored final-position error: align the first est pose onto the
    first gt pose rigidly, then compare final positions."""
    if len(est.poses) < 2 or len(gt.poses) < 2:
        raise ValueError("need at least 2 samples per trajectory")
    G = gt.poses[0].compose(est.poses[0].inverse())
    final_est = G.compose(est.poses[-1]).translation
    return {
        "final_error": float(np.linalg.norm(final_est - gt.poses[-1].translation)),
        "transform": G,
    }

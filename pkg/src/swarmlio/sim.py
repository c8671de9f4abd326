"""Deterministic synthetic worlds, trajectories, and sensor streams.

Worlds are built from axis-aligned rectangles, vertical cylinders, and
torus rings. Trajectories are clamped cubic splines (so runs start and
end at rest) with analytic velocity, acceleration, and body angular rate;
IMU, LiDAR, and UWB streams derive from them exactly, which keeps
noise-free streams consistent with ground truth. Every generator is a
pure function of (spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .cloud import PointCloud, load_scan, save_scan
from .geometry import Pose, exp_so3
from .imu import ImuNoiseParams, ImuSample, NavState

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class PlanePrimitive:
    """Axis-aligned rectangle: `axis` is the normal direction."""

    axis: int
    center: np.ndarray
    half_extents: tuple[float, float]  # along the two remaining axes, in order
    material_id: int = 0
    intensity: float = 128.0


@dataclass(frozen=True)
class CylinderPrimitive:
    """Vertical cylinder (lateral surface), base at center[2], height up."""

    center: np.ndarray
    radius: float
    height: float
    material_id: int = 0
    intensity: float = 128.0


@dataclass(frozen=True)
class RingPrimitive:
    """Torus with symmetry axis along a coordinate axis."""

    center: np.ndarray
    major_radius: float
    minor_radius: float
    axis: int = 0
    material_id: int = 0
    intensity: float = 128.0


@dataclass(frozen=True)
class WorldSpec:
    # session configs enforce a non-empty primitive list; the bare spec
    # permits an empty world so degenerate scans stay well-defined
    primitives: tuple
    bounds: tuple[float, float, float, float, float, float] = (-50, 50, -50, 50, -5, 20)


@dataclass(frozen=True)
class LidarSpec:
    channels: int = 16
    vfov_deg: tuple[float, float] = (-15.0, 15.0)
    azimuth_step_deg: float = 1.5
    rate_hz: float = 2.0
    scan_period: float = 0.1
    max_range: float = 80.0
    range_sigma: float = 0.02
    intensity_sigma: float = 2.0


@dataclass(frozen=True)
class UwbSpec:
    rate_hz: float = 10.0
    sigma: float = 0.05
    nlos_prob: float = 0.0
    nlos_bias: tuple[float, float] = (0.5, 3.0)

    def __post_init__(self):
        if not 0.0 <= self.nlos_prob <= 1.0:
            raise ValueError("nlos_prob must be in [0, 1]")


@dataclass(frozen=True)
class SensorRig:
    lidar: LidarSpec = field(default_factory=LidarSpec)
    imu: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    imu_rate_hz: float = 100.0
    uwb: UwbSpec = field(default_factory=UwbSpec)


@dataclass(frozen=True)
class TrajectorySpec:
    times: np.ndarray
    positions: np.ndarray  # (N, 3)
    yaws: np.ndarray  # (N,)
    profile: str = "ground"  # or "aerial"

    def __post_init__(self):
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        if self.profile not in ("ground", "aerial"):
            raise ValueError(f"unknown profile {self.profile!r}")


def _chord_clamped_spline(t, values):
    """Cubic spline with end derivatives clamped to the boundary chords.

    A repeated first or last waypoint therefore starts or ends the path at
    rest, and a two-waypoint segment is exactly linear.
    """
    values = np.asarray(values, dtype=float)
    d0 = (values[1] - values[0]) / (t[1] - t[0])
    d1 = (values[-1] - values[-2]) / (t[-1] - t[-2])
    return CubicSpline(t, values, bc_type=((1, d0), (1, d1)))


class Trajectory:
    """Compiled spline trajectory with analytic derivatives."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        t = np.asarray(spec.times, dtype=float)
        self.t0, self.t1 = float(t[0]), float(t[-1])
        pos = np.asarray(spec.positions, float)
        self._pos = _chord_clamped_spline(t, pos)
        yaw = np.unwrap(np.asarray(spec.yaws, float))
        self._yaw = _chord_clamped_spline(t, yaw)
        if spec.profile == "aerial":
            v = self._pos(t, 1)
            speed = np.linalg.norm(v, axis=1)
            pitch = np.where(speed > 1e-6, -np.arcsin(np.clip(v[:, 2] / np.maximum(speed, 1e-9), -1, 1)), 0.0)
            self._pitch = _chord_clamped_spline(t, pitch)
        else:
            self._pitch = None

    def _angles(self, t):
        yaw = float(self._yaw(t))
        pitch = float(self._pitch(t)) if self._pitch is not None else 0.0
        return 0.0, pitch, yaw  # roll, pitch, yaw

    def _angle_rates(self, t):
        dyaw = float(self._yaw(t, 1))
        dpitch = float(self._pitch(t, 1)) if self._pitch is not None else 0.0
        return 0.0, dpitch, dyaw

    def rotation(self, t) -> Rotation:
        roll, pitch, yaw = self._angles(t)
        return (
            exp_so3([0, 0, yaw]).compose(exp_so3([0, pitch, 0])).compose(exp_so3([roll, 0, 0]))
        )

    def sample_pose(self, t: float) -> dict:
        """Pose, velocity, acceleration, and body angular rate at time t."""
        if not (self.t0 - 1e-9 <= t <= self.t1 + 1e-9):
            raise ValueError(f"t={t} outside trajectory span [{self.t0}, {self.t1}]")
        roll, pitch, yaw = self._angles(t)
        droll, dpitch, dyaw = self._angle_rates(t)
        sr, cr = np.sin(roll), np.cos(roll)
        sp, cp = np.sin(pitch), np.cos(pitch)
        omega = np.array(
            [
                droll - dyaw * sp,
                dpitch * cr + dyaw * cp * sr,
                dyaw * cp * cr - dpitch * sr,
            ]
        )
        return {
            "pose": Pose(self.rotation(t), self._pos(t)),
            "velocity": self._pos(t, 1),
            "acceleration": self._pos(t, 2),
            "angular_rate": omega,
        }

    def nav_state(self, t) -> NavState:
        s = self.sample_pose(t)
        return NavState(s["pose"], s["velocity"])


def sample_pose(traj: Trajectory, t: float) -> dict:
    return traj.sample_pose(t)


def synth_imu(traj: Trajectory, rig: SensorRig, seed) -> list[ImuSample]:
    """IMU stream over the full trajectory span: truth + bias walk + noise."""
    params = rig.imu
    rate = rig.imu_rate_hz
    n = int(np.floor((traj.t1 - traj.t0) * rate + 1e-9))
    times = traj.t0 + np.arange(n + 1) / rate
    rng = np.random.default_rng(seed)
    dt = 1.0 / rate
    bg = np.zeros(3)
    ba = np.zeros(3)
    out = []
    for t in times:
        s = traj.sample_pose(t)
        f = s["pose"].rotation.matrix().T @ (s["acceleration"] - params.gravity)
        gyro = s["angular_rate"] + bg + rng.normal(size=3) * params.gyro_noise_density * np.sqrt(rate)
        accel = f + ba + rng.normal(size=3) * params.accel_noise_density * np.sqrt(rate)
        out.append(ImuSample(float(t), gyro, accel))
        bg = bg + rng.normal(size=3) * params.gyro_bias_walk * np.sqrt(dt)
        ba = ba + rng.normal(size=3) * params.accel_bias_walk * np.sqrt(dt)
    return out


# --------------------------------------------------------------------------
# ray casting
# --------------------------------------------------------------------------


def _ray_plane(origins, dirs, prim: PlanePrimitive):
    k = prim.axis
    a1, a2 = [i for i in range(3) if i != k]
    dk = dirs[:, k]
    ok = np.abs(dk) > 1e-12
    t = np.where(ok, (prim.center[k] - origins[:, k]) / np.where(ok, dk, 1.0), np.inf)
    t = np.where(t > 1e-6, t, np.inf)
    hit = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    inside = (
        (np.abs(hit[:, a1] - prim.center[a1]) <= prim.half_extents[0])
        & (np.abs(hit[:, a2] - prim.center[a2]) <= prim.half_extents[1])
    )
    t = np.where(inside, t, np.inf)
    normal = np.zeros(3)
    normal[k] = 1.0
    normals = np.tile(normal, (len(t), 1))
    return t, normals


def _ray_cylinder(origins, dirs, prim: CylinderPrimitive):
    o = origins[:, :2] - prim.center[:2]
    d = dirs[:, :2]
    a = np.einsum("ni,ni->n", d, d)
    b = 2.0 * np.einsum("ni,ni->n", o, d)
    c = np.einsum("ni,ni->n", o, o) - prim.radius**2
    disc = b * b - 4 * a * c
    t = np.full(len(origins), np.inf)
    ok = (disc >= 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    for sign in (-1.0, 1.0):
        ti = np.where(ok, (-b + sign * sq) / (2 * np.where(ok, a, 1.0)), np.inf)
        z = origins[:, 2] + ti * dirs[:, 2]
        good = ok & (ti > 1e-6) & (z >= prim.center[2]) & (z <= prim.center[2] + prim.height)
        t = np.where(good & (ti < t), ti, t)
    with np.errstate(invalid="ignore"):
        hit = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    radial = hit[:, :2] - prim.center[:2]
    norm = np.linalg.norm(radial, axis=1, keepdims=True)
    normals = np.zeros((len(t), 3))
    with np.errstate(invalid="ignore"):
        normals[:, :2] = np.where(norm > 1e-12, radial / norm, 0.0)
    return t, normals


def _torus_sdf(p, prim: RingPrimitive):
    rel = p - prim.center
    ax = prim.axis
    perp = [i for i in range(3) if i != ax]
    q1 = np.linalg.norm(rel[:, perp], axis=1) - prim.major_radius
    q2 = rel[:, ax]
    return np.sqrt(q1 * q1 + q2 * q2) - prim.minor_radius


def _ray_torus(origins, dirs, prim: RingPrimitive, max_range):
    n = len(origins)
    t = np.full(n, 1e-4)
    done = np.zeros(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    # only rays whose closest approach touches the bounding sphere can hit
    rel = prim.center - origins
    proj = np.einsum("ni,ni->n", rel, dirs)
    closest = np.linalg.norm(rel - proj[:, None] * dirs, axis=1)
    bound = prim.major_radius + prim.minor_radius + 1e-3
    done |= (closest > bound) | (proj < -bound)
    for _ in range(128):
        active = ~done
        if not np.any(active):
            break
        p = origins[active] + t[active, None] * dirs[active]
        s = _torus_sdf(p, prim)
        newly_hit = s < 1e-5
        idx = np.nonzero(active)[0]
        hit[idx[newly_hit]] = True
        done[idx[newly_hit]] = True
        t[idx[~newly_hit]] += s[~newly_hit] * 0.95
        over = t > max_range
        done |= over
    t_out = np.where(hit, t, np.inf)
    p = origins + np.where(hit, t, 0.0)[:, None] * dirs
    rel = p - prim.center
    ax = prim.axis
    perp = [i for i in range(3) if i != ax]
    ring_pt = np.zeros_like(p)
    pn = np.linalg.norm(rel[:, perp], axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        for i, axis_idx in enumerate(perp):
            ring_pt[:, axis_idx] = np.where(
                pn[:, 0] > 1e-12, rel[:, axis_idx] / pn[:, 0] * prim.major_radius, 0.0
            )
    normals = p - (prim.center + ring_pt)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        normals = np.where(norm > 1e-12, normals / norm, 0.0)
    return t_out, normals


def cast_rays(world: WorldSpec, origins, dirs, max_range):
    """Closest hit over all primitives: (ranges, normals, intensities_base)."""
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_normal = np.zeros((n, 3))
    best_intensity = np.zeros(n)
    for prim in world.primitives:
        if isinstance(prim, PlanePrimitive):
            t, normals = _ray_plane(origins, dirs, prim)
        elif isinstance(prim, CylinderPrimitive):
            t, normals = _ray_cylinder(origins, dirs, prim)
        elif isinstance(prim, RingPrimitive):
            t, normals = _ray_torus(origins, dirs, prim, max_range)
        else:
            raise TypeError(f"unknown primitive {type(prim).__name__}")
        closer = (t < best_t) & (t <= max_range)
        best_t = np.where(closer, t, best_t)
        best_normal[closer] = normals[closer]
        best_intensity[closer] = prim.intensity
    return best_t, best_normal, best_intensity


def synth_scan(
    world: WorldSpec,
    pose: Pose,
    rig: SensorRig,
    seed,
    pose_at=None,
) -> PointCloud:
    """One sweep of the spinning LiDAR; points in the sensor body frame.

    pose_at, when given, maps relative sweep time in [0,1) to the body pose
    at that instant (motion distortion); `pose` is used for every column
    otherwise. Points are emitted azimuth-major so per-point times are
    non-decreasing; no-hit rays are omitted.
    """
    lidar = rig.lidar
    rng = np.random.default_rng(seed)
    elevations = np.deg2rad(np.linspace(lidar.vfov_deg[0], lidar.vfov_deg[1], lidar.channels))
    azimuths = np.arange(0.0, 2 * np.pi - 1e-12, np.deg2rad(lidar.azimuth_step_deg))
    n_cols = len(azimuths)
    n_ch = len(elevations)
    rel_times = azimuths / (2 * np.pi)

    ce, se = np.cos(elevations), np.sin(elevations)
    ca, sa = np.cos(azimuths), np.sin(azimuths)
    # body-frame directions, column-major: (cols, channels, 3)
    body_dirs = np.empty((n_cols, n_ch, 3))
    body_dirs[:, :, 0] = ca[:, None] * ce[None, :]
    body_dirs[:, :, 1] = sa[:, None] * ce[None, :]
    body_dirs[:, :, 2] = se[None, :]

    if pose_at is None:
        col_poses = [pose] * n_cols
    else:
        col_poses = [pose_at(s) for s in rel_times]
    R = np.stack([p.rotation.matrix() for p in col_poses])  # (cols, 3, 3)
    origins = np.stack([p.translation for p in col_poses])  # (cols, 3)

    world_dirs = np.einsum("cij,ckj->cki", R, body_dirs).reshape(-1, 3)
    ray_origins = np.repeat(origins, n_ch, axis=0)
    ranges, normals, base_int = cast_rays(world, ray_origins, world_dirs, lidar.max_range)

    hit = np.isfinite(ranges)
    noisy = np.where(hit, ranges, 0.0) + rng.normal(size=len(ranges)) * lidar.range_sigma
    cosine = np.abs(np.einsum("ni,ni->n", world_dirs, normals))
    intensity = np.clip(
        base_int * cosine + rng.normal(size=len(ranges)) * lidar.intensity_sigma, 0.0, 255.0
    )

    # back to each column's body frame
    col_idx = np.repeat(np.arange(n_cols), n_ch)
    body_pts = body_dirs.reshape(-1, 3) * noisy[:, None]
    times = np.repeat(rel_times, n_ch)
    return PointCloud(body_pts[hit], intensity[hit], times[hit])


def synth_uwb(traj_a: Trajectory, traj_b: Trajectory, rig: SensorRig, seed):
    """Seeded range stream over the overlapping span: [(t, z), ...]."""
    uwb = rig.uwb
    t0 = max(traj_a.t0, traj_b.t0)
    t1 = min(traj_a.t1, traj_b.t1)
    if t1 <= t0:
        raise ValueError("trajectories do not overlap in time")
    rng = np.random.default_rng(seed)
    n = int(np.floor((t1 - t0) * uwb.rate_hz + 1e-9))
    out = []
    for k in range(n + 1):
        t = t0 + k / uwb.rate_hz
        pa = traj_a.sample_pose(t)["pose"].translation
        pb = traj_b.sample_pose(t)["pose"].translation
        z = float(np.linalg.norm(pa - pb) + rng.normal() * uwb.sigma)
        if uwb.nlos_prob > 0.0 and rng.random() < uwb.nlos_prob:
            z += float(rng.uniform(*uwb.nlos_bias))
        out.append((t, z))
    return out


# --------------------------------------------------------------------------
# dataset persistence
# --------------------------------------------------------------------------


def scan_times(traj: Trajectory, lidar: LidarSpec) -> np.ndarray:
    """Sweep end times: first full sweep after span start, stepped at rate."""
    start = traj.t0 + lidar.scan_period
    n = int(np.floor((traj.t1 - start) * lidar.rate_hz))
    return start + np.arange(n + 1) / lidar.rate_hz


def generate_robot_dataset(out_dir, world: WorldSpec, traj: Trajectory,
                           rig: SensorRig, seed: int, robot_idx: int):
    """Write imu.csv, scans/, and gt.tum for one robot (uwb handled per pair)."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)

    samples = synth_imu(traj, rig, np.random.SeedSequence((seed, robot_idx, 0)))
    with open(out / "imu.csv", "w") as f:
        f.write("t,gx,gy,gz,ax,ay,az\n")
        for s in samples:
            g, a = s.gyro, s.accel
            f.write(
                f"{s.t:.9f},{g[0]:.9f},{g[1]:.9f},{g[2]:.9f},{a[0]:.9f},{a[1]:.9f},{a[2]:.9f}\n"
            )

    times = scan_times(traj, rig.lidar)
    with open(out / "gt.tum", "w") as f:
        for i, t in enumerate(times):
            s = traj.sample_pose(t)
            sweep_start = t - rig.lidar.scan_period

            def pose_at(rel, _start=sweep_start):
                return traj.sample_pose(_start + rel * rig.lidar.scan_period)["pose"]

            cloud = synth_scan(
                world, s["pose"], rig, np.random.SeedSequence((seed, robot_idx, 1, i)),
                pose_at=pose_at,
            )
            save_scan(out / "scans" / f"{i:06d}.txt", cloud, t)
            p = s["pose"]
            qw, qx, qy, qz = p.rotation.q
            x, y, z = p.translation
            f.write(
                f"{t:.9f} {x:.9f} {y:.9f} {z:.9f} {qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n"
            )


def write_uwb_csv(out_dir, measurements: dict[int, list[tuple[int, float, float]]]):
    """Per-robot uwb.csv rows: t,peer,z (reporting robot owns the file)."""
    for robot_idx, rows in measurements.items():
        path = Path(out_dir) / f"robot{robot_idx}" / "uwb.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            f.write("t,peer,z\n")
            for peer, t, z in rows:
                f.write(f"{t:.9f},{peer},{z:.9f}\n")


def load_robot_dataset(robot_dir):
    """Read one robot directory back: (imu samples, [(t, scan)], gt rows, uwb rows)."""
    robot_dir = Path(robot_dir)
    imu = []
    with open(robot_dir / "imu.csv") as f:
        next(f)
        for line in f:
            vals = [float(v) for v in line.strip().split(",")]
            imu.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    scans = []
    for path in sorted((robot_dir / "scans").glob("*.txt")):
        scans.append(load_scan(path))
    gt = []
    with open(robot_dir / "gt.tum") as f:
        for line in f:
            vals = [float(v) for v in line.split()]
            gt.append(vals)
    uwb = []
    uwb_path = robot_dir / "uwb.csv"
    if uwb_path.exists():
        with open(uwb_path) as f:
            next(f)
            for line in f:
                t, peer, z = line.strip().split(",")
                uwb.append((int(peer), float(t), float(z)))
    return imu, scans, gt, uwb

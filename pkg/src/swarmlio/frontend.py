"""Per-robot LiDAR-inertial odometry front-end.

Pipeline per scan: predict motion by IMU preintegration, rotation-deskew
the sweep, align against the local map (union of window keyframe clouds,
voxel-downsampled and re-indexed on every window change), gate new
keyframes on 1 m / 0.2 rad motion, and smooth a 10-keyframe sliding
window of (pose, velocity, bias) states. Old states are marginalized into
a dense Gaussian prior by Schur complement.

Emitted keyframe poses form an exact relative-odometry chain: composing
all emitted odometry measurements reproduces the latest keyframe pose.
Window smoothing refines the internal states used for mapping and
prediction without rewriting that chain.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, voxel_downsample
from .factors import (
    BetweenFactor,
    BiasWalkFactor,
    ImuFactor,
    LinearizedPriorFactor,
    PriorFactor,
    VectorPriorFactor,
    diag_sqrt_info,
    marginalize,
    solve_lm,
    sqrt_info_from_cov,
)
from .geometry import Pose, Rotation, between, exp_so3, log_so3
from .imu import (
    ImuBias,
    ImuNoiseParams,
    ImuSample,
    NavState,
    predict,
    preintegrate,
)
from .place_recognition import (
    ScanContext,
    ScanContextConfig,
    covariance_from_fitness,
    describe,
)
from .registration import GicpConfig, NeighborIndex, align_gicp


@dataclass(frozen=True)
class Keyframe:
    robot_id: int
    keyframe_id: int
    t: float
    pose: Pose  # odometry frame, exact relative-odometry chain value
    cloud: PointCloud  # downsampled at map resolution, deskewed body frame
    descriptor: ScanContext


@dataclass(frozen=True)
class OdomFactorMeasurement:
    from_id: int
    to_id: int
    measurement: Pose
    covariance: np.ndarray


@dataclass
class FrontendConfig:
    keyframe_trans_gate: float = 1.0  # m
    keyframe_rot_gate: float = 0.2  # rad
    map_voxel: float = 0.4  # m
    window_size: int = 10
    scan_period: float = 0.1  # sweep duration, s
    gicp: GicpConfig = field(default_factory=GicpConfig)
    descriptor: ScanContextConfig = field(default_factory=ScanContextConfig)
    imu: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    prior_pose_sigma: float = 1e-4
    prior_vel_sigma: float = 0.05
    prior_bias_sigma: float = 0.05
    feedback_prior_sigma: float = 1e-4
    bias_reintegrate_threshold: float = 1e-5
    max_window_iterations: int = 50


def keyframe_gate(delta: Pose, trans_gate: float = 1.0, rot_gate: float = 0.2) -> bool:
    """True when motion exceeds the translation or rotation threshold."""
    return (
        np.linalg.norm(delta.translation) >= trans_gate
        or delta.rotation.angle() >= rot_gate
    )


def deskew(
    scan: PointCloud, rot_increments: list[tuple[float, Rotation]]
) -> tuple[PointCloud, bool]:
    """Rotate each point from its firing time to the sweep end.

    rot_increments are (relative_time, rotation-from-sweep-start) samples;
    rotation is interpolated on the log manifold between them (exact at
    increment boundaries, small-angle advance within a segment). A scan
    without per-point times passes through unchanged with a warning flag.
    """
    if scan.times is None:
        return scan, True
    if len(scan) == 0 or len(rot_increments) == 0:
        return scan, False
    ts = np.array([t for t, _ in rot_increments])
    rots = [r for _, r in rot_increments]
    R_end_T = _interp_rotation(ts, rots, 1.0).matrix().T
    times = np.clip(scan.times, ts[0], ts[-1])
    seg = np.clip(np.searchsorted(ts, times, side="right") - 1, 0, len(ts) - 2)
    out = np.empty_like(scan.positions)
    for j in np.unique(seg):
        sel = seg == j
        span = ts[j + 1] - ts[j]
        step = log_so3(rots[j].inverse().compose(rots[j + 1]))
        w = (times[sel] - ts[j]) / span
        pts = scan.positions[sel]
        # R(s) x ~ R_j (x + (w*step) x x) to first order within the segment
        advance = w[:, None] * step[None, :]
        rotated = pts + np.cross(advance, pts)
        out[sel] = rotated @ rots[j].matrix().T
    return PointCloud(out @ R_end_T.T, scan.intensities.copy()), False


def _interp_rotation(ts: np.ndarray, rots: list[Rotation], t: float) -> Rotation:
    if t <= ts[0]:
        return rots[0]
    if t >= ts[-1]:
        return rots[-1]
    j = int(np.searchsorted(ts, t, side="right"))
    t0, t1 = ts[j - 1], ts[j]
    w = (t - t0) / (t1 - t0)
    step = log_so3(rots[j - 1].inverse().compose(rots[j]))
    return rots[j - 1].compose(exp_so3(w * step))


def rotation_increments_from_gyro(
    samples: list[ImuSample], t_start: float, period: float, gyro_bias: np.ndarray
) -> list[tuple[float, Rotation]]:
    """Integrate gyro samples inside one sweep into relative-time rotations."""
    inside = [s for s in samples if t_start - 1e-9 <= s.t <= t_start + period + 1e-9]
    if len(inside) < 2:
        return [(0.0, Rotation.identity()), (1.0, Rotation.identity())]
    out = [((inside[0].t - t_start) / period, Rotation.identity())]
    R = Rotation.identity()
    for a, b in zip(inside[:-1], inside[1:]):
        dt = b.t - a.t
        w = 0.5 * (np.asarray(a.gyro) + np.asarray(b.gyro)) - gyro_bias
        R = R.compose(exp_so3(w * dt))
        out.append(((b.t - t_start) / period, R))
    return out


@dataclass
class _WindowEntry:
    kf_id: int
    t: float
    imu_samples: list[ImuSample] | None  # samples spanning (previous kf, this kf]
    odom: OdomFactorMeasurement | None


class SlidingWindow:
    """Fixed-lag smoother over keyframe (pose, velocity, bias) states."""

    def __init__(self, cfg: FrontendConfig):
        self.cfg = cfg
        self.entries: list[_WindowEntry] = []
        self.values: dict = {}
        self._priors: list = []  # initial / marginal / feedback priors
        self._chain: list = []  # odometry + imu + bias-walk factors per entry
        self._imu_factors: dict[int, ImuFactor] = {}  # kf_id -> factor ending there

    # -- construction -----------------------------------------------------
    def bootstrap(self, kf_id: int, t: float, state: NavState, bias: ImuBias):
        c = self.cfg
        self.entries = [_WindowEntry(kf_id, t, None, None)]
        self.values = {
            ("x", kf_id): state.pose,
            ("v", kf_id): np.asarray(state.velocity, dtype=float),
            ("b", kf_id): bias.vector(),
        }
        self._priors = [
            PriorFactor(("x", kf_id), state.pose, diag_sqrt_info([c.prior_pose_sigma] * 6)),
            VectorPriorFactor(("v", kf_id), state.velocity, diag_sqrt_info([c.prior_vel_sigma] * 3)),
            VectorPriorFactor(("b", kf_id), bias.vector(), diag_sqrt_info([c.prior_bias_sigma] * 6)),
        ]
        self._chain = []
        self._imu_factors = {}

    def add_keyframe(
        self,
        kf_id: int,
        t: float,
        state: NavState,
        bias: ImuBias,
        odom: OdomFactorMeasurement,
        imu_samples: list[ImuSample] | None,
    ):
        prev = self.entries[-1]
        self.entries.append(_WindowEntry(kf_id, t, imu_samples, odom))
        self.values[("x", kf_id)] = state.pose
        self.values[("v", kf_id)] = np.asarray(state.velocity, dtype=float)
        self.values[("b", kf_id)] = bias.vector()
        self._chain.append(
            BetweenFactor(
                ("x", prev.kf_id), ("x", kf_id), odom.measurement,
                sqrt_info_from_cov(odom.covariance),
            )
        )
        if imu_samples is not None and len(imu_samples) >= 2:
            delta = preintegrate(imu_samples, ImuBias.from_vector(self.values[("b", prev.kf_id)]), self.cfg.imu)
            f = ImuFactor(
                [("x", prev.kf_id), ("v", prev.kf_id), ("x", kf_id), ("v", kf_id), ("b", prev.kf_id)],
                delta,
                self.cfg.imu,
            )
            self._chain.append(f)
            self._imu_factors[kf_id] = f
            self._chain.append(
                BiasWalkFactor(("b", prev.kf_id), ("b", kf_id), t - prev.t, self.cfg.imu)
            )
        else:
            # without inertial data, tie velocity and bias loosely across
            # the interval so the window stays fully constrained
            self._chain.append(
                VectorPriorFactor(("v", kf_id), self.values[("v", prev.kf_id)],
                                  diag_sqrt_info([1.0] * 3))
            )
            self._chain.append(
                BiasWalkFactor(("b", prev.kf_id), ("b", kf_id), max(t - prev.t, 1e-3), self.cfg.imu)
            )

    # -- optimization ------------------------------------------------------
    def factors(self) -> list:
        return self._priors + self._chain

    def optimize(self) -> dict:
        values, info = solve_lm(
            self.factors(),
            self.values,
            max_iterations=self.cfg.max_window_iterations,
            update_tol=1e-10,
        )
        self.values = values
        self._reintegrate_if_needed()
        return info

    def _reintegrate_if_needed(self):
        for i, entry in enumerate(self.entries[1:], start=1):
            f = self._imu_factors.get(entry.kf_id)
            if f is None or entry.imu_samples is None:
                continue
            prev_id = self.entries[i - 1].kf_id
            key = ("b", prev_id)
            if key not in self.values:
                continue
            bias_now = np.asarray(self.values[key])
            drift = np.abs(bias_now - f.delta.bias_at_integration.vector()).max()
            if drift > self.cfg.bias_reintegrate_threshold:
                delta = preintegrate(entry.imu_samples, ImuBias.from_vector(bias_now), self.cfg.imu)
                new_f = ImuFactor(f.keys, delta, self.cfg.imu)
                self._chain[self._chain.index(f)] = new_f
                self._imu_factors[entry.kf_id] = new_f

    def marginalize_oldest(self):
        oldest = self.entries[0]
        keys = [("x", oldest.kf_id), ("v", oldest.kf_id), ("b", oldest.kf_id)]
        touching = [f for f in self.factors() if any(k in f.keys for k in keys)]
        prior = marginalize(touching, self.values, keys)
        self._priors = [f for f in self._priors if f not in touching]
        self._chain = [f for f in self._chain if f not in touching]
        if prior is not None:
            self._priors.append(prior)
        self.entries.pop(0)
        self._imu_factors.pop(self.entries[0].kf_id, None)
        for k in keys:
            self.values.pop(k, None)

    def shrink_to_size(self):
        while len(self.entries) > self.cfg.window_size:
            self.marginalize_oldest()

    # -- queries -----------------------------------------------------------
    def nav_states(self) -> dict[int, NavState]:
        return {
            e.kf_id: NavState(self.values[("x", e.kf_id)], np.asarray(self.values[("v", e.kf_id)]))
            for e in self.entries
        }

    def newest_id(self) -> int:
        return self.entries[-1].kf_id

    def bias(self, kf_id: int) -> ImuBias:
        return ImuBias.from_vector(np.asarray(self.values[("b", kf_id)]))

    # -- global feedback ----------------------------------------------------
    def apply_feedback(self, corrections: dict[int, Pose]) -> int:
        """Re-anchor the window on externally optimized poses.

        The newest corrected keyframe becomes a strong prior; later states
        re-propagate through the stored relative odometry; earlier window
        states take their corrected values (or move rigidly with the
        anchor). Velocities rotate with the frame change; biases are body
        quantities and stay. Returns the number of unknown keyframe ids.
        """
        ids = [e.kf_id for e in self.entries]
        known = {k: p for k, p in corrections.items() if k in ids}
        unknown = len(corrections) - len(known)
        if not known:
            return unknown
        anchor_id = max(known)
        anchor_idx = ids.index(anchor_id)
        old_anchor = self.values[("x", anchor_id)]
        new_anchor = known[anchor_id]
        G = new_anchor.compose(old_anchor.inverse())
        G_R = G.rotation

        new_poses: dict[int, Pose] = {}
        for i, kf in enumerate(ids):
            if i <= anchor_idx:
                new_poses[kf] = known.get(kf, G.compose(self.values[("x", kf)]))
        # re-propagate after the anchor through stored relative odometry
        for i in range(anchor_idx + 1, len(ids)):
            entry = self.entries[i]
            z = entry.odom.measurement if entry.odom is not None else Pose.identity()
            new_poses[ids[i]] = new_poses[ids[i - 1]].compose(z)

        for kf in ids:
            self.values[("x", kf)] = new_poses[kf]
            self.values[("v", kf)] = G_R.apply(np.asarray(self.values[("v", kf)]))

        c = self.cfg
        self._priors = [
            PriorFactor(("x", anchor_id), new_anchor, diag_sqrt_info([c.feedback_prior_sigma] * 6)),
            VectorPriorFactor(
                ("v", anchor_id), self.values[("v", anchor_id)], diag_sqrt_info([c.prior_vel_sigma] * 3)
            ),
            VectorPriorFactor(
                ("b", anchor_id), self.values[("b", anchor_id)], diag_sqrt_info([c.prior_bias_sigma] * 6)
            ),
        ]
        return unknown


def window_optimize(window: SlidingWindow) -> dict[int, NavState]:
    """Run the window solver and return the refined per-keyframe nav states."""
    if not window.entries:
        raise ValueError("empty window")
    window.optimize()
    return window.nav_states()


@dataclass
class ProcessResult:
    pose: Pose
    keyframe: Keyframe | None
    odom_factor: OdomFactorMeasurement | None
    degraded: bool
    fitness: float


class LioFrontend:
    """One robot's odometry pipeline; single-writer, fed in timestamp order."""

    def __init__(self, robot_id: int, cfg: FrontendConfig = FrontendConfig(),
                 initial_pose: Pose = Pose.identity()):
        self.robot_id = robot_id
        self.cfg = cfg
        self.window = SlidingWindow(cfg)
        self.state = NavState(initial_pose, np.zeros(3))
        self.bias = ImuBias()
        self.initial_pose = initial_pose
        self.map_index: NeighborIndex | None = None
        self.keyframes: dict[int, Keyframe] = {}
        self.next_kf_id = 0
        self.last_scan_t: float | None = None
        self.last_kf_pose: Pose | None = None  # odometry-chain snapshot
        self.last_kf_id: int | None = None
        self._imu: list[ImuSample] = []  # buffer since the last keyframe
        self._imu_times: list[float] = []

    # -- inputs -------------------------------------------------------------
    def add_imu(self, sample: ImuSample):
        if self._imu_times and sample.t <= self._imu_times[-1]:
            raise ValueError("time order")
        self._imu.append(sample)
        self._imu_times.append(sample.t)

    def _samples_between(self, t0: float, t1: float) -> list[ImuSample]:
        lo = bisect.bisect_left(self._imu_times, t0 - 1e-9)
        hi = bisect.bisect_right(self._imu_times, t1 + 1e-9)
        return self._imu[lo:hi]

    def _trim_buffer(self, t_keep: float):
        lo = bisect.bisect_left(self._imu_times, t_keep - 1e-9)
        self._imu = self._imu[lo:]
        self._imu_times = self._imu_times[lo:]

    # -- main pipeline --------------------------------------------------------
    def process_scan(self, t: float, scan: PointCloud) -> ProcessResult:
        if self.last_scan_t is None:
            return self._bootstrap(t, scan)

        pred_samples = self._samples_between(self.last_scan_t, t)
        if len(pred_samples) >= 2:
            delta = preintegrate(pred_samples, self.bias, self.cfg.imu)
            predicted = predict(self.state, delta, self.cfg.imu)
        else:
            predicted = self.state

        sweep_start = t - self.cfg.scan_period
        increments = rotation_increments_from_gyro(
            self._samples_between(sweep_start, t), sweep_start, self.cfg.scan_period,
            self.bias.gyro_bias,
        )
        deskewed, _ = deskew(scan, increments)
        source = voxel_downsample(deskewed, self.cfg.map_voxel)

        degraded = False
        fitness = float("inf")
        pose = predicted.pose
        if self.map_index is not None and len(source) > 0:
            result = align_gicp(source, self.map_index, predicted.pose, self.cfg.gicp)
            if result.converged:
                pose = result.transform
                fitness = result.fitness
            else:
                degraded = True
        else:
            degraded = True

        self.state = NavState(pose, predicted.velocity)
        self.last_scan_t = t

        delta_kf = between(self.last_kf_pose, pose)
        if not keyframe_gate(delta_kf, self.cfg.keyframe_trans_gate, self.cfg.keyframe_rot_gate):
            return ProcessResult(pose, None, None, degraded, fitness)
        return self._make_keyframe(t, source, pose, fitness, degraded)

    def _bootstrap(self, t: float, scan: PointCloud) -> ProcessResult:
        self.last_scan_t = t
        cloud = voxel_downsample(scan, self.cfg.map_voxel)
        kf = Keyframe(self.robot_id, 0, t, self.initial_pose, cloud,
                      describe(cloud, self.cfg.descriptor))
        self.keyframes[0] = kf
        self.next_kf_id = 1
        self.last_kf_pose = self.initial_pose
        self.last_kf_id = 0
        self.window.bootstrap(0, t, NavState(self.initial_pose, np.zeros(3)), self.bias)
        self._rebuild_map()
        self._trim_buffer(t)
        return ProcessResult(self.initial_pose, kf, None, False, 0.0)

    def _make_keyframe(self, t, source, pose, fitness, degraded) -> ProcessResult:
        kf_id = self.next_kf_id
        self.next_kf_id += 1
        z = between(self.last_kf_pose, pose)
        cov = covariance_from_fitness(fitness if np.isfinite(fitness) else 1.0)
        odom = OdomFactorMeasurement(self.last_kf_id, kf_id, z, cov)

        kf = Keyframe(self.robot_id, kf_id, t, pose, source, describe(source, self.cfg.descriptor))
        self.keyframes[kf_id] = kf

        prev_entry_t = self.window.entries[-1].t
        samples = self._samples_between(prev_entry_t, t)
        self.window.add_keyframe(
            kf_id, t, NavState(pose, self.state.velocity), self.bias, odom,
            samples if len(samples) >= 2 else None,
        )
        self.window.optimize()
        self.window.shrink_to_size()

        refined = self.window.nav_states()[kf_id]
        self.state = NavState(refined.pose, refined.velocity)
        self.bias = self.window.bias(kf_id)
        self.last_kf_pose = pose
        self.last_kf_id = kf_id
        self._rebuild_map()
        self._trim_buffer(t)
        return ProcessResult(pose, kf, odom, degraded, fitness)

    def _rebuild_map(self):
        # keyframe clouds already carry the map resolution (voxelized in
        # their own body frames), so the union is used as-is; re-binning in
        # the map frame would tie the map to the voxel grid's orientation
        states = self.window.nav_states()
        clouds = []
        for e in self.window.entries:
            kf = self.keyframes.get(e.kf_id)
            if kf is None or len(kf.cloud) == 0:
                continue
            clouds.append(kf.cloud.transformed(states[e.kf_id].pose))
        merged = PointCloud.concatenate(clouds)
        self.map_index = NeighborIndex(merged, self.cfg.gicp) if len(merged) > 0 else None

    # -- feedback -------------------------------------------------------------
    def apply_global_feedback(self, corrections: list[tuple[int, Pose]]) -> int:
        """Ingest server-optimized poses; returns the count of unknown ids."""
        if not corrections:
            return 0
        known = {k: p for k, p in corrections if k in self.keyframes}
        unknown = len(corrections) - len(known)
        in_window = {k: p for k, p in known.items() if ("x", k) in self.window.values}
        if not in_window:
            return unknown
        self.window.apply_feedback(in_window)
        states = self.window.nav_states()
        newest = self.window.newest_id()
        refined = states[newest]
        # the chain snapshot moves to the corrected frame so future odometry
        # measurements stay jump-free
        if newest == self.last_kf_id:
            self.last_kf_pose = refined.pose
        self.state = NavState(refined.pose, refined.velocity)
        self._rebuild_map()
        return unknown

import numpy as np
import pytest

from swarmlio.cloud import PointCloud, voxel_downsample
from swarmlio.frontend import (
    FrontendConfig,
    LioFrontend,
    OdomFactorMeasurement,
    SlidingWindow,
    deskew,
    keyframe_gate,
    rotation_increments_from_gyro,
    window_optimize,
)
from swarmlio.geometry import Pose, Rotation, between, exp_so3, retract, rot_z
from swarmlio.imu import ImuBias, ImuNoiseParams, ImuSample, NavState
from swarmlio.place_recognition import covariance_from_fitness

from cloud_builders import grid_plane, walls_and_floor
from synthetic_trajectories import SinusoidTrajectory


def stationary_imu(t0, t1, rate=100.0):
    n = int(round((t1 - t0) * rate))
    return [
        ImuSample(t0 + k / rate, np.zeros(3), np.array([0.0, 0.0, 9.81]))
        for k in range(n + 1)
    ]


def yaw_rate_imu(t0, t1, rate_z, hz=100.0):
    n = int(round((t1 - t0) * hz))
    return [
        ImuSample(t0 + k / hz, np.array([0.0, 0.0, rate_z]), np.array([0.0, 0.0, 9.81]))
        for k in range(n + 1)
    ]


class TestKeyframeGate:
    def test_below_both_thresholds(self):
        assert not keyframe_gate(Pose(rot_z(0.1), [0.5, 0, 0]))

    def test_translation_threshold(self):
        assert keyframe_gate(Pose(rot_z(0.0), [1.2, 0, 0]))

    def test_rotation_threshold(self):
        assert keyframe_gate(Pose(rot_z(0.25), [0.0, 0, 0]))

    def test_boundary_inclusive(self):
        assert keyframe_gate(Pose(rot_z(0.0), [1.0, 0, 0]))
        assert keyframe_gate(Pose(rot_z(0.2000001), [0.0, 0, 0]))


class TestDeskew:
    def scan_ring(self, n=360):
        az = (np.arange(n) + 0.5) / n * 2 * np.pi
        pts = np.stack([5 * np.cos(az), 5 * np.sin(az), np.zeros(n)], axis=1)
        return PointCloud(pts, np.zeros(n), times=az / (2 * np.pi))

    def test_zero_rate_identity(self):
        scan = self.scan_ring()
        increments = [(0.0, Rotation.identity()), (1.0, Rotation.identity())]
        out, warned = deskew(scan, increments)
        assert not warned
        np.testing.assert_allclose(out.positions, scan.positions, atol=1e-12)

    def test_constant_yaw_rate_relative_rotation(self):
        # 1 rad/s over a 0.1 s sweep; the earliest point receives a
        # correction 0.1 rad larger than the final point
        scan = PointCloud(
            [[5.0, 0.0, 0.0], [5.0, 0.0, 0.0]], [0.0, 0.0], times=[0.0, 1.0 - 1e-9]
        )
        ts = np.linspace(0, 1, 11)
        increments = [(t, rot_z(0.1 * t)) for t in ts]
        out, _ = deskew(scan, increments)

        def applied_angle(i):
            a = scan.positions[i] / np.linalg.norm(scan.positions[i])
            b = out.positions[i] / np.linalg.norm(out.positions[i])
            return np.arccos(np.clip(a @ b, -1, 1))

        assert applied_angle(0) - applied_angle(1) == pytest.approx(0.1, abs=1e-6)
        # the final point coincides with the sweep end: unrotated
        assert applied_angle(1) == pytest.approx(0.0, abs=1e-6)

    def test_missing_times_pass_through(self):
        scan = PointCloud([[1.0, 0, 0]], [0.0])
        out, warned = deskew(scan, [(0.0, Rotation.identity()), (1.0, rot_z(0.5))])
        assert warned
        np.testing.assert_array_equal(out.positions, scan.positions)

    def test_gyro_increments_match_constant_rate(self):
        samples = yaw_rate_imu(10.0, 10.1, 1.0)
        inc = rotation_increments_from_gyro(samples, 10.0, 0.1, np.zeros(3))
        assert inc[0][0] == pytest.approx(0.0)
        assert inc[-1][0] == pytest.approx(1.0)
        np.testing.assert_allclose(
            inc[-1][1].log(), [0, 0, 0.1], atol=1e-9
        )


def _chain_window(n_keyframes, cfg, rng, odom_noise=0.0):
    """Drive a SlidingWindow with a smooth synthetic keyframe stream."""
    traj = SinusoidTrajectory(seed=3)
    params = cfg.imu
    dt_kf = 0.5
    times = [k * dt_kf for k in range(n_keyframes)]
    w = SlidingWindow(cfg)
    states = {t: traj.nav_state(t) for t in times}
    w.bootstrap(0, 0.0, states[0.0], ImuBias())
    for k in range(1, n_keyframes):
        t0, t1 = times[k - 1], times[k]
        samples = traj.imu_samples(t0, t1, 200.0, params.gravity)
        z = between(states[t0].pose, states[t1].pose)
        if odom_noise > 0:
            z = retract(z, rng.normal(size=6) * odom_noise)
        odom = OdomFactorMeasurement(
            k - 1, k, z, np.diag([max(odom_noise, 1e-3) ** 2] * 6)
        )
        init = NavState(
            retract(states[t1].pose, rng.normal(size=6) * 0.01), states[t1].velocity
        )
        w.add_keyframe(k, t1, init, ImuBias(), odom, samples)
        w.optimize()
        w.shrink_to_size()
    return w, states, times


class TestSlidingWindow:
    def test_single_state_prior_only(self):
        cfg = FrontendConfig()
        w = SlidingWindow(cfg)
        prior = Pose(exp_so3([0.1, 0, 0.2]), [1.0, 2.0, 3.0])
        w.bootstrap(0, 0.0, NavState(prior, np.zeros(3)), ImuBias())
        states = window_optimize(w)
        diff = between(prior, states[0].pose)
        assert np.linalg.norm(diff.translation) < 1e-9
        assert diff.rotation.angle() < 1e-9

    def test_noise_free_chain_recovers_truth(self):
        cfg = FrontendConfig(imu=ImuNoiseParams(1e-4, 1e-3, 1e-6, 1e-5))
        rng = np.random.default_rng(4)
        w, states, times = _chain_window(5, cfg, rng, odom_noise=0.0)
        nav = w.nav_states()
        for k, t in enumerate(times):
            diff = between(states[t].pose, nav[k].pose)
            assert np.linalg.norm(diff.translation) < 1e-6
            assert diff.rotation.angle() < 1e-6

    def test_marginalized_window_matches_full_batch(self):
        rng = np.random.default_rng(5)
        imu = ImuNoiseParams(2e-3, 2e-2, 1e-5, 1e-4)
        cfg_window = FrontendConfig(window_size=10, imu=imu)
        cfg_batch = FrontendConfig(window_size=1000, imu=imu)
        rng2 = np.random.default_rng(5)  # identical measurement stream
        w_fix, _, _ = _chain_window(11, cfg_window, rng, odom_noise=0.01)
        w_all, _, _ = _chain_window(11, cfg_batch, rng2, odom_noise=0.01)
        w_all.optimize()
        nav_fix = w_fix.nav_states()
        nav_all = w_all.nav_states()
        assert len(w_fix.entries) == 10
        for k in nav_fix:
            err = np.linalg.norm(
                nav_fix[k].pose.translation - nav_all[k].pose.translation
            )
            assert err < 1e-3

    def test_window_size_bounded_and_factor_count_linear(self):
        rng = np.random.default_rng(6)
        cfg = FrontendConfig(imu=ImuNoiseParams(1e-3, 1e-2, 1e-5, 1e-4))
        w, _, _ = _chain_window(16, cfg, rng, odom_noise=0.005)
        assert len(w.entries) == 10
        assert len(w.factors()) <= 4 * len(w.entries) + 3


class CorridorWorld:
    """Two long walls plus floor and pillars, in world coordinates."""

    def __init__(self):
        floor = grid_plane((-4, 16, -2, 2), 0.35, 2, 0.0, 60.0)
        left = grid_plane((-4, 16, 0.2, 2.6), 0.3, 1, -2.0, 180.0)
        right = grid_plane((-4, 16, 0.2, 2.6), 0.3, 1, 2.0, 120.0)
        pillars = []
        for x in (-2.0, 1.0, 4.0, 7.0, 10.0, 13.0):
            pillars.append(grid_plane((x - 0.2, x + 0.2, 0.2, 2.4), 0.18, 1, -1.8, 240.0))
        self.cloud = PointCloud.concatenate([floor, left, right] + pillars)

    def scan_from(self, pose: Pose) -> PointCloud:
        return self.cloud.transformed(pose.inverse())


class TestProcessScan:
    def make_frontend(self, **kw):
        cfg = FrontendConfig(imu=ImuNoiseParams(0.0, 0.0, 0.0, 0.0), **kw)
        return LioFrontend(0, cfg)

    def test_stationary_drift(self):
        world = CorridorWorld()
        fe = self.make_frontend()
        pose = Pose(rot_z(0.3), [4.0, 0.0, 0.5])
        scan = world.scan_from(pose)
        rate = 2.0
        for k in range(20):
            t = k / rate
            if k > 0:
                for s in stationary_imu((k - 1) / rate, t)[1:]:
                    fe.add_imu(s)
            res = fe.process_scan(t, scan)
            assert np.linalg.norm(res.pose.translation) < 1e-2

    def test_corridor_keyframe_spacing(self):
        world = CorridorWorld()
        fe = self.make_frontend()
        v = 1.0  # m/s along +x
        rate = 4.0
        keyframes = []
        for k in range(int(10 * rate) + 1):
            t = k / rate
            pose = Pose(Rotation.identity(), [v * t, 0.0, 0.5])
            if k > 0:
                for s in stationary_imu((k - 1) / rate, t)[1:]:
                    fe.add_imu(s)
            res = fe.process_scan(t, world.scan_from(pose))
            if res.keyframe is not None:
                keyframes.append(res.keyframe)
        assert 8 <= len(keyframes) <= 13
        gaps = np.diff([kf.pose.translation[0] for kf in keyframes])
        assert np.all(gaps > 0.8) and np.all(gaps < 1.6)

    def test_pure_rotation_keyframes(self):
        world = CorridorWorld()
        fe = self.make_frontend()
        rate = 10.0
        w = 0.5  # rad/s
        count = 0
        for k in range(int(2.0 * rate) + 1):
            t = k / rate
            pose = Pose(rot_z(w * t), [4.0, 0.0, 0.5])
            if k > 0:
                for s in yaw_rate_imu((k - 1) / rate, t, w, hz=100.0)[1:]:
                    fe.add_imu(s)
            res = fe.process_scan(t, world.scan_from(pose))
            if res.keyframe is not None and res.odom_factor is not None:
                count += 1
        assert count >= 4

    def test_odometry_chain_telescopes(self):
        world = CorridorWorld()
        fe = self.make_frontend()
        rate = 4.0
        factors = []
        last_kf = None
        for k in range(int(8 * rate) + 1):
            t = k / rate
            pose = Pose(Rotation.identity(), [t, 0.0, 0.5])
            if k > 0:
                for s in stationary_imu((k - 1) / rate, t)[1:]:
                    fe.add_imu(s)
            res = fe.process_scan(t, world.scan_from(pose))
            if res.odom_factor is not None:
                factors.append(res.odom_factor)
            if res.keyframe is not None:
                last_kf = res.keyframe
        assert len(factors) >= 5
        composed = fe.keyframes[0].pose
        for f in factors:
            composed = composed.compose(f.measurement)
        diff = between(composed, last_kf.pose)
        assert np.linalg.norm(diff.translation) < 1e-9
        assert diff.rotation.angle() < 1e-9

    def test_degraded_fallback_without_correspondences(self):
        fe = self.make_frontend()
        near = PointCloud(
            np.array([[1.0, 0, 0.5], [0, 1.0, 0.5], [1.0, 1.0, 0.5], [2.0, 0, 0.5]] * 5)
            + np.linspace(0, 0.4, 20)[:, None] * np.array([0.1, 0.05, 0]),
            np.zeros(20),
        )
        fe.process_scan(0.0, near)
        for s in stationary_imu(0.0, 0.5)[1:]:
            fe.add_imu(s)
        far = PointCloud(near.positions + np.array([500.0, 0, 0]), near.intensities)
        res = fe.process_scan(0.5, far)
        assert res.degraded


class TestGlobalFeedback:
    def run_frontend(self, n_scans=30):
        world = CorridorWorld()
        fe = self.make_fe()
        rate = 4.0
        for k in range(n_scans):
            t = k / rate
            pose = Pose(Rotation.identity(), [t, 0.0, 0.5])
            if k > 0:
                for s in stationary_imu((k - 1) / rate, t)[1:]:
                    fe.add_imu(s)
            fe.process_scan(t, world.scan_from(pose))
        return fe, world

    def make_fe(self):
        cfg = FrontendConfig(imu=ImuNoiseParams(0.0, 0.0, 0.0, 0.0))
        return LioFrontend(0, cfg)

    def test_fixed_point(self):
        fe, _ = self.run_frontend()
        states = fe.window.nav_states()
        corrections = [(k, s.pose) for k, s in states.items()]
        unknown = fe.apply_global_feedback(corrections)
        assert unknown == 0
        after = fe.window.nav_states()
        for k in states:
            diff = between(states[k].pose, after[k].pose)
            assert np.linalg.norm(diff.translation) < 1e-9
            assert diff.rotation.angle() < 1e-9

    def test_empty_feedback_noop(self):
        fe, _ = self.run_frontend(8)
        before = fe.window.nav_states()
        assert fe.apply_global_feedback([]) == 0
        after = fe.window.nav_states()
        for k in before:
            assert np.linalg.norm(before[k].pose.translation - after[k].pose.translation) == 0

    def test_unknown_ids_counted(self):
        fe, _ = self.run_frontend(8)
        states = fe.window.nav_states()
        corrections = [(k, s.pose) for k, s in states.items()] + [(999, Pose.identity())]
        assert fe.apply_global_feedback(corrections) == 1

    def test_rigid_equivariance_of_subsequent_outputs(self):
        world = CorridorWorld()
        fe_a = self.make_fe()
        fe_b = self.make_fe()
        rate = 4.0

        def feed(fe, k, G=None):
            t = k / rate
            pose = Pose(Rotation.identity(), [t, 0.0, 0.5])
            if k > 0:
                for s in stationary_imu((k - 1) / rate, t)[1:]:
                    fe.add_imu(s)
            return fe.process_scan(t, world.scan_from(pose))

        for k in range(16):
            feed(fe_a, k)
            feed(fe_b, k)
        G = Pose(rot_z(0.7), np.array([5.0, -2.0, 0.3]))
        states = fe_a.window.nav_states()
        fe_a.apply_global_feedback([(k, s.pose) for k, s in states.items()])
        fe_b.apply_global_feedback([(k, G.compose(s.pose)) for k, s in states.items()])
        # feedback application itself is exactly equivariant
        sa, sb = fe_a.window.nav_states(), fe_b.window.nav_states()
        for k in sa:
            d = between(G.compose(sa[k].pose), sb[k].pose)
            assert np.linalg.norm(d.translation) < 1e-9
            assert d.rotation.angle() < 1e-9
        # the continued registration pipeline tracks G up to float-level
        # divergence of the iterative alignment
        for k in range(16, 28):
            ra = feed(fe_a, k)
            rb = feed(fe_b, k)
            diff = between(G.compose(ra.pose), rb.pose)
            assert np.linalg.norm(diff.translation) < 2e-3
            assert diff.rotation.angle() < 5e-4


def test_covariance_from_fitness_used_for_odometry():
    cov = covariance_from_fitness(0.01)
    assert cov.shape == (6, 6)
    assert np.all(np.diag(cov) >= 1e-12)

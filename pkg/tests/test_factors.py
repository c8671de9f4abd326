import numpy as np
import pytest

from swarmlio.factors import (
    BetweenFactor,
    BiasWalkFactor,
    ImuFactor,
    LinearizedPriorFactor,
    PriorFactor,
    RangeFactor,
    VectorPriorFactor,
    graph_error,
    marginalize,
    solve_lm,
    sqrt_info_from_cov,
    diag_sqrt_info,
    retract_value,
)
from swarmlio.geometry import Pose, between, exp_so3, retract
from swarmlio.imu import ImuBias, ImuNoiseParams, preintegrate

from synthetic_trajectories import SinusoidTrajectory


def rand_pose(rng, rot=0.5, trans=3.0):
    return Pose(exp_so3(rng.normal(size=3) * rot), rng.uniform(-trans, trans, 3))


def fd_check(factor, values, atol=2e-5):
    jacs = factor.jacobians(values)
    h = 1e-6
    for key, J in zip(factor.keys, jacs):
        dim = J.shape[1]
        J_fd = np.zeros_like(J)
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = h
            vp = dict(values)
            vm = dict(values)
            vp[key] = retract_value(values[key], e)
            vm[key] = retract_value(values[key], -e)
            J_fd[:, i] = (factor.residual(vp) - factor.residual(vm)) / (2 * h)
        np.testing.assert_allclose(J, J_fd, atol=atol * (1 + np.abs(J_fd).max()))


class TestJacobians:
    def test_prior(self):
        rng = np.random.default_rng(1)
        f = PriorFactor(("x",), rand_pose(rng), sqrt_info_from_cov(np.diag([0.1] * 6)))
        fd_check(f, {("x",): rand_pose(rng)})

    def test_between(self):
        rng = np.random.default_rng(2)
        f = BetweenFactor(("a",), ("b",), rand_pose(rng), diag_sqrt_info([0.05] * 6))
        fd_check(f, {("a",): rand_pose(rng), ("b",): rand_pose(rng)})

    def test_range(self):
        rng = np.random.default_rng(3)
        f = RangeFactor(("a",), ("b",), 4.0, 0.1)
        for _ in range(5):
            values = {("a",): rand_pose(rng), ("b",): rand_pose(rng)}
            fd_check(f, values, atol=1e-6)

    def test_range_degenerate_flagged(self):
        f = RangeFactor(("a",), ("b",), 1.0, 0.1)
        X = Pose.identity()
        values = {("a",): X, ("b",): Pose(X.rotation, X.translation + 1e-9)}
        Ja, Jb = f.jacobians(values)
        assert not Ja.any() and not Jb.any()
        assert np.isfinite(f.residual(values)).all()

    def test_range_validation(self):
        with pytest.raises(ValueError):
            RangeFactor(("a",), ("b",), -1.0, 0.1)

    def test_imu_factor(self):
        traj = SinusoidTrajectory(seed=11)
        params = ImuNoiseParams(1e-3, 1e-2, 1e-5, 1e-4)
        samples = traj.imu_samples(0.0, 0.4, 200.0, params.gravity)
        bias = ImuBias(np.array([0.004, -0.002, 0.001]), np.array([0.03, -0.01, 0.02]))
        delta = preintegrate(samples, bias, params)
        keys = [("xi",), ("vi",), ("xj",), ("vj",), ("bi",)]
        f = ImuFactor(keys, delta, params)
        rng = np.random.default_rng(4)
        values = {
            ("xi",): rand_pose(rng),
            ("vi",): rng.normal(size=3),
            ("xj",): rand_pose(rng),
            ("vj",): rng.normal(size=3),
            ("bi",): bias.vector() + rng.normal(size=6) * 0.01,
        }
        fd_check(f, values, atol=5e-5)

    def test_bias_walk(self):
        params = ImuNoiseParams()
        f = BiasWalkFactor(("b0",), ("b1",), 0.5, params)
        rng = np.random.default_rng(5)
        fd_check(f, {("b0",): rng.normal(size=6), ("b1",): rng.normal(size=6)})

    def test_linearized_prior(self):
        rng = np.random.default_rng(6)
        lin = {("x",): rand_pose(rng), ("v",): rng.normal(size=3)}
        A = [rng.normal(size=(5, 6)), rng.normal(size=(5, 3))]
        b = rng.normal(size=5)
        f = LinearizedPriorFactor([("x",), ("v",)], A, b, lin)
        values = {
            ("x",): retract(lin[("x",)], rng.normal(size=6) * 0.1),
            ("v",): lin[("v",)] + rng.normal(size=3) * 0.1,
        }
        fd_check(f, values, atol=2e-5)


class TestSolve:
    def test_single_prior_recovers_mean(self):
        rng = np.random.default_rng(7)
        mean = rand_pose(rng)
        f = PriorFactor(("x",), mean, diag_sqrt_info([0.1] * 6))
        values, info = solve_lm([f], {("x",): rand_pose(rng, rot=0.3)})
        assert info["converged"]
        diff = between(mean, values[("x",)])
        assert np.linalg.norm(diff.translation) < 1e-8
        assert diff.rotation.angle() < 1e-8

    def test_noise_free_chain_exact(self):
        rng = np.random.default_rng(8)
        truth = [Pose.identity()]
        for _ in range(5):
            truth.append(truth[-1].compose(rand_pose(rng, rot=0.2, trans=1.0)))
        factors = [PriorFactor(0, truth[0], diag_sqrt_info([1e-3] * 6))]
        for i in range(5):
            factors.append(
                BetweenFactor(i, i + 1, between(truth[i], truth[i + 1]), diag_sqrt_info([0.01] * 6))
            )
        init = {i: retract(truth[i], rng.normal(size=6) * 0.1) for i in range(6)}
        values, info = solve_lm(factors, init, update_tol=1e-12)
        for i in range(6):
            diff = between(truth[i], values[i])
            assert np.linalg.norm(diff.translation) < 1e-6
            assert diff.rotation.angle() < 1e-6

    def test_range_triangulation(self):
        # one movable pose constrained by prior + three ranges to fixed anchors
        anchors = [np.array([0.0, 0, 0]), np.array([10.0, 0, 0]), np.array([0.0, 10, 0])]
        target = np.array([3.0, 4.0, 0.0])
        factors = []
        values = {}
        for i, a in enumerate(anchors):
            key = ("anchor", i)
            values[key] = Pose(exp_so3(np.zeros(3)), a)
            factors.append(PriorFactor(key, values[key], diag_sqrt_info([1e-4] * 6)))
            factors.append(RangeFactor(("x",), key, float(np.linalg.norm(target - a)), 0.01))
        values[("x",)] = Pose(exp_so3(np.zeros(3)), np.array([2.0, 2.0, 0.2]))
        factors.append(
            PriorFactor(
                ("x",),
                Pose(exp_so3(np.zeros(3)), np.array([2.0, 2.0, 0.0])),
                diag_sqrt_info([1e-3] * 3 + [10.0] * 3),
            )
        )
        values, info = solve_lm(factors, values, max_iterations=100)
        np.testing.assert_allclose(values[("x",)].translation, target, atol=1e-3)


class TestMarginalize:
    def test_matches_full_batch_on_chain(self):
        rng = np.random.default_rng(9)
        truth = [Pose.identity()]
        for _ in range(4):
            truth.append(truth[-1].compose(rand_pose(rng, rot=0.15, trans=1.0)))
        si = diag_sqrt_info([0.02] * 6)
        factors = [PriorFactor(0, truth[0], diag_sqrt_info([1e-3] * 6))]
        measurements = []
        for i in range(4):
            z = retract(between(truth[i], truth[i + 1]), rng.normal(size=6) * 0.01)
            measurements.append(z)
            factors.append(BetweenFactor(i, i + 1, z, si))

        init = {i: retract(truth[i], rng.normal(size=6) * 0.05) for i in range(5)}
        full, _ = solve_lm(factors, init, update_tol=1e-12, max_iterations=100)

        # marginalize pose 0 after converging, then re-solve the reduced graph
        touching = [f for f in factors if 0 in f.keys]
        prior = marginalize(touching, full, [0])
        assert prior is not None and prior.keys == [1]
        reduced = [f for f in factors if 0 not in f.keys] + [prior]
        red_init = {i: full[i] for i in range(1, 5)}
        red_vals, _ = solve_lm(reduced, red_init, update_tol=1e-12, max_iterations=100)
        for i in range(1, 5):
            diff = between(full[i], red_vals[i])
            assert np.linalg.norm(diff.translation) < 1e-6
            assert diff.rotation.angle() < 1e-6

    def test_gauge_equivariance_of_solution(self):
        rng = np.random.default_rng(10)
        truth = [Pose.identity()]
        for _ in range(3):
            truth.append(truth[-1].compose(rand_pose(rng, rot=0.2, trans=1.0)))
        z = [retract(between(truth[i], truth[i + 1]), rng.normal(size=6) * 0.02) for i in range(3)]

        def solve_with_prior(prior_mean, init):
            factors = [PriorFactor(0, prior_mean, diag_sqrt_info([1e-4] * 6))]
            for i in range(3):
                factors.append(BetweenFactor(i, i + 1, z[i], diag_sqrt_info([0.05] * 6)))
            return solve_lm(factors, init, update_tol=1e-13, max_iterations=100)[0]

        base_init = {i: retract(truth[i], rng.normal(size=6) * 0.05) for i in range(4)}
        sol0 = solve_with_prior(truth[0], base_init)
        G = rand_pose(rng)
        shifted_init = {i: G.compose(p) for i, p in base_init.items()}
        sol1 = solve_with_prior(G.compose(truth[0]), shifted_init)
        for i in range(4):
            diff = between(G.compose(sol0[i]), sol1[i])
            assert np.linalg.norm(diff.translation) < 1e-8
            assert diff.rotation.angle() < 1e-8


def test_graph_error_weighting():
    rng = np.random.default_rng(11)
    f = VectorPriorFactor(("v",), np.zeros(3), diag_sqrt_info([1.0] * 3))
    values = {("v",): np.array([1.0, 0, 0])}
    assert graph_error([f], values) == pytest.approx(1.0)
    assert graph_error([f], values, weights=[0.25]) == pytest.approx(0.25)

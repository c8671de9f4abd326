import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarmlio.geometry import (
    Pose,
    Rotation,
    adjoint,
    between,
    exp_so3,
    local_coordinates,
    log_so3,
    pose_log,
    retract,
    right_jacobian_inv_so3,
    right_jacobian_so3,
    skew,
)


def random_rotation(rng) -> Rotation:
    w = rng.normal(size=3)
    n = np.linalg.norm(w)
    if n >= np.pi:
        w = w / n * rng.uniform(0, np.pi * 0.999)
    return exp_so3(w)


def random_pose(rng, scale=5.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-scale, scale, size=3))


class TestExpLog:
    def test_zero_gives_identity(self):
        R = exp_so3(np.zeros(3))
        np.testing.assert_allclose(R.matrix(), np.eye(3), atol=1e-15)

    def test_quarter_turn_about_z(self):
        R = exp_so3(np.array([0.0, 0.0, np.pi / 2]))
        np.testing.assert_allclose(R.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_log_identity(self):
        np.testing.assert_allclose(log_so3(Rotation.identity()), np.zeros(3), atol=1e-15)

    def test_log_pi_about_x(self):
        R = Rotation.from_matrix(np.diag([1.0, -1.0, -1.0]))
        np.testing.assert_allclose(log_so3(R), [np.pi, 0.0, 0.0], atol=1e-12)

    def test_log_pi_general_axis(self):
        axis = np.array([1.0, 2.0, -2.0]) / 3.0
        R = exp_so3(np.pi * axis)
        w = log_so3(R)
        # at exactly pi both signs are valid logs
        assert min(np.linalg.norm(w - np.pi * axis), np.linalg.norm(w + np.pi * axis)) < 1e-9

    def test_roundtrip_log_exp(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            w = rng.normal(size=3)
            n = np.linalg.norm(w)
            w = w / n * rng.uniform(0, np.pi * 0.9999)
            np.testing.assert_allclose(log_so3(exp_so3(w)), w, atol=1e-9)

    def test_roundtrip_exp_log_on_rotations(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            R = random_rotation(rng)
            R2 = exp_so3(log_so3(R))
            np.testing.assert_allclose(R2.matrix(), R.matrix(), atol=1e-9)

    def test_rotation_invariants(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            R = random_rotation(rng).matrix()
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_from_matrix_matches_rodrigues_oracle(self):
        # independent Rodrigues construction of the matrix
        rng = np.random.default_rng(10)
        for _ in range(100):
            w = rng.normal(size=3)
            w = w / np.linalg.norm(w) * rng.uniform(1e-6, np.pi - 1e-6)
            a = np.linalg.norm(w)
            K = skew(w / a)
            R_oracle = np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * (K @ K)
            np.testing.assert_allclose(exp_so3(w).matrix(), R_oracle, atol=1e-12)
            np.testing.assert_allclose(log_so3(Rotation.from_matrix(R_oracle)), w, atol=1e-9)


class TestPose:
    def test_between_self_is_identity(self):
        rng = np.random.default_rng(11)
        X = random_pose(rng)
        d = between(X, X)
        np.testing.assert_allclose(d.matrix(), np.eye(4), atol=1e-12)

    def test_between_from_identity(self):
        rng = np.random.default_rng(12)
        Xj = random_pose(rng)
        d = between(Pose.identity(), Xj)
        np.testing.assert_allclose(d.matrix(), Xj.matrix(), atol=1e-15)

    def test_between_composition_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            Xi, Xj = random_pose(rng), random_pose(rng)
            np.testing.assert_allclose(
                Xi.compose(between(Xi, Xj)).matrix(), Xj.matrix(), atol=1e-9
            )

    def test_compose_matches_homogeneous_matrix_oracle(self):
        rng = np.random.default_rng(14)
        for _ in range(200):
            A, B = random_pose(rng), random_pose(rng)
            np.testing.assert_allclose(
                A.compose(B).matrix(), A.matrix() @ B.matrix(), atol=1e-12
            )

    def test_inverse(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            X = random_pose(rng)
            np.testing.assert_allclose(
                X.compose(X.inverse()).matrix(), np.eye(4), atol=1e-9
            )

    def test_apply_matches_matrix(self):
        rng = np.random.default_rng(16)
        X = random_pose(rng)
        pts = rng.normal(size=(20, 3))
        hom = (X.matrix() @ np.hstack([pts, np.ones((20, 1))]).T).T[:, :3]
        np.testing.assert_allclose(X.apply(pts), hom, atol=1e-12)


class TestRetract:
    def test_zero_delta_is_exact(self):
        rng = np.random.default_rng(17)
        X = random_pose(rng)
        Y = retract(X, np.zeros(6))
        assert Y is X  # retract(X, 0) = X exactly

    def test_pure_translation_from_identity(self):
        Y = retract(Pose.identity(), np.array([0, 0, 0, 1.0, 2.0, 3.0]))
        np.testing.assert_allclose(Y.translation, [1.0, 2.0, 3.0], atol=1e-15)
        np.testing.assert_allclose(Y.rotation.matrix(), np.eye(3), atol=1e-15)

    def test_local_coordinates_inverts_retract(self):
        rng = np.random.default_rng(18)
        for _ in range(100):
            X = random_pose(rng)
            d = rng.normal(size=6)
            n = np.linalg.norm(d[:3])
            if n >= np.pi:  # keep the rotation part on the principal branch
                d[:3] *= rng.uniform(0, np.pi * 0.999) / n
            np.testing.assert_allclose(
                local_coordinates(X, retract(X, d)), d, atol=1e-9
            )

    def test_retract_derivative_is_identity_at_zero(self):
        # central finite differences of local(X, retract(X, d)) at d = 0
        rng = np.random.default_rng(19)
        X = random_pose(rng)
        h = 1e-6
        J = np.zeros((6, 6))
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            J[:, i] = (
                local_coordinates(X, retract(X, e))
                - local_coordinates(X, retract(X, -e))
            ) / (2 * h)
        np.testing.assert_allclose(J, np.eye(6), atol=1e-5)

    def test_first_order_additivity(self):
        rng = np.random.default_rng(20)
        for mag in [1e-3, 3e-4, 1e-4]:
            errs = []
            for _ in range(20):
                X = random_pose(rng)
                d1 = rng.normal(size=6) * mag
                d2 = rng.normal(size=6) * mag
                A = retract(X, d1 + d2)
                B = retract(retract(X, d1), d2)
                errs.append(np.linalg.norm(local_coordinates(A, B)))
            # error bounded by C * |delta|^2
            assert max(errs) <= 50.0 * (2 * mag) ** 2

    def test_nonfinite_delta_rejected(self):
        with pytest.raises(ValueError):
            retract(Pose.identity(), np.array([np.nan, 0, 0, 0, 0, 0]))


class TestJacobians:
    def test_right_jacobian_inverse_pair(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            w = rng.normal(size=3)
            np.testing.assert_allclose(
                right_jacobian_so3(w) @ right_jacobian_inv_so3(w), np.eye(3), atol=1e-9
            )

    def test_right_jacobian_definition(self):
        rng = np.random.default_rng(22)
        w = rng.normal(size=3)
        d = rng.normal(size=3) * 1e-6
        lhs = exp_so3(w + d).matrix()
        rhs = exp_so3(w).compose(exp_so3(right_jacobian_so3(w) @ d)).matrix()
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_adjoint_conjugation(self):
        rng = np.random.default_rng(23)
        X = random_pose(rng)
        d = rng.normal(size=6) * 1e-5
        lhs = X.compose(retract(Pose.identity(), d)).compose(X.inverse())
        rhs = retract(Pose.identity(), adjoint(X) @ d)
        np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(
    st.tuples(
        st.floats(-3.1, 3.1), st.floats(-3.1, 3.1), st.floats(-3.1, 3.1)
    ).filter(lambda w: 1e-12 < np.linalg.norm(w) < np.pi - 1e-6)
)
def test_exp_log_roundtrip_property(w):
    w = np.array(w)
    np.testing.assert_allclose(log_so3(exp_so3(w)), w, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pose_log_matches_local_at_identity(seed):
    rng = np.random.default_rng(seed)
    X = random_pose(rng)
    np.testing.assert_allclose(
        pose_log(X), local_coordinates(Pose.identity(), X), atol=1e-12
    )

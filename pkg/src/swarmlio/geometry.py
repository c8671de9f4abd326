"""SO(3)/SE(3) primitives: rotations, poses, manifold maps and perturbations.

Rotations are stored as unit quaternions (scalar-first) and converted to
matrices on demand. Pose tangent vectors are ordered [rotation, translation]
and the retraction is the split parameterization: the rotation moves along
exp_so3 while the translation increment is expressed in the body frame,
i.e. X * Exp(delta) with Exp applied blockwise.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == np.cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ]
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _quat_from_matrix(R: np.ndarray) -> np.ndarray:
    # Shepperd's method: branch on the largest of (trace, R00, R11, R22).
    # The diagonal branch choice doubles as the angle-pi axis tie-break.
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > max(R[0, 0], R[1, 1], R[2, 2]):
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (R[2, 1] - R[1, 2]) / s,
                (R[0, 2] - R[2, 0]) / s,
                (R[1, 0] - R[0, 1]) / s,
            ]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [
                (R[2, 1] - R[1, 2]) / s,
                0.25 * s,
                (R[0, 1] + R[1, 0]) / s,
                (R[0, 2] + R[2, 0]) / s,
            ]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [
                (R[0, 2] - R[2, 0]) / s,
                (R[0, 1] + R[1, 0]) / s,
                0.25 * s,
                (R[1, 2] + R[2, 1]) / s,
            ]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [
                (R[1, 0] - R[0, 1]) / s,
                (R[0, 2] + R[2, 0]) / s,
                (R[1, 2] + R[2, 1]) / s,
                0.25 * s,
            ]
        )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


class Rotation:
    """Element of SO(3), backed by a unit quaternion (w, x, y, z)."""

    __slots__ = ("q",)

    def __init__(self, q: np.ndarray):
        q = np.asarray(q, dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and nonzero")
        q = q / n
        if q[0] < 0:
            q = -q
        self.q = q

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_matrix(R: np.ndarray) -> "Rotation":
        return Rotation(_quat_from_matrix(np.asarray(R, dtype=float)))

    def matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.q)

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(_quat_multiply(self.q, other.q))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return self.compose(other)

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation(np.array([w, -x, -y, -z]))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def log(self) -> np.ndarray:
        return log_so3(self)

    def angle(self) -> float:
        return float(np.linalg.norm(self.log()))

    def __repr__(self) -> str:
        return f"Rotation(q={np.array2string(self.q, precision=6)})"


def exp_so3(omega: np.ndarray) -> Rotation:
    """Rodrigues exponential so(3) -> SO(3); Taylor branch below 1e-8 rad."""
    omega = np.asarray(omega, dtype=float)
    angle = np.linalg.norm(omega)
    half = 0.5 * angle
    if angle < _SMALL_ANGLE:
        # sin(x)/x ~ 1 - x^2/6
        s = 0.5 * (1.0 - half * half / 6.0)
        q = np.concatenate(([np.cos(half)], s * omega))
    else:
        q = np.concatenate(([np.cos(half)], np.sin(half) / angle * omega))
    return Rotation(q)


def log_so3(R: Rotation) -> np.ndarray:
    """Principal-branch logarithm, |result| <= pi.

    Computed from the quaternion, which keeps the axis well conditioned at
    angle pi; there the axis sign follows the largest-diagonal branch of the
    matrix-to-quaternion conversion (ties resolved by index order).
    """
    q = R.q if R.q[0] >= 0 else -R.q
    w = min(q[0], 1.0)
    v = q[1:]
    vn = np.linalg.norm(v)
    if vn < _SMALL_ANGLE:
        # theta ~ 2*vn: log ~ 2v * (1 + vn^2/(6 w^2))
        return 2.0 * v * (1.0 + vn * vn / max(w * w, 1e-12) / 6.0)
    angle = 2.0 * np.arctan2(vn, w)
    return angle / vn * v


def right_jacobian_so3(omega: np.ndarray) -> np.ndarray:
    """Jr such that exp(omega + d) ~ exp(omega) exp(Jr @ d) to first order."""
    omega = np.asarray(omega, dtype=float)
    angle = np.linalg.norm(omega)
    W = skew(omega)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + W @ W / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - (1.0 - np.cos(angle)) / a2 * W
        + (angle - np.sin(angle)) / (a2 * angle) * (W @ W)
    )


def right_jacobian_inv_so3(omega: np.ndarray) -> np.ndarray:
    """Inverse of right_jacobian_so3."""
    omega = np.asarray(omega, dtype=float)
    angle = np.linalg.norm(omega)
    W = skew(omega)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 12.0
    a2 = angle * angle
    cot = 1.0 / np.tan(0.5 * angle)
    return np.eye(3) + 0.5 * W + (1.0 / a2 - 0.5 * cot / angle) * (W @ W)


class Pose:
    """Rigid transform in SE(3): rotation plus translation in meters."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation, translation: np.ndarray):
        self.rotation = rotation
        self.translation = np.asarray(translation, dtype=float).reshape(3)

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose(Rotation.from_matrix(T[:3, :3]), T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation.compose(other.rotation),
            self.translation + self.rotation.apply(other.translation),
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        pts = np.asarray(points, dtype=float)
        R = self.rotation.matrix()
        if pts.ndim == 1:
            return R @ pts + self.translation
        return pts @ R.T + self.translation

    def __repr__(self) -> str:
        t = np.array2string(self.translation, precision=4)
        return f"Pose(t={t}, q={np.array2string(self.rotation.q, precision=4)})"


def between(xi: Pose, xj: Pose) -> Pose:
    """Relative transform xi^-1 * xj."""
    return xi.inverse().compose(xj)


def retract(x: Pose, delta: np.ndarray) -> Pose:
    """Split retraction: rotation via exp_so3, translation in the body frame."""
    delta = np.asarray(delta, dtype=float)
    if not np.all(np.isfinite(delta)):
        raise ValueError("retract delta must be finite")
    if np.all(delta == 0.0):
        return x
    return Pose(
        x.rotation.compose(exp_so3(delta[:3])),
        x.translation + x.rotation.apply(delta[3:]),
    )


def local_coordinates(ref: Pose, x: Pose) -> np.ndarray:
    """Inverse of retract: retract(ref, local_coordinates(ref, x)) == x."""
    dr = log_so3(ref.rotation.inverse().compose(x.rotation))
    dt = ref.rotation.inverse().apply(x.translation - ref.translation)
    return np.concatenate([dr, dt])


def pose_log(x: Pose) -> np.ndarray:
    """Local coordinates of x at identity: [log_so3(R), t]."""
    return np.concatenate([log_so3(x.rotation), x.translation])


def adjoint(x: Pose) -> np.ndarray:
    """Maps right-perturbations of Y to right-perturbations of x*Y*x^-1."""
    R = x.rotation.matrix()
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, :3] = skew(x.translation) @ R
    A[3:, 3:] = R
    return A


def rot_z(angle: float) -> Rotation:
    """Yaw rotation about +z."""
    return exp_so3(np.array([0.0, 0.0, angle]))

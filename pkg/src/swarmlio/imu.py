"""IMU preintegration: relative-motion constraints between keyframes.

Raw gyro/accel streams are accumulated into gravity-free body-frame
increments (dR, dv, dp) with a midpoint rule, together with a 9x9
covariance over the [rotation, velocity, position] error and the bias
Jacobians needed by the window optimizer. Bias uncertainty itself is kept
out of the 9x9; biases live as separate variables linked by random-walk
factors.

The accelerometer model is f = R^T (a - g) + b + n, so a stationary,
level, bias-free sensor reads (0, 0, +|g|).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose,
    Rotation,
    exp_so3,
    log_so3,
    right_jacobian_inv_so3,
    right_jacobian_so3,
    skew,
)

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray  # rad/s
    accel: np.ndarray  # m/s^2


@dataclass(frozen=True)
class ImuBias:
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro_bias, self.accel_bias])

    @staticmethod
    def from_vector(v: np.ndarray) -> "ImuBias":
        v = np.asarray(v, dtype=float)
        return ImuBias(v[:3].copy(), v[3:].copy())


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities (per sqrt(Hz)) and the gravity vector."""

    gyro_noise_density: float = 1.7e-4
    accel_noise_density: float = 2.0e-3
    gyro_bias_walk: float = 1.0e-5
    accel_bias_walk: float = 1.0e-4
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        for name in ("gyro_noise_density", "accel_noise_density",
                     "gyro_bias_walk", "accel_bias_walk"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        g = np.linalg.norm(self.gravity)
        if g != 0.0 and not (9.0 <= g <= 10.5):
            raise ValueError("gravity magnitude must be in [9.0, 10.5] m/s^2 or zero")


@dataclass(frozen=True)
class NavState:
    pose: Pose
    velocity: np.ndarray


@dataclass(frozen=True)
class PreintegratedDelta:
    dR: Rotation
    dv: np.ndarray
    dp: np.ndarray
    dt: float
    cov: np.ndarray  # 9x9 over [rotation, velocity, position]
    bias_at_integration: ImuBias
    # bias Jacobians, used only as optimizer derivatives; the delta itself is
    # re-integrated from raw samples when the bias estimate moves
    dR_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dv_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dv_dba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dp_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dp_dba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))


def preintegrate(
    samples: list[ImuSample], bias: ImuBias, params: ImuNoiseParams
) -> PreintegratedDelta:
    """Accumulate bias-corrected increments over a sample window (midpoint rule)."""
    if len(samples) == 0:
        raise ValueError("no samples")
    times = np.array([s.t for s in samples])
    if len(times) > 1 and np.any(np.diff(times) <= 0):
        raise ValueError("time order")

    dR = Rotation.identity()
    dv = np.zeros(3)
    dp = np.zeros(3)
    cov = np.zeros((9, 9))
    J_R_bg = np.zeros((3, 3))
    J_v_bg = np.zeros((3, 3))
    J_v_ba = np.zeros((3, 3))
    J_p_bg = np.zeros((3, 3))
    J_p_ba = np.zeros((3, 3))

    sg2 = params.gyro_noise_density**2
    sa2 = params.accel_noise_density**2

    for k in range(len(samples) - 1):
        s0, s1 = samples[k], samples[k + 1]
        dt = s1.t - s0.t
        w = 0.5 * (np.asarray(s0.gyro) + np.asarray(s1.gyro)) - bias.gyro_bias
        a = 0.5 * (np.asarray(s0.accel) + np.asarray(s1.accel)) - bias.accel_bias

        step = exp_so3(w * dt)
        R_mid = dR.compose(exp_so3(0.5 * w * dt)).matrix()
        Ra = R_mid @ a

        # error-state transition and noise injection for [dtheta, dv, dp]
        A = np.eye(9)
        A[0:3, 0:3] = step.matrix().T
        A[3:6, 0:3] = -R_mid @ skew(a) * dt
        A[6:9, 0:3] = -0.5 * R_mid @ skew(a) * dt * dt
        A[6:9, 3:6] = np.eye(3) * dt
        B = np.zeros((9, 6))
        Jr = right_jacobian_so3(w * dt)
        B[0:3, 0:3] = Jr * dt
        B[3:6, 3:6] = R_mid * dt
        B[6:9, 3:6] = 0.5 * R_mid * dt * dt
        Q = np.zeros((6, 6))
        Q[0:3, 0:3] = np.eye(3) * (sg2 / dt)
        Q[3:6, 3:6] = np.eye(3) * (sa2 / dt)
        cov = A @ cov @ A.T + B @ Q @ B.T

        # bias Jacobians (use pre-update values on the right-hand side);
        # J_mid accounts for the half-step rotation inside R_mid
        half = exp_so3(0.5 * w * dt)
        J_mid = half.matrix().T @ J_R_bg - 0.5 * right_jacobian_so3(0.5 * w * dt) * dt
        J_p_bg = J_p_bg + J_v_bg * dt - 0.5 * R_mid @ skew(a) @ J_mid * dt * dt
        J_p_ba = J_p_ba + J_v_ba * dt - 0.5 * R_mid * dt * dt
        J_v_bg = J_v_bg - R_mid @ skew(a) @ J_mid * dt
        J_v_ba = J_v_ba - R_mid * dt
        J_R_bg = step.matrix().T @ J_R_bg - Jr * dt

        dp = dp + dv * dt + 0.5 * Ra * dt * dt
        dv = dv + Ra * dt
        dR = dR.compose(step)

    return PreintegratedDelta(
        dR=dR,
        dv=dv,
        dp=dp,
        dt=float(times[-1] - times[0]),
        cov=0.5 * (cov + cov.T),
        bias_at_integration=bias,
        dR_dbg=J_R_bg,
        dv_dbg=J_v_bg,
        dv_dba=J_v_ba,
        dp_dbg=J_p_bg,
        dp_dba=J_p_ba,
    )


def bias_corrected_delta(delta: PreintegratedDelta, bias: ImuBias) -> PreintegratedDelta:
    """First-order update of a delta to a nearby bias point.

    Used inside one optimizer solve; across solves the owning window
    re-integrates from the raw samples instead.
    """
    db = bias.vector() - delta.bias_at_integration.vector()
    if not np.any(db):
        return delta
    dbg, dba = db[:3], db[3:]
    rot_step = delta.dR_dbg @ dbg
    return PreintegratedDelta(
        dR=delta.dR.compose(exp_so3(rot_step)),
        dv=delta.dv + delta.dv_dbg @ dbg + delta.dv_dba @ dba,
        dp=delta.dp + delta.dp_dbg @ dbg + delta.dp_dba @ dba,
        dt=delta.dt,
        cov=delta.cov,
        bias_at_integration=bias,
        dR_dbg=right_jacobian_so3(rot_step) @ delta.dR_dbg,
        dv_dbg=delta.dv_dbg,
        dv_dba=delta.dv_dba,
        dp_dbg=delta.dp_dbg,
        dp_dba=delta.dp_dba,
    )


def compose_deltas(d1: PreintegratedDelta, d2: PreintegratedDelta) -> PreintegratedDelta:
    """Chain two consecutive windows; covariances and bias Jacobians are dropped."""
    R1 = d1.dR.matrix()
    return PreintegratedDelta(
        dR=d1.dR.compose(d2.dR),
        dv=d1.dv + R1 @ d2.dv,
        dp=d1.dp + d1.dv * d2.dt + R1 @ d2.dp,
        dt=d1.dt + d2.dt,
        cov=np.zeros((9, 9)),
        bias_at_integration=d1.bias_at_integration,
    )


def predict(state: NavState, delta: PreintegratedDelta, params: ImuNoiseParams) -> NavState:
    """Propagate a nav state through a preintegrated increment."""
    g = params.gravity
    Ri = state.pose.rotation
    dt = delta.dt
    pose = Pose(
        Ri.compose(delta.dR),
        state.pose.translation + state.velocity * dt + 0.5 * g * dt * dt + Ri.apply(delta.dp),
    )
    vel = state.velocity + g * dt + Ri.apply(delta.dv)
    return NavState(pose, vel)


def imu_residual(
    si: NavState, sj: NavState, delta: PreintegratedDelta, params: ImuNoiseParams
) -> np.ndarray:
    """Stacked [rotation, velocity, position] preintegration residual."""
    g = params.gravity
    dt = delta.dt
    Ri = si.pose.rotation
    Rj = sj.pose.rotation
    RiT = Ri.inverse()
    r_rot = log_so3(delta.dR.inverse().compose(RiT.compose(Rj)))
    r_vel = RiT.apply(sj.velocity - si.velocity - g * dt) - delta.dv
    r_pos = (
        RiT.apply(
            sj.pose.translation
            - si.pose.translation
            - si.velocity * dt
            - 0.5 * g * dt * dt
        )
        - delta.dp
    )
    return np.concatenate([r_rot, r_vel, r_pos])


def imu_residual_jacobians(
    si: NavState, sj: NavState, delta: PreintegratedDelta, params: ImuNoiseParams
) -> dict[str, np.ndarray]:
    """Analytic Jacobians of imu_residual.

    Keys: 'pose_i' (9x6), 'vel_i' (9x3), 'pose_j' (9x6), 'vel_j' (9x3),
    'bias_i' (9x6, [gyro, accel]); pose blocks are ordered [rotation,
    translation] in the split retraction coordinates.
    """
    r = imu_residual(si, sj, delta, params)
    r_rot = r[0:3]
    Ri = si.pose.rotation.matrix()
    Rj = sj.pose.rotation.matrix()
    dt = delta.dt
    Jr_inv = right_jacobian_inv_so3(r_rot)
    E0 = exp_so3(r_rot).matrix()

    J_pose_i = np.zeros((9, 6))
    J_pose_j = np.zeros((9, 6))
    J_vel_i = np.zeros((9, 3))
    J_vel_j = np.zeros((9, 3))
    J_bias_i = np.zeros((9, 6))

    J_pose_i[0:3, 0:3] = -Jr_inv @ Rj.T @ Ri
    J_pose_j[0:3, 0:3] = Jr_inv
    J_bias_i[0:3, 0:3] = -Jr_inv @ E0.T @ delta.dR_dbg

    J_pose_i[3:6, 0:3] = skew(r[3:6] + delta.dv)
    J_vel_i[3:6, :] = -Ri.T
    J_vel_j[3:6, :] = Ri.T
    J_bias_i[3:6, 0:3] = -delta.dv_dbg
    J_bias_i[3:6, 3:6] = -delta.dv_dba

    J_pose_i[6:9, 0:3] = skew(r[6:9] + delta.dp)
    J_pose_i[6:9, 3:6] = -np.eye(3)
    J_pose_j[6:9, 3:6] = Ri.T @ Rj
    J_vel_i[6:9, :] = -Ri.T * dt
    J_bias_i[6:9, 0:3] = -delta.dp_dbg
    J_bias_i[6:9, 3:6] = -delta.dp_dba

    return {
        "pose_i": J_pose_i,
        "vel_i": J_vel_i,
        "pose_j": J_pose_j,
        "vel_j": J_vel_j,
        "bias_i": J_bias_i,
    }

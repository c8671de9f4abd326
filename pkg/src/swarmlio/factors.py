"""Factor-graph building blocks and a sparse Levenberg-Marquardt solver.

Variables are keyed entries in a Values map: Pose (6-dof, split
retraction, tangent ordered [rotation, translation]) or plain vectors
(velocity, bias). Factors expose whitened residuals and analytic
Jacobians; optimization and Schur-complement marginalization work on any
mix of them.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .geometry import (
    Pose,
    local_coordinates,
    pose_log,
    retract,
    right_jacobian_inv_so3,
    skew,
)
from .imu import (
    ImuBias,
    ImuNoiseParams,
    NavState,
    PreintegratedDelta,
    bias_corrected_delta,
    imu_residual,
    imu_residual_jacobians,
)

Key = tuple


def key_dim(value) -> int:
    if isinstance(value, Pose):
        return 6
    return int(np.asarray(value).size)


def retract_value(value, delta: np.ndarray):
    if isinstance(value, Pose):
        return retract(value, delta)
    return np.asarray(value) + delta


def local_value(ref, value) -> np.ndarray:
    """Tangent difference of `value` relative to `ref` (inverse of retract_value)."""
    if isinstance(ref, Pose):
        return local_coordinates(ref, value)
    return np.asarray(value) - np.asarray(ref)


def local_value_jacobian(ref, value) -> np.ndarray:
    """d local_value(ref, value + eps) / d eps, in the split coordinates."""
    if isinstance(ref, Pose):
        d = local_coordinates(ref, value)
        D = np.zeros((6, 6))
        D[:3, :3] = right_jacobian_inv_so3(d[:3])
        D[3:, 3:] = ref.rotation.matrix().T @ value.rotation.matrix()
        return D
    return np.eye(key_dim(ref))


def sqrt_info_from_cov(cov: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Upper-triangular S with S^T S = cov^-1; tiny diagonal floor for rank safety."""
    cov = np.asarray(cov, dtype=float)
    cov = 0.5 * (cov + cov.T) + floor * np.eye(len(cov))
    L = np.linalg.cholesky(np.linalg.inv(cov))
    return L.T


def diag_sqrt_info(sigmas) -> np.ndarray:
    s = np.asarray(sigmas, dtype=float)
    return np.diag(1.0 / s)


class PriorFactor:
    def __init__(self, key: Key, mean: Pose, sqrt_info: np.ndarray):
        self.keys = [key]
        self.mean = mean
        self.sqrt_info = sqrt_info
        self.dim = 6

    def residual(self, values) -> np.ndarray:
        return self.sqrt_info @ local_coordinates(self.mean, values[self.keys[0]])

    def jacobians(self, values):
        X = values[self.keys[0]]
        r = local_coordinates(self.mean, X)
        J = np.zeros((6, 6))
        J[:3, :3] = right_jacobian_inv_so3(r[:3])
        J[3:, 3:] = self.mean.rotation.matrix().T @ X.rotation.matrix()
        return [self.sqrt_info @ J]


class VectorPriorFactor:
    def __init__(self, key: Key, mean: np.ndarray, sqrt_info: np.ndarray):
        self.keys = [key]
        self.mean = np.asarray(mean, dtype=float)
        self.sqrt_info = sqrt_info
        self.dim = len(self.mean)

    def residual(self, values) -> np.ndarray:
        return self.sqrt_info @ (np.asarray(values[self.keys[0]]) - self.mean)

    def jacobians(self, values):
        return [self.sqrt_info.copy()]


def between_residual(xi: Pose, xj: Pose, z: Pose) -> np.ndarray:
    """Local coordinates of z^-1 * xi^-1 * xj (zero when z == between(xi, xj))."""
    return pose_log(z.inverse().compose(xi.inverse()).compose(xj))


def between_jacobians(xi: Pose, xj: Pose, z: Pose):
    A = xi.inverse().compose(xj)
    E = z.inverse().compose(A)
    r = pose_log(E)
    Jri = right_jacobian_inv_so3(r[:3])
    RzT = z.rotation.matrix().T
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[:3, :3] = -Jri @ A.rotation.matrix().T
    Ji[3:, :3] = RzT @ skew(A.translation)
    Ji[3:, 3:] = -RzT
    Jj[:3, :3] = Jri
    Jj[3:, 3:] = E.rotation.matrix()
    return Ji, Jj


class BetweenFactor:
    def __init__(self, key_i: Key, key_j: Key, measurement: Pose, sqrt_info: np.ndarray):
        self.keys = [key_i, key_j]
        self.measurement = measurement
        self.sqrt_info = sqrt_info
        self.dim = 6

    def residual(self, values) -> np.ndarray:
        return self.sqrt_info @ between_residual(
            values[self.keys[0]], values[self.keys[1]], self.measurement
        )

    def jacobians(self, values):
        Ji, Jj = between_jacobians(
            values[self.keys[0]], values[self.keys[1]], self.measurement
        )
        return [self.sqrt_info @ Ji, self.sqrt_info @ Jj]


class RangeFactor:
    """Scalar range between the translations of two poses: r = z - |pa - pb|."""

    DEGENERATE_DIST = 1e-6

    def __init__(self, key_a: Key, key_b: Key, z: float, sigma: float):
        if z <= 0 or sigma <= 0:
            raise ValueError("range and sigma must be positive")
        self.keys = [key_a, key_b]
        self.z = float(z)
        self.sigma = float(sigma)
        self.dim = 1

    def residual(self, values) -> np.ndarray:
        pa = values[self.keys[0]].translation
        pb = values[self.keys[1]].translation
        return np.array([(self.z - np.linalg.norm(pa - pb)) / self.sigma])

    def jacobians(self, values):
        Xa, Xb = values[self.keys[0]], values[self.keys[1]]
        diff = Xa.translation - Xb.translation
        dist = np.linalg.norm(diff)
        Ja = np.zeros((1, 6))
        Jb = np.zeros((1, 6))
        if dist < self.DEGENERATE_DIST:
            # coincident endpoints: gradient undefined, drop the factor's
            # influence for this iteration
            return [Ja, Jb]
        u = diff / dist
        Ja[0, 3:] = -(u @ Xa.rotation.matrix()) / self.sigma
        Jb[0, 3:] = (u @ Xb.rotation.matrix()) / self.sigma
        return [Ja, Jb]


class ImuFactor:
    """Preintegration factor over (pose_i, vel_i, pose_j, vel_j, bias_i)."""

    def __init__(self, keys, delta: PreintegratedDelta, params: ImuNoiseParams,
                 cov_floor: float = 1e-10):
        if delta.dt <= 0:
            raise ValueError("preintegrated window must span positive time")
        self.keys = list(keys)
        self.delta = delta
        self.params = params
        self.sqrt_info = sqrt_info_from_cov(delta.cov, floor=cov_floor)
        self.dim = 9

    def _states(self, values):
        si = NavState(values[self.keys[0]], np.asarray(values[self.keys[1]]))
        sj = NavState(values[self.keys[2]], np.asarray(values[self.keys[3]]))
        corrected = bias_corrected_delta(
            self.delta, ImuBias.from_vector(np.asarray(values[self.keys[4]]))
        )
        return si, sj, corrected

    def residual(self, values) -> np.ndarray:
        si, sj, delta = self._states(values)
        return self.sqrt_info @ imu_residual(si, sj, delta, self.params)

    def jacobians(self, values):
        si, sj, delta = self._states(values)
        J = imu_residual_jacobians(si, sj, delta, self.params)
        return [
            self.sqrt_info @ J["pose_i"],
            self.sqrt_info @ J["vel_i"],
            self.sqrt_info @ J["pose_j"],
            self.sqrt_info @ J["vel_j"],
            self.sqrt_info @ J["bias_i"],
        ]


class BiasWalkFactor:
    def __init__(self, key_i: Key, key_j: Key, dt: float, params: ImuNoiseParams,
                 floor: float = 1e-8):
        self.keys = [key_i, key_j]
        sg = max(params.gyro_bias_walk * np.sqrt(max(dt, 1e-9)), floor)
        sa = max(params.accel_bias_walk * np.sqrt(max(dt, 1e-9)), floor)
        self.sqrt_info = diag_sqrt_info([sg] * 3 + [sa] * 3)
        self.dim = 6

    def residual(self, values) -> np.ndarray:
        return self.sqrt_info @ (
            np.asarray(values[self.keys[1]]) - np.asarray(values[self.keys[0]])
        )

    def jacobians(self, values):
        return [-self.sqrt_info, self.sqrt_info.copy()]


class LinearizedPriorFactor:
    """Dense Gaussian prior from marginalization: r = b + sum_k A_k * d_k.

    d_k is the tangent difference between the current estimate and the
    stored linearization value of key k.
    """

    def __init__(self, keys, A_blocks, b, lin_values):
        self.keys = list(keys)
        self.A_blocks = [np.asarray(a) for a in A_blocks]
        self.b = np.asarray(b, dtype=float)
        self.lin_values = dict(lin_values)
        self.dim = len(self.b)

    def residual(self, values) -> np.ndarray:
        r = self.b.copy()
        for key, A in zip(self.keys, self.A_blocks):
            r = r + A @ local_value(self.lin_values[key], values[key])
        return r

    def jacobians(self, values):
        return [
            A @ local_value_jacobian(self.lin_values[key], values[key])
            for key, A in zip(self.keys, self.A_blocks)
        ]


def _index_variables(values):
    offsets = {}
    off = 0
    for key, v in values.items():
        d = key_dim(v)
        offsets[key] = (off, d)
        off += d
    return offsets, off


def _assemble(factors, values, offsets, total, weights):
    rows_i, cols_i, data = [], [], []
    residuals = []
    row = 0
    error = 0.0
    for fi, factor in enumerate(factors):
        w = 1.0 if weights is None else weights[fi]
        r = factor.residual(values)
        error += w * float(r @ r)
        sw = np.sqrt(w)
        jacs = factor.jacobians(values)
        for key, J in zip(factor.keys, jacs):
            off, d = offsets[key]
            rr, cc = np.meshgrid(
                np.arange(row, row + factor.dim), np.arange(off, off + d), indexing="ij"
            )
            rows_i.append(rr.ravel())
            cols_i.append(cc.ravel())
            data.append((sw * J).ravel())
        residuals.append(sw * r)
        row += factor.dim
    if data:
        J = scipy.sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows_i), np.concatenate(cols_i))),
            shape=(row, total),
        ).tocsr()
    else:
        J = scipy.sparse.csr_matrix((0, total))
    r = np.concatenate(residuals) if residuals else np.zeros(0)
    return J, r, error


def graph_error(factors, values, weights=None) -> float:
    total = 0.0
    for fi, factor in enumerate(factors):
        w = 1.0 if weights is None else weights[fi]
        r = factor.residual(values)
        total += w * float(r @ r)
    return total


def solve_lm(
    factors,
    values: dict,
    weights=None,
    max_iterations: int = 50,
    update_tol: float = 1e-9,
    error_decrease_tol: float = 1e-12,
    lambda_init: float = 1e-4,
    lambda_factor: float = 10.0,
):
    """Levenberg-Marquardt over the factor list; returns (values, info).

    info carries: converged flag, iterations, final error, last update norm.
    """
    values = dict(values)
    offsets, total = _index_variables(values)
    converged = False
    last_update = np.inf
    lam = lambda_init
    iterations = 0
    error = graph_error(factors, values, weights)

    while iterations < max_iterations:
        iterations += 1
        J, r, error = _assemble(factors, values, offsets, total, weights)
        H = (J.T @ J).tocsc()
        g = J.T @ r
        diag = H.diagonal()
        diag = np.where(diag < 1e-12, 1e-12, diag)
        accepted = False
        for _ in range(16):
            damped = H + scipy.sparse.diags(lam * diag)
            try:
                if total <= 150:
                    delta = np.linalg.solve(damped.toarray(), -g)
                else:
                    delta = scipy.sparse.linalg.spsolve(damped, -g)
            except Exception:
                lam *= lambda_factor
                continue
            if not np.all(np.isfinite(delta)):
                lam *= lambda_factor
                continue
            trial = {
                key: retract_value(v, delta[offsets[key][0]: offsets[key][0] + offsets[key][1]])
                for key, v in values.items()
            }
            trial_error = graph_error(factors, trial, weights)
            if trial_error <= error:
                values = trial
                last_update = float(np.linalg.norm(delta))
                decrease = error - trial_error
                error = trial_error
                lam = max(lam / lambda_factor, 1e-12)
                accepted = True
                if last_update < update_tol or decrease < error_decrease_tol * max(error, 1.0):
                    converged = True
                break
            lam *= lambda_factor
            if lam > 1e12:
                break
        if not accepted:
            converged = True
            break
        if converged:
            break

    info = {
        "converged": converged,
        "iterations": iterations,
        "error": error,
        "last_update": last_update,
    }
    return values, info


def marginalize(factors, values: dict, marg_keys) -> LinearizedPriorFactor | None:
    """Schur-complement the given keys out of the listed factors.

    `factors` must be exactly the factors touching marg_keys; the result is
    a dense linear prior over the remaining (separator) keys at the current
    linearization point. Returns None when no separator remains.
    """
    marg_keys = list(marg_keys)
    sep_keys = []
    for f in factors:
        for k in f.keys:
            if k not in marg_keys and k not in sep_keys:
                sep_keys.append(k)
    ordered = marg_keys + sep_keys
    sub_values = {k: values[k] for k in ordered}
    offsets, total = _index_variables(sub_values)
    J, r, _ = _assemble(factors, sub_values, offsets, total, None)
    J = J.toarray()
    H = J.T @ J
    g = J.T @ r
    m = sum(key_dim(values[k]) for k in marg_keys)
    Hmm = H[:m, :m]
    Hms = H[:m, m:]
    Hss = H[m:, m:]
    gm = g[:m]
    gs = g[m:]
    # tiny prior on the marginalized block guards rank deficiency
    Hmm_inv = np.linalg.inv(Hmm + 1e-12 * np.eye(m))
    H_new = Hss - Hms.T @ Hmm_inv @ Hms
    g_new = gs - Hms.T @ Hmm_inv @ gm
    if H_new.size == 0:
        return None

    H_new = 0.5 * (H_new + H_new.T)
    vals, vecs = np.linalg.eigh(H_new)
    keep = vals > max(vals.max(), 0.0) * 1e-12 if vals.size else vals > 0
    if not np.any(keep):
        return None
    A = (vecs[:, keep] * np.sqrt(vals[keep])).T  # A^T A = H_new
    # b solves A^T b = g_new in the least-squares sense
    b = vecs[:, keep].T @ g_new / np.sqrt(vals[keep])

    A_blocks = []
    for k in sep_keys:
        d = key_dim(values[k])
        off = offsets[k][0] - m
        A_blocks.append(A[:, off: off + d])
    lin = {k: values[k] for k in sep_keys}
    return LinearizedPriorFactor(sep_keys, A_blocks, b, lin)

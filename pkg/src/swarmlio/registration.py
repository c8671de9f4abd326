"""Intensity-aided direct scan-to-map registration (plane-weighted GICP).

Correspondences come from a two-stage search: positional k-nearest
neighbors, re-ranked by intensity similarity. Each correspondence is
weighted by the inverse of the combined local covariances, with
eigenvalues regularized to (1, 1, eps) so that flat structure dominates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import Point, PointCloud
from .geometry import Pose, retract, skew


@dataclass(frozen=True)
class GicpConfig:
    k_pos: int = 10
    k_out: int = 5
    cov_k: int = 10
    cov_eps: float = 1e-3
    max_corr_dist: float = 2.0
    min_correspondences: int = 10
    max_iterations: int = 64
    update_tol: float = 1e-6
    error_decrease_tol: float = 1e-9
    lm_lambda_init: float = 1e-4
    lm_lambda_factor: float = 10.0


@dataclass
class AlignResult:
    transform: Pose
    fitness: float  # mean squared correspondence distance, m^2
    iterations: int
    converged: bool
    objective_history: list = field(default_factory=list)


def estimate_covariances(cloud: PointCloud, k: int) -> np.ndarray:
    """Per-point covariance of the k nearest neighbors, plane-regularized.

    The sample covariance (1/(k-1) normalization) is eigen-decomposed and
    rebuilt with eigenvalues (eps, 1, 1), smallest direction first.
    """
    n = len(cloud)
    if k > n:
        raise ValueError("insufficient points")
    tree = cKDTree(cloud.positions)
    _, idx = tree.query(cloud.positions, k=k)
    if k == 1:
        idx = idx[:, None]
    return regularize_covariances(sample_covariances(cloud.positions, idx))


def sample_covariances(positions: np.ndarray, neighbor_idx: np.ndarray) -> np.ndarray:
    nbrs = positions[neighbor_idx]  # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    k = neighbor_idx.shape[1]
    denom = max(k - 1, 1)
    return np.einsum("nki,nkj->nij", centered, centered) / denom


def regularize_covariances(covs: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    vals, vecs = np.linalg.eigh(covs)  # ascending eigenvalues
    reg = np.empty_like(vals)
    reg[..., 0] = eps
    reg[..., 1] = 1.0
    reg[..., 2] = 1.0
    return np.einsum("nij,nj,nkj->nik", vecs, reg, vecs)


class NeighborIndex:
    """Immutable spatial index over a cloud with intensities and covariances."""

    def __init__(self, cloud: PointCloud, cfg: GicpConfig = GicpConfig()):
        if len(cloud) == 0:
            raise ValueError("cannot index an empty cloud")
        self.cloud = cloud
        self.positions = cloud.positions
        self.intensities = cloud.intensities
        self.tree = cKDTree(self.positions)
        k = min(cfg.cov_k, len(cloud))
        self.covariances = estimate_covariances(cloud, k)
        self.cfg = cfg

    def __len__(self) -> int:
        return len(self.positions)


def two_stage_knn(
    index: NeighborIndex, q: Point, k_pos: int, k_out: int
) -> tuple[np.ndarray, bool]:
    """Positional kNN, re-ranked by |intensity difference|.

    Stage 1 orders by (squared distance, point index); stage 2 is a stable
    sort by intensity gap, so positional rank breaks intensity ties. Returns
    (indices, short) where short flags fewer than k_out available points.
    """
    if k_out > k_pos:
        raise ValueError("k_out must be <= k_pos")
    n = len(index)
    qp = np.asarray(q.position, dtype=float)
    if n <= k_pos:
        cand = np.arange(n)
        d2 = np.sum((index.positions - qp) ** 2, axis=1)
    else:
        d, _ = index.tree.query(qp, k=k_pos)
        d = np.atleast_1d(d)
        # re-collect within the k-th distance so exact ties are index-ordered
        cand = np.array(sorted(index.tree.query_ball_point(qp, d[-1] * (1 + 1e-12))))
        d2 = np.sum((index.positions[cand] - qp) ** 2, axis=1)
    order = np.lexsort((cand, d2))[:k_pos]
    stage1 = cand[order]
    gaps = np.abs(index.intensities[stage1] - q.intensity)
    stage2 = stage1[np.argsort(gaps, kind="stable")][:k_out]
    return stage2, len(stage2) < k_out


def two_stage_knn_batch(
    index: NeighborIndex, positions: np.ndarray, intensities: np.ndarray,
    k_pos: int, k_out: int,
) -> np.ndarray:
    """Vectorized top-k_out of the two-stage rule for many queries.

    Same ranking rule as two_stage_knn except exact distance ties fall to
    the tree's ordering; returns (M, k_out) indices (clamped when the index
    holds fewer points).
    """
    n = len(index)
    k = min(k_pos, n)
    _, idx = index.tree.query(positions, k=k)
    if k == 1:
        idx = idx[:, None]
    gaps = np.abs(index.intensities[idx] - intensities[:, None])
    order = np.argsort(gaps, axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)[:, : min(k_out, k)]


def _correspondences(index, p_world, intensities, cfg):
    # the intensity stage prunes material mismatches; the correspondence is
    # the geometrically nearest of the surviving candidates
    cand = two_stage_knn_batch(index, p_world, intensities, cfg.k_pos, cfg.k_out)
    d2 = np.sum((p_world[:, None, :] - index.positions[cand]) ** 2, axis=2)
    pick = np.argmin(d2, axis=1)
    rows = np.arange(len(cand))
    corr = cand[rows, pick]
    dist2 = d2[rows, pick]
    mask = dist2 <= cfg.max_corr_dist**2
    return corr, mask, dist2


def fitness(source: PointCloud, target: NeighborIndex, transform: Pose,
            cfg: GicpConfig = GicpConfig()) -> float:
    """Mean squared distance of in-range correspondences; +inf when none."""
    if len(source) == 0 or len(target) == 0:
        return float("inf")
    p_world = transform.apply(source.positions)
    _, mask, dist2 = _correspondences(target, p_world, source.intensities, cfg)
    if not np.any(mask):
        return float("inf")
    return float(dist2[mask].mean())


def align_gicp(
    source: PointCloud,
    target: NeighborIndex,
    init: Pose,
    cfg: GicpConfig = GicpConfig(),
    source_covariances: np.ndarray | None = None,
) -> AlignResult:
    """Iteratively minimize the weighted correspondence error from init.

    The recorded objective history holds (error_before, error_after) pairs
    per accepted step, both evaluated on that step's frozen correspondences
    and weights.
    """
    if len(source) == 0:
        raise ValueError("empty source cloud")
    if len(target) == 0:
        raise ValueError("empty target index")

    src = source.positions
    src_int = source.intensities
    if source_covariances is None:
        k = min(cfg.cov_k, len(source))
        source_covariances = estimate_covariances(source, k)

    T = init
    lam = cfg.lm_lambda_init
    history: list[tuple[float, float]] = []
    converged = False
    last_update = np.inf
    iterations = 0

    while iterations < cfg.max_iterations:
        iterations += 1
        R = T.rotation.matrix()
        p_world = src @ R.T + T.translation
        corr, mask, _ = _correspondences(target, p_world, src_int, cfg)
        m_count = int(mask.sum())
        if m_count < cfg.min_correspondences:
            return AlignResult(T, fitness(source, target, T, cfg), iterations, False, history)

        n_b = src[mask]
        m_pts = target.positions[corr[mask]]
        W = np.linalg.inv(
            target.covariances[corr[mask]]
            + np.einsum("ij,njk,lk->nil", R, source_covariances[mask], R)
        )
        d = p_world[mask] - m_pts

        # residual jacobian wrt [dtheta, dt]: [-R*skew(n), R]
        Jn = -np.einsum("ij,njk->nik", R, skew_batch(n_b))
        Wd = np.einsum("nij,nj->ni", W, d)
        err = float(np.einsum("ni,ni->", d, Wd))
        H = np.zeros((6, 6))
        g = np.zeros(6)
        WJn = np.einsum("nij,njk->nik", W, Jn)
        H[:3, :3] = np.einsum("nji,njk->ik", Jn, WJn)
        H[:3, 3:] = np.einsum("nji,njk->ik", Jn, W) @ R
        H[3:, :3] = H[:3, 3:].T
        H[3:, 3:] = R.T @ W.sum(axis=0) @ R
        g[:3] = np.einsum("nji,nj->i", Jn, Wd)
        g[3:] = R.T @ Wd.sum(axis=0)

        def frozen_error(T_try: Pose) -> float:
            dd = n_b @ T_try.rotation.matrix().T + T_try.translation - m_pts
            return float(np.einsum("ni,nij,nj->", dd, W, dd))

        accepted = False
        diag = np.diag(H).copy()
        diag[diag < 1e-12] = 1e-12
        for _ in range(16):
            try:
                delta = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= cfg.lm_lambda_factor
                continue
            T_try = retract(T, delta)
            err_try = frozen_error(T_try)
            if err_try < err:
                T = T_try
                lam = max(lam / cfg.lm_lambda_factor, 1e-12)
                history.append((err, err_try))
                last_update = float(np.linalg.norm(delta))
                accepted = True
                if last_update < cfg.update_tol or err - err_try < cfg.error_decrease_tol:
                    converged = True
                break
            lam *= cfg.lm_lambda_factor
            if lam > 1e10:
                break
        if not accepted:
            # no downhill step even under heavy damping: stationary point
            converged = True
            break
        if converged:
            break

    if iterations >= cfg.max_iterations and last_update > 100 * cfg.update_tol:
        converged = False
    return AlignResult(T, fitness(source, target, T, cfg), iterations, converged, history)


def skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out

"""Centralized back-end: global graph over all robots with robust solving.

Ingests per-robot keyframe streams (relative odometry, descriptors,
clouds, UWB ranges), detects and verifies loop closures, gates range
outliers against current estimates, screens inter-robot loops by pairwise
consistency (max clique), and solves the joint graph with a graduated
non-convexity wrapper around Levenberg-Marquardt. Robots whose reference
frames have not merged yet are solved as separately anchored components.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.stats import chi2

from .cloud import PointCloud
from .factors import (
    BetweenFactor,
    PriorFactor,
    RangeFactor,
    diag_sqrt_info,
    graph_error,
    solve_lm,
    sqrt_info_from_cov,
)
from .geometry import Pose, adjoint, between, pose_log
from .place_recognition import (
    DescriptorDatabase,
    LoopFactorMeasurement,
    ScanContext,
    ScanContextConfig,
    verify,
)
from .registration import GicpConfig

VarKey = tuple[int, int]  # (robot_id, keyframe_id)


class GraphDisconnectedError(RuntimeError):
    def __init__(self, unreachable):
        self.unreachable = sorted(unreachable)
        super().__init__(f"graph disconnected; unreachable robots: {self.unreachable}")


@dataclass(frozen=True)
class OdomEdge:
    robot: int
    from_kf: int
    to_kf: int
    z: Pose
    cov: np.ndarray


@dataclass(frozen=True)
class LoopEdge:
    a: VarKey
    b: VarKey
    z: Pose
    cov: np.ndarray
    fitness: float

    @property
    def inter_robot(self) -> bool:
        return self.a[0] != self.b[0]


@dataclass(frozen=True)
class RangeEdge:
    a: VarKey
    b: VarKey
    z: float
    sigma: float
    t: float


@dataclass
class BackendConfig:
    range_gate: float = 0.2  # m, strict inequality
    range_sigma: float = 0.1  # m
    range_assoc_window: float = 0.1  # s
    pcm_confidence: float = 0.95
    pcm_exact_limit: int = 15
    gnc_confidence: float = 0.9973  # 3-sigma equivalent per factor type
    gnc_mu_factor: float = 1.4
    gnc_weight_tol: float = 1e-3
    gnc_max_outer: int = 100
    lm_max_iterations: int = 30
    anchor_sigma: float = 1e-4
    max_loop_verifications: int = 2
    gicp: GicpConfig = field(default_factory=GicpConfig)
    descriptor: ScanContextConfig = field(default_factory=ScanContextConfig)


def range_residual(pa: np.ndarray, pb: np.ndarray, z: float) -> float:
    """Metric range residual z - |pa - pb|."""
    return float(z - np.linalg.norm(np.asarray(pa) - np.asarray(pb)))


def gate_range(z: float, pa_hat: np.ndarray, pb_hat: np.ndarray,
               threshold: float = 0.2) -> bool:
    """Accept iff the residual magnitude is strictly below the gate.

    A 1e-9 guard keeps measurements that round to the boundary on the
    reject side, so the strict inequality is deterministic under floats.
    """
    return abs(range_residual(pa_hat, pb_hat, z)) < threshold - 1e-9


@dataclass
class GlobalGraph:
    """Poses keyed by (robot, keyframe) plus odometry/loop/range factors."""

    variables: dict[VarKey, Pose] = field(default_factory=dict)
    odometry: list[OdomEdge] = field(default_factory=list)
    loops: list[LoopEdge] = field(default_factory=list)
    ranges: list[RangeEdge] = field(default_factory=list)
    prior_key: VarKey | None = None
    prior_pose: Pose = field(default_factory=Pose.identity)

    def robots(self) -> list[int]:
        return sorted({k[0] for k in self.variables})


# --------------------------------------------------------------------------
# pairwise consistency (max clique over the consistency graph)
# --------------------------------------------------------------------------


def _compose_cov(z1: Pose, cov1: np.ndarray, z2: Pose, cov2: np.ndarray):
    """Covariance of z1*z2 for independent right-perturbed factors."""
    ad = adjoint(z2.inverse())
    return z1.compose(z2), ad @ cov1 @ ad.T + cov2


def _invert_with_cov(z: Pose, cov: np.ndarray):
    ad = adjoint(z)
    return z.inverse(), ad @ cov @ ad.T


class _Chain:
    """Cumulative odometry of one robot for relative queries with covariance."""

    def __init__(self, edges: list[OdomEdge]):
        self.ids = []
        self.poses = {}
        self.covs = {}
        if not edges:
            return
        ordered = sorted(edges, key=lambda e: e.from_kf)
        start = ordered[0].from_kf
        self.ids = [start]
        self.poses[start] = Pose.identity()
        self.covs[start] = np.zeros((6, 6))
        for e in ordered:
            p, c = _compose_cov(self.poses[e.from_kf], self.covs[e.from_kf], e.z, e.cov)
            self.poses[e.to_kf] = p
            self.covs[e.to_kf] = c
            self.ids.append(e.to_kf)

    def relative(self, i: int, j: int):
        """Pose of keyframe j in keyframe i's frame with composed covariance."""
        pi, ci = self.poses[i], self.covs[i]
        pj, cj = self.poses[j], self.covs[j]
        pi_inv, ci_inv = _invert_with_cov(pi, ci)
        return _compose_cov(pi_inv, ci_inv, pj, cj)


def _pair_consistent(l1: LoopEdge, l2: LoopEdge, chains, threshold: float) -> bool:
    a1, b1 = l1.a, l1.b
    a2, b2 = l2.a, l2.b
    A, covA = chains[a1[0]].relative(a1[1], a2[1])
    B, covB = chains[b1[0]].relative(b2[1], b1[1])
    z1_inv, cov1_inv = _invert_with_cov(l1.z, l1.cov)
    e, cov = _compose_cov(z1_inv, cov1_inv, A, covA)
    e, cov = _compose_cov(e, cov, l2.z, l2.cov)
    e, cov = _compose_cov(e, cov, B, covB)
    r = pose_log(e)
    try:
        m = float(r @ np.linalg.solve(cov + 1e-12 * np.eye(6), r))
    except np.linalg.LinAlgError:
        return False
    return m <= threshold


def _max_clique_exact(adj: np.ndarray) -> tuple[int, ...]:
    """Bron-Kerbosch with pivoting; ties resolved to the lexicographically
    smallest index set."""
    n = len(adj)
    best: list[tuple[int, ...]] = []

    def neighbors(v):
        return {u for u in range(n) if u != v and adj[v, u]}

    def expand(r: set, p: set, x: set):
        nonlocal best
        if not p and not x:
            cand = tuple(sorted(r))
            if not best or len(cand) > len(best[0]) or (
                len(cand) == len(best[0]) and cand < best[0]
            ):
                best = [cand]
            return
        pivot = max(sorted(p | x), key=lambda v: len(neighbors(v) & p))
        for v in sorted(p - neighbors(pivot)):
            expand(r | {v}, p & neighbors(v), x & neighbors(v))
            p = p - {v}
            x = x | {v}

    expand(set(), set(range(n)), set())
    return best[0] if best else ()


def _max_clique_greedy(adj: np.ndarray) -> tuple[int, ...]:
    """Degeneracy-order greedy heuristic for large candidate sets."""
    n = len(adj)
    degree = adj.sum(axis=1)
    order = sorted(range(n), key=lambda v: (-degree[v], v))
    clique: list[int] = []
    for v in order:
        if all(adj[v, u] for u in clique):
            clique.append(v)
    return tuple(sorted(clique))


def pcm_filter(candidates: list[LoopEdge], odometry: list[OdomEdge],
               cfg: BackendConfig = BackendConfig()) -> list[LoopEdge]:
    """Largest pairwise-consistent subset of inter-robot loops.

    Consistency of two loops on the same robot pair: the cycle
    (loop1^-1, odometry a, loop2, odometry b) must have Mahalanobis norm
    within the chi-square bound under the composed covariances. Loops on
    different robot pairs are screened independently and unioned.
    """
    if not candidates:
        return []
    threshold = chi2.ppf(cfg.pcm_confidence, 6)
    by_robot: dict[int, list[OdomEdge]] = {}
    for e in odometry:
        by_robot.setdefault(e.robot, []).append(e)
    chains = {r: _Chain(edges) for r, edges in by_robot.items()}

    groups: dict[tuple[int, int], list[int]] = {}
    normalized: list[LoopEdge] = []
    for idx, loop in enumerate(candidates):
        l = loop
        if l.a[0] > l.b[0]:
            z_inv, cov_inv = _invert_with_cov(l.z, l.cov)
            l = LoopEdge(l.b, l.a, z_inv, cov_inv, l.fitness)
        normalized.append(l)
        groups.setdefault((l.a[0], l.b[0]), []).append(idx)

    accepted: set[int] = set()
    for pair_idx in groups.values():
        n = len(pair_idx)
        adj = np.eye(n, dtype=bool)
        for i, j in combinations(range(n), 2):
            ok = _pair_consistent(
                normalized[pair_idx[i]], normalized[pair_idx[j]], chains, threshold
            )
            adj[i, j] = adj[j, i] = ok
        if n <= cfg.pcm_exact_limit:
            clique = _max_clique_exact(adj)
        else:
            clique = _max_clique_greedy(adj)
        accepted.update(pair_idx[i] for i in clique)
    return [candidates[i] for i in sorted(accepted)]


# --------------------------------------------------------------------------
# GNC-robust optimization
# --------------------------------------------------------------------------


@dataclass
class GncResult:
    values: dict[VarKey, Pose]
    loop_weights: np.ndarray
    range_weights: np.ndarray
    converged: bool
    outer_iterations: int

    def inlier_mask(self, threshold: float = 0.5):
        return self.loop_weights >= threshold, self.range_weights >= threshold


def _check_connectivity(graph: GlobalGraph):
    robots = graph.robots()
    if not robots:
        return
    link: dict[int, set[int]] = {r: set() for r in robots}
    for loop in graph.loops:
        link[loop.a[0]].add(loop.b[0])
        link[loop.b[0]].add(loop.a[0])
    for rng in graph.ranges:
        link[rng.a[0]].add(rng.b[0])
        link[rng.b[0]].add(rng.a[0])
    seed = graph.prior_key[0] if graph.prior_key else robots[0]
    seen = {seed}
    stack = [seed]
    while stack:
        r = stack.pop()
        for nxt in sorted(link[r]):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    unreachable = set(robots) - seen
    if unreachable:
        raise GraphDisconnectedError(unreachable)


def _graph_factors(graph: GlobalGraph, cfg: BackendConfig):
    ls = [
        PriorFactor(graph.prior_key, graph.prior_pose, diag_sqrt_info([cfg.anchor_sigma] * 6))
    ]
    for e in graph.odometry:
        ls.append(
            BetweenFactor((e.robot, e.from_kf), (e.robot, e.to_kf), e.z, sqrt_info_from_cov(e.cov))
        )
    robust = []
    eps2 = []
    loop_eps = chi2.ppf(cfg.gnc_confidence, 6)
    range_eps = chi2.ppf(cfg.gnc_confidence, 1)
    for l in graph.loops:
        robust.append(BetweenFactor(l.a, l.b, l.z, sqrt_info_from_cov(l.cov)))
        eps2.append(loop_eps)
    for r in graph.ranges:
        robust.append(RangeFactor(r.a, r.b, r.z, r.sigma))
        eps2.append(range_eps)
    return ls, robust, np.array(eps2)


def _tls_weights(rho: np.ndarray, mu: float) -> np.ndarray:
    w = np.empty_like(rho)
    ub = (mu + 1.0) / mu
    lb = mu / (mu + 1.0)
    hi = rho >= ub
    lo = rho <= lb
    mid = ~hi & ~lo
    w[hi] = 0.0
    w[lo] = 1.0
    w[mid] = np.sqrt(mu * (mu + 1.0) / rho[mid]) - mu
    return np.clip(w, 0.0, 1.0)


def gnc_optimize(graph: GlobalGraph, cfg: BackendConfig = BackendConfig()) -> GncResult:
    """Robust solve: odometry and prior stay least-squares; loop and range
    factors run under a truncated-least-squares surrogate with graduated
    non-convexity (mu grows by the configured factor per outer round)."""
    if graph.prior_key is None:
        raise ValueError("graph needs exactly one prior")
    _check_connectivity(graph)
    ls, robust, eps2 = _graph_factors(graph, cfg)
    values = dict(graph.variables)
    n_loops = len(graph.loops)

    if not robust:
        values, info = solve_lm(ls, values, max_iterations=cfg.lm_max_iterations)
        return GncResult(values, np.zeros(0), np.zeros(0), info["converged"], 0)

    def rho_of(vals) -> np.ndarray:
        return np.array(
            [float(f.residual(vals) @ f.residual(vals)) for f in robust]
        ) / eps2

    def weighted_solve(w, vals, tight=False):
        weights = [1.0] * len(ls) + list(w)
        return solve_lm(
            ls + robust,
            vals,
            weights=weights,
            max_iterations=cfg.lm_max_iterations * (2 if tight else 1),
            update_tol=1e-10 if tight else 1e-8,
        )

    rho = rho_of(values)
    if rho.max() <= 1.0:
        values, info = weighted_solve(np.ones(len(robust)), values, tight=True)
        w = np.ones(len(robust))
        return GncResult(values, w[:n_loops], w[n_loops:], info["converged"], 0)

    mu = max(1.0 / (2.0 * rho.max() - 1.0), 1e-6)
    weights = _tls_weights(rho, mu)
    converged = False
    outer = 0
    for outer in range(1, cfg.gnc_max_outer + 1):
        values, _ = weighted_solve(weights, values)
        rho = rho_of(values)
        new_weights = _tls_weights(rho, mu)
        change = np.abs(new_weights - weights).max()
        weights = new_weights
        if change < cfg.gnc_weight_tol:
            converged = True
            break
        mu *= cfg.gnc_mu_factor

    # final polishing pass on the converged weights
    values, info = weighted_solve(weights, values, tight=True)
    return GncResult(
        values, weights[:n_loops], weights[n_loops:], converged and info["converged"], outer
    )


def merge_reference_frames(graph: GlobalGraph, components: dict[int, int],
                           loop: LoopEdge) -> dict[int, int]:
    """Re-express the later component in the anchor component's frame.

    components maps robot -> component root (min robot id in component).
    Returns the updated mapping; a loop inside one component is a no-op.
    """
    ra, rb = loop.a[0], loop.b[0]
    ca, cb = components[ra], components[rb]
    if ca == cb:
        return components
    # the component with the smaller root absorbs the other
    if ca < cb:
        winner, loser, anchor_key, other_key, z = ca, cb, loop.a, loop.b, loop.z
    else:
        winner, loser, anchor_key, other_key, z = cb, ca, loop.b, loop.a, loop.z.inverse()
    target = graph.variables[anchor_key].compose(z)
    G = target.compose(graph.variables[other_key].inverse())
    for key in graph.variables:
        if components[key[0]] == loser:
            graph.variables[key] = G.compose(graph.variables[key])
    return {r: winner if c == loser else c for r, c in components.items()}


# --------------------------------------------------------------------------
# server-side session state
# --------------------------------------------------------------------------


@dataclass
class _KeyframeRecord:
    robot: int
    kf_id: int
    t: float
    cloud: PointCloud
    descriptor: ScanContext


@dataclass
class _PendingRange:
    robot: int  # reporting robot
    peer: int
    t: float
    z: float


@dataclass
class BackendStats:
    loops_detected: int = 0
    loops_pcm_accepted: int = 0
    loops_gnc_inlier: int = 0
    ranges_received: int = 0
    ranges_gated: int = 0
    ranges_gnc_inlier: int = 0
    solves: int = 0


class ServerBackend:
    """Ingestion and robust solving for one collaborative session."""

    def __init__(self, cfg: BackendConfig = BackendConfig()):
        self.cfg = cfg
        self.graph = GlobalGraph()
        self.db = DescriptorDatabase(cfg.descriptor)
        self.records: dict[VarKey, _KeyframeRecord] = {}
        self.kf_times: dict[int, list[tuple[float, int]]] = {}
        self.components: dict[int, int] = {}
        self.active: set[int] = set()
        self.pending_ranges: list[_PendingRange] = []
        self.range_pairs: set[tuple[VarKey, VarKey]] = set()
        self.intra_loops: list[LoopEdge] = []
        self.inter_loops: list[LoopEdge] = []
        self.stats = BackendStats()
        self._last_pcm: list[LoopEdge] = []

    # -- membership -----------------------------------------------------------
    def register_robot(self, robot_id: int):
        if robot_id in self.components:
            # rejoin keeps the existing namespace
            self.active.add(robot_id)
            return
        self.components[robot_id] = robot_id
        self.active.add(robot_id)
        self.kf_times[robot_id] = []

    def deregister_robot(self, robot_id: int):
        self.active.discard(robot_id)

    # -- ingestion --------------------------------------------------------------
    def ingest_keyframe(
        self,
        robot_id: int,
        kf_id: int,
        t: float,
        odom_z: Pose | None,
        odom_cov: np.ndarray | None,
        descriptor: ScanContext,
        cloud: PointCloud,
        ranges: list[tuple[int, float, float]] = (),
    ):
        """Extend the robot's chain and run loop detection on the keyframe.

        ranges entries are (peer_robot_id, timestamp, measured_distance).
        """
        if robot_id not in self.active:
            raise ValueError(f"robot {robot_id} is not registered")
        key = (robot_id, kf_id)
        if key in self.graph.variables:
            return
        if odom_z is None:
            estimate = Pose.identity()
            if self.graph.prior_key is None:
                self.graph.prior_key = key
                self.graph.prior_pose = estimate
        else:
            prev = (robot_id, kf_id - 1)
            if prev not in self.graph.variables:
                raise ValueError(f"odometry arrived out of order for {key}")
            estimate = self.graph.variables[prev].compose(odom_z)
            self.graph.odometry.append(OdomEdge(robot_id, kf_id - 1, kf_id, odom_z, odom_cov))
        self.graph.variables[key] = estimate
        self.records[key] = _KeyframeRecord(robot_id, kf_id, t, cloud, descriptor)
        self.kf_times[robot_id].append((t, kf_id))

        for peer, tz, z in ranges:
            self.stats.ranges_received += 1
            self.pending_ranges.append(_PendingRange(robot_id, peer, tz, z))

        self._detect_loops(key, t, descriptor)

    def _detect_loops(self, key: VarKey, t: float, descriptor: ScanContext):
        cands = self.db.query(key, descriptor, t)
        self.db.add(key[0], key[1], t, descriptor)
        verified = 0
        for cand in cands:
            if cand.descriptor_distance > self.cfg.descriptor.distance_accept:
                break
            if verified >= self.cfg.max_loop_verifications:
                break
            match_rec = self.records[cand.match]
            query_rec = self.records[key]
            if len(query_rec.cloud) == 0 or len(match_rec.cloud) == 0:
                continue
            result = verify(
                _AsKeyframe(query_rec), _AsKeyframe(match_rec), cand.sector_shift,
                self.cfg.gicp, self.cfg.descriptor,
            )
            verified += 1
            if result is None:
                continue
            loop = LoopEdge(result.query, result.match, result.measurement,
                            result.covariance, result.fitness)
            self.stats.loops_detected += 1
            if loop.inter_robot:
                self.inter_loops.append(loop)
                self.components = merge_reference_frames(self.graph, self.components, loop)
            else:
                self.intra_loops.append(loop)

    # -- range association ---------------------------------------------------
    def _nearest_keyframe(self, robot: int, t: float) -> tuple[int, float] | None:
        entries = self.kf_times.get(robot)
        if not entries:
            return None
        best = min(entries, key=lambda e: (abs(e[0] - t), e[1]))
        return best[1], abs(best[0] - t)

    def _associate_ranges(self):
        still_pending: list[_PendingRange] = []
        for pr in self.pending_ranges:
            ka = self._nearest_keyframe(pr.robot, pr.t)
            kb = self._nearest_keyframe(pr.peer, pr.t)
            both_past = all(
                k is not None and self.kf_times[r] and self.kf_times[r][-1][0] > pr.t + self.cfg.range_assoc_window
                for k, r in ((ka, pr.robot), (kb, pr.peer))
            )
            if ka is None or kb is None or ka[1] > self.cfg.range_assoc_window or kb[1] > self.cfg.range_assoc_window:
                if not both_past:
                    still_pending.append(pr)  # a closer keyframe may yet arrive
                continue
            key_a = (pr.robot, ka[0])
            key_b = (pr.peer, kb[0])
            if self.components[pr.robot] != self.components[pr.peer]:
                still_pending.append(pr)  # frames not merged: buffer, do not gate
                continue
            pair = (key_a, key_b) if key_a <= key_b else (key_b, key_a)
            if pair in self.range_pairs:
                continue
            pa = self.graph.variables[key_a].translation
            pb = self.graph.variables[key_b].translation
            if gate_range(pr.z, pa, pb, self.cfg.range_gate):
                self.range_pairs.add(pair)
                self.graph.ranges.append(
                    RangeEdge(key_a, key_b, pr.z, self.cfg.range_sigma, pr.t)
                )
                self.stats.ranges_gated += 1
        self.pending_ranges = still_pending

    # -- solving ------------------------------------------------------------
    def solve_global(self) -> dict[int, list[tuple[int, Pose]]]:
        """Assemble gated/screened factors, solve per frame component, and
        return per-robot corrected pose lists."""
        if not self.components:
            raise ValueError("no robots registered")
        self._associate_ranges()
        pcm_accepted = pcm_filter(self.inter_loops, self.graph.odometry, self.cfg)
        self._last_pcm = pcm_accepted
        self.stats.loops_pcm_accepted = len(pcm_accepted) + len(self.intra_loops)
        self.stats.solves += 1

        roots = sorted(set(self.components.values()))
        loops_in = self.intra_loops + pcm_accepted
        self.stats.loops_gnc_inlier = 0
        self.stats.ranges_gnc_inlier = 0
        self._last_inliers: dict[object, bool] = {}
        for root in roots:
            robots = {r for r, c in self.components.items() if c == root}
            sub = GlobalGraph(
                variables={k: p for k, p in self.graph.variables.items() if k[0] in robots},
                odometry=[e for e in self.graph.odometry if e.robot in robots],
                loops=[l for l in loops_in if l.a[0] in robots],
                ranges=[r for r in self.graph.ranges if r.a[0] in robots],
            )
            if not sub.variables:
                continue
            anchor_robot = min(robots)
            first_kf = min(k[1] for k in sub.variables if k[0] == anchor_robot)
            sub.prior_key = (anchor_robot, first_kf)
            sub.prior_pose = self.graph.variables[sub.prior_key]
            result = gnc_optimize(sub, self.cfg)
            loop_mask, range_mask = result.inlier_mask()
            self.stats.loops_gnc_inlier += int(loop_mask.sum()) if loop_mask.size else len(sub.loops)
            self.stats.ranges_gnc_inlier += int(range_mask.sum()) if range_mask.size else len(sub.ranges)
            for l, ok in zip(sub.loops, loop_mask if loop_mask.size else [True] * len(sub.loops)):
                self._last_inliers[("loop", l.a, l.b)] = bool(ok)
            for r, ok in zip(sub.ranges, range_mask if range_mask.size else [True] * len(sub.ranges)):
                self._last_inliers[("range", r.a, r.b)] = bool(ok)
            self.graph.variables.update(result.values)

        corrections: dict[int, list[tuple[int, Pose]]] = {}
        for (robot, kf), pose in sorted(self.graph.variables.items()):
            corrections.setdefault(robot, []).append((kf, pose))
        return corrections

    # -- export ----------------------------------------------------------------
    def export_g2o(self, path):
        export_g2o(self.graph, self.intra_loops + self._last_pcm, path)


class _AsKeyframe:
    """Adapter giving keyframe records the attribute set verify() expects."""

    def __init__(self, rec: _KeyframeRecord):
        self.robot_id = rec.robot
        self.keyframe_id = rec.kf_id
        self.t = rec.t
        self.cloud = rec.cloud


def _info_upper_entries(cov: np.ndarray) -> list[float]:
    # reorder [rotation, translation] -> g2o's [translation, rotation]
    perm = [3, 4, 5, 0, 1, 2]
    info = np.linalg.inv(cov + 1e-12 * np.eye(6))[np.ix_(perm, perm)]
    return [info[i, j] for i in range(6) for j in range(i, 6)]


def export_g2o(graph: GlobalGraph, loops: list[LoopEdge], path):
    """g2o-style text dump: SE3 vertices/edges plus custom range edges."""
    ids = {key: i for i, key in enumerate(sorted(graph.variables))}
    with open(path, "w") as f:
        for key in sorted(graph.variables):
            p = graph.variables[key]
            qw, qx, qy, qz = p.rotation.q
            x, y, z = p.translation
            f.write(
                f"VERTEX_SE3:QUAT {ids[key]} {x:.9f} {y:.9f} {z:.9f} "
                f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n"
            )

        def edge_line(k1, k2, z, cov):
            qw, qx, qy, qz = z.rotation.q
            x, y, zz = z.translation
            info = " ".join(f"{v:.9f}" for v in _info_upper_entries(cov))
            return (
                f"EDGE_SE3:QUAT {ids[k1]} {ids[k2]} {x:.9f} {y:.9f} {zz:.9f} "
                f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f} {info}\n"
            )

        for e in graph.odometry:
            f.write(edge_line((e.robot, e.from_kf), (e.robot, e.to_kf), e.z, e.cov))
        for l in loops:
            f.write(edge_line(l.a, l.b, l.z, l.cov))
        for r in graph.ranges:
            f.write(f"EDGE_RANGE {ids[r.a]} {ids[r.b]} {r.z:.9f} {r.sigma:.9f}\n")

"""Synthetic multi-robot pose graphs with planted loops and outliers."""

from __future__ import annotations

import numpy as np

from swarmlio.backend import GlobalGraph, LoopEdge, OdomEdge, RangeEdge
from swarmlio.geometry import Pose, between, exp_so3, retract, rot_z


def circle_truth(robot: int, n_poses: int, radius=8.0, spacing=0.35):
    """Ground-truth poses: concentric arcs, one ring per robot."""
    out = []
    r = radius + 3.0 * robot
    for k in range(n_poses):
        ang = spacing * k / r * 8.0
        pos = np.array([r * np.cos(ang), r * np.sin(ang), 0.3 * robot])
        out.append(Pose(rot_z(ang + np.pi / 2), pos))
    return out


def build_graph(
    rng,
    n_robots=3,
    n_poses=20,
    odom_sigma=(0.002, 0.01),  # rad, m
    loop_sigma=(0.005, 0.02),
    n_loops_per_pair=4,
    n_outliers=0,
    noise_scale=0.5,  # actual noise at half the modeled sigma
    with_ranges=0,
    range_sigma=0.1,
):
    """Returns (graph, truth, outlier_flags) with variables at composed odometry."""
    truth = {}
    for r in range(n_robots):
        for k, p in enumerate(circle_truth(r, n_poses)):
            truth[(r, k)] = p

    graph = GlobalGraph()
    odom_cov = np.diag([odom_sigma[0] ** 2] * 3 + [odom_sigma[1] ** 2] * 3)
    for r in range(n_robots):
        pose = truth[(r, 0)]
        graph.variables[(r, 0)] = pose
        for k in range(1, n_poses):
            z = between(truth[(r, k - 1)], truth[(r, k)])
            noise = np.concatenate(
                [
                    rng.normal(size=3) * odom_sigma[0] * noise_scale,
                    rng.normal(size=3) * odom_sigma[1] * noise_scale,
                ]
            )
            z = retract(z, noise)
            graph.odometry.append(OdomEdge(r, k - 1, k, z, odom_cov))
            pose = pose.compose(z)
            graph.variables[(r, k)] = pose

    loop_cov = np.diag([loop_sigma[0] ** 2] * 3 + [loop_sigma[1] ** 2] * 3)
    outlier_flags = []
    pairs = [(a, b) for a in range(n_robots) for b in range(a + 1, n_robots)]
    planted = []
    for a, b in pairs:
        for _ in range(n_loops_per_pair):
            ka = int(rng.integers(0, n_poses))
            kb = int(rng.integers(0, n_poses))
            planted.append(((a, ka), (b, kb)))
    outlier_idx = set(
        rng.choice(len(planted), size=min(n_outliers, len(planted)), replace=False).tolist()
    )
    for i, (ka, kb) in enumerate(planted):
        z = between(truth[ka], truth[kb])
        noise = np.concatenate(
            [
                rng.normal(size=3) * loop_sigma[0] * noise_scale,
                rng.normal(size=3) * loop_sigma[1] * noise_scale,
            ]
        )
        z = retract(z, noise)
        if i in outlier_idx:
            direction = rng.normal(size=3)
            direction = direction / np.linalg.norm(direction) * 10.0
            z = Pose(z.rotation.compose(exp_so3([0, 0, 1.0])), z.translation + direction)
        graph.loops.append(LoopEdge(ka, kb, z, loop_cov, fitness=0.01))
        outlier_flags.append(i in outlier_idx)

    for _ in range(with_ranges):
        a = int(rng.integers(0, n_robots))
        b = int(rng.integers(0, n_robots))
        if a == b:
            continue
        ka = int(rng.integers(0, n_poses))
        kb = int(rng.integers(0, n_poses))
        d = np.linalg.norm(truth[(a, ka)].translation - truth[(b, kb)].translation)
        z = d + rng.normal() * range_sigma * noise_scale
        if z <= 0:
            continue
        graph.ranges.append(RangeEdge((a, ka), (b, kb), float(z), range_sigma, 0.0))

    graph.prior_key = (0, 0)
    graph.prior_pose = truth[(0, 0)]
    return graph, truth, outlier_flags


def ate_translation(values, truth) -> float:
    errs = [
        np.linalg.norm(values[k].translation - truth[k].translation) for k in truth
    ]
    return float(np.sqrt(np.mean(np.square(errs))))

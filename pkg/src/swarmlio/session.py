"""End-to-end simulated multi-robot sessions.

Ties the pieces together: a YAML session config describes the world, the
robot trajectories, and the sensor rig; `simulate_dataset` materializes
per-robot sensor streams on disk; `run_session` replays them in timestamp
order through per-robot front-ends and the central server over the
simulated transport, solving the global graph on a fixed cadence and
feeding estimates back. Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .backend import BackendConfig, ServerBackend
from .cloud import PointCloud
from .evaluate import Trajectory as EvalTrajectory
from .evaluate import ate, load_tum, save_tum
from .frontend import FrontendConfig, LioFrontend
from .geometry import Pose
from .imu import ImuNoiseParams
from .protocol import (
    GlobalEstimateMessage,
    KeyframeMessage,
    RangeMeasurement,
    SimTransport,
    bandwidth_report,
    decode,
    encode,
    write_traffic_csv,
)
from .sim import (
    CylinderPrimitive,
    LidarSpec,
    PlanePrimitive,
    RingPrimitive,
    SensorRig,
    Trajectory,
    TrajectorySpec,
    UwbSpec,
    WorldSpec,
    generate_robot_dataset,
    load_robot_dataset,
    synth_uwb,
    write_uwb_csv,
)

_AXES = {"x": 0, "y": 1, "z": 2}


class ConfigError(ValueError):
    pass


@dataclass
class SessionConfig:
    seed: int
    world: WorldSpec
    trajectories: list[TrajectorySpec]
    rig: SensorRig
    solve_interval: float = 10.0

    @property
    def n_robots(self) -> int:
        return len(self.trajectories)


# --------------------------------------------------------------------------
# config file parsing
# --------------------------------------------------------------------------


def _need(d: dict, key: str, path: str):
    if key not in d:
        raise ConfigError(f"{path}: missing required key '{key}'")
    return d[key]


def _parse_primitive(d: dict, path: str):
    kind = _need(d, "kind", path)
    intensity = float(d.get("intensity", 128.0))
    material = int(d.get("material", 0))
    try:
        if kind == "plane":
            return PlanePrimitive(
                axis=_AXES[_need(d, "axis", path)],
                center=np.asarray(_need(d, "center", path), dtype=float),
                half_extents=tuple(_need(d, "half_extents", path)),
                material_id=material,
                intensity=intensity,
            )
        if kind == "cylinder":
            return CylinderPrimitive(
                center=np.asarray(_need(d, "center", path), dtype=float),
                radius=float(_need(d, "radius", path)),
                height=float(_need(d, "height", path)),
                material_id=material,
                intensity=intensity,
            )
        if kind == "ring":
            return RingPrimitive(
                center=np.asarray(_need(d, "center", path), dtype=float),
                major_radius=float(_need(d, "major_radius", path)),
                minor_radius=float(_need(d, "minor_radius", path)),
                axis=_AXES[d.get("axis", "x")],
                material_id=material,
                intensity=intensity,
            )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}.kind: unknown primitive '{kind}'")


def parse_config(raw: dict) -> SessionConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    seed = int(raw.get("seed", 0))
    wd = _need(raw, "world", "world")
    prims = _need(wd, "primitives", "world")
    if not prims:
        raise ConfigError("world.primitives: must list at least one primitive")
    primitives = tuple(
        _parse_primitive(p, f"world.primitives[{i}]") for i, p in enumerate(prims)
    )
    bounds = tuple(wd.get("bounds", (-50, 50, -50, 50, -5, 20)))
    world = WorldSpec(primitives=primitives, bounds=bounds)

    robots_raw = _need(raw, "robots", "robots")
    if not robots_raw:
        raise ConfigError("robots: need at least one robot")
    trajectories = []
    for i, rb in enumerate(robots_raw):
        path = f"robots[{i}]"
        wps = _need(rb, "waypoints", path)
        if len(wps) < 2:
            raise ConfigError(f"{path}.waypoints: need at least two waypoints")
        times, positions, yaws = [], [], []
        for j, wp in enumerate(wps):
            wpath = f"{path}.waypoints[{j}]"
            times.append(float(_need(wp, "t", wpath)))
            positions.append([float(v) for v in _need(wp, "pos", wpath)])
            yaws.append(float(wp.get("yaw", 0.0)))
        try:
            trajectories.append(
                TrajectorySpec(
                    np.array(times), np.array(positions), np.array(yaws),
                    profile=rb.get("profile", "ground"),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    rig_raw = raw.get("rig", {})
    lid = rig_raw.get("lidar", {})
    imu_raw = rig_raw.get("imu", {})
    uwb_raw = rig_raw.get("uwb", {})
    try:
        rig = SensorRig(
            lidar=LidarSpec(
                channels=int(lid.get("channels", 16)),
                vfov_deg=tuple(lid.get("vfov_deg", (-15.0, 15.0))),
                azimuth_step_deg=float(lid.get("azimuth_step_deg", 1.5)),
                rate_hz=float(lid.get("rate_hz", 2.0)),
                scan_period=float(lid.get("scan_period", 0.1)),
                max_range=float(lid.get("max_range", 80.0)),
                range_sigma=float(lid.get("range_sigma", 0.02)),
                intensity_sigma=float(lid.get("intensity_sigma", 2.0)),
            ),
            imu=ImuNoiseParams(
                gyro_noise_density=float(imu_raw.get("gyro_noise", 1.7e-4)),
                accel_noise_density=float(imu_raw.get("accel_noise", 2.0e-3)),
                gyro_bias_walk=float(imu_raw.get("gyro_walk", 1.0e-5)),
                accel_bias_walk=float(imu_raw.get("accel_walk", 1.0e-4)),
            ),
            imu_rate_hz=float(imu_raw.get("rate_hz", 100.0)),
            uwb=UwbSpec(
                rate_hz=float(uwb_raw.get("rate_hz", 10.0)),
                sigma=float(uwb_raw.get("sigma", 0.05)),
                nlos_prob=float(uwb_raw.get("nlos_prob", 0.05)),
                nlos_bias=tuple(uwb_raw.get("nlos_bias", (0.5, 3.0))),
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"rig: {exc}") from exc

    session_raw = raw.get("session", {})
    return SessionConfig(
        seed=seed,
        world=world,
        trajectories=trajectories,
        rig=rig,
        solve_interval=float(session_raw.get("solve_interval", 10.0)),
    )


def load_config(path) -> SessionConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}")
    return parse_config(raw)


def default_session_config(n_robots: int = 3, duration: float = 36.0, seed: int = 1,
                           speed: float = 1.2, nlos_prob: float = 0.05) -> SessionConfig:
    """Walled arena with cylinder and ring obstacles; robots lap a shared
    circuit at staggered phases, so each revisits the others' places."""
    walls = []
    half = 12.0
    for axis, sign in ((0, -1), (0, 1), (1, -1), (1, 1)):
        center = np.zeros(3)
        center[axis] = sign * half
        center[2] = 1.5
        walls.append(PlanePrimitive(axis, center, (half, 1.5), 0, 190.0))
    floor = PlanePrimitive(2, np.array([0.0, 0.0, 0.0]), (half, half), 1, 60.0)
    obstacles = [
        CylinderPrimitive(np.array([4.0, 3.0, 0.0]), 0.6, 3.0, 2, 140.0),
        CylinderPrimitive(np.array([-5.0, 4.0, 0.0]), 0.8, 3.0, 2, 140.0),
        CylinderPrimitive(np.array([-3.0, -6.0, 0.0]), 0.5, 3.0, 3, 100.0),
        CylinderPrimitive(np.array([5.0, -4.0, 0.0]), 0.7, 3.0, 3, 100.0),
        CylinderPrimitive(np.array([0.5, 7.5, 0.0]), 0.6, 3.0, 2, 220.0),
        RingPrimitive(np.array([0.0, -8.0, 1.2]), 1.5, 0.25, 0, 4, 170.0),
        RingPrimitive(np.array([8.0, 0.5, 1.2]), 1.4, 0.25, 1, 4, 170.0),
    ]
    world = WorldSpec(primitives=tuple(walls + [floor] + obstacles), bounds=(-12, 12, -12, 12, -1, 4))

    radius = 8.0
    hold = 1.5
    lap_step = 0.9  # rad between waypoints
    trajectories = []
    for r in range(n_robots):
        phase = 2 * np.pi * r / max(n_robots, 1)
        times = [0.0, hold]
        angs = [phase, phase]
        t = hold
        ang = phase
        while t < duration - 1e-9:
            d_ang = lap_step
            dt = d_ang * radius / speed
            t = min(t + dt, duration)
            ang += d_ang * (t - times[-1]) / dt
            times.append(t)
            angs.append(ang)
        angs = np.array(angs)
        pos = np.stack(
            [radius * np.cos(angs), radius * np.sin(angs), np.full_like(angs, 0.5)], axis=1
        )
        yaw = angs + np.pi / 2
        trajectories.append(TrajectorySpec(np.array(times), pos, yaw, profile="ground"))

    return SessionConfig(
        seed=seed,
        world=world,
        trajectories=trajectories,
        rig=SensorRig(uwb=UwbSpec(nlos_prob=nlos_prob)),
        solve_interval=10.0,
    )


def config_to_yaml_dict(cfg: SessionConfig) -> dict:
    prims = []
    inv_axes = {v: k for k, v in _AXES.items()}
    for p in cfg.world.primitives:
        if isinstance(p, PlanePrimitive):
            prims.append(
                {"kind": "plane", "axis": inv_axes[p.axis], "center": list(map(float, p.center)),
                 "half_extents": list(map(float, p.half_extents)),
                 "material": p.material_id, "intensity": p.intensity}
            )
        elif isinstance(p, CylinderPrimitive):
            prims.append(
                {"kind": "cylinder", "center": list(map(float, p.center)), "radius": p.radius,
                 "height": p.height, "material": p.material_id, "intensity": p.intensity}
            )
        else:
            prims.append(
                {"kind": "ring", "center": list(map(float, p.center)),
                 "major_radius": p.major_radius, "minor_radius": p.minor_radius,
                 "axis": inv_axes[p.axis], "material": p.material_id, "intensity": p.intensity}
            )
    robots = []
    for spec in cfg.trajectories:
        robots.append(
            {
                "profile": spec.profile,
                "waypoints": [
                    {"t": float(t), "pos": [float(v) for v in pos], "yaw": float(yaw)}
                    for t, pos, yaw in zip(spec.times, spec.positions, spec.yaws)
                ],
            }
        )
    rig = cfg.rig
    return {
        "seed": cfg.seed,
        "world": {"bounds": list(cfg.world.bounds), "primitives": prims},
        "robots": robots,
        "rig": {
            "lidar": {
                "channels": rig.lidar.channels,
                "vfov_deg": list(rig.lidar.vfov_deg),
                "azimuth_step_deg": rig.lidar.azimuth_step_deg,
                "rate_hz": rig.lidar.rate_hz,
                "scan_period": rig.lidar.scan_period,
                "max_range": rig.lidar.max_range,
                "range_sigma": rig.lidar.range_sigma,
                "intensity_sigma": rig.lidar.intensity_sigma,
            },
            "imu": {
                "rate_hz": rig.imu_rate_hz,
                "gyro_noise": rig.imu.gyro_noise_density,
                "accel_noise": rig.imu.accel_noise_density,
                "gyro_walk": rig.imu.gyro_bias_walk,
                "accel_walk": rig.imu.accel_bias_walk,
            },
            "uwb": {
                "rate_hz": rig.uwb.rate_hz,
                "sigma": rig.uwb.sigma,
                "nlos_prob": rig.uwb.nlos_prob,
                "nlos_bias": list(rig.uwb.nlos_bias),
            },
        },
        "session": {"solve_interval": cfg.solve_interval},
    }


def save_config(path, cfg: SessionConfig):
    with open(path, "w") as f:
        yaml.safe_dump(config_to_yaml_dict(cfg), f, sort_keys=False)


# --------------------------------------------------------------------------
# dataset generation
# --------------------------------------------------------------------------


def simulate_dataset(cfg: SessionConfig, out_dir) -> Path:
    """Write per-robot directories plus a copy of the session config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trajs = [Trajectory(spec) for spec in cfg.trajectories]
    for i, traj in enumerate(trajs):
        generate_robot_dataset(out / f"robot{i}", cfg.world, traj, cfg.rig, cfg.seed, i)
    # pairwise UWB, recorded by the lower-id robot
    rows: dict[int, list[tuple[int, float, float]]] = {i: [] for i in range(len(trajs))}
    for a in range(len(trajs)):
        for b in range(a + 1, len(trajs)):
            seq = np.random.SeedSequence((cfg.seed, 900, a, b))
            for t, z in synth_uwb(trajs[a], trajs[b], cfg.rig, seq):
                rows[a].append((b, t, z))
        rows[a].sort(key=lambda r: (r[1], r[0]))
    write_uwb_csv(out, rows)
    save_config(out / "config.yaml", cfg)
    return out


# --------------------------------------------------------------------------
# session driver
# --------------------------------------------------------------------------


@dataclass
class SessionReport:
    per_robot: dict = field(default_factory=dict)
    loop_counts: dict = field(default_factory=dict)
    range_counts: dict = field(default_factory=dict)
    bandwidth: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    @property
    def mean_ate(self) -> float:
        vals = [v["ate_rmse"] for v in self.per_robot.values() if "ate_rmse" in v]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {
            "per_robot": self.per_robot,
            "mean_ate": self.mean_ate,
            "loop_counts": self.loop_counts,
            "range_counts": self.range_counts,
            "bandwidth": self.bandwidth,
            "timings": self.timings,
            "flags": self.flags,
        }


def run_session(
    dataset_dir,
    out_dir,
    use_ranges: bool = True,
    use_loops: bool = True,
    solve_interval: float | None = None,
    frontend_cfg: FrontendConfig | None = None,
    backend_cfg: BackendConfig | None = None,
    transport_seed: int = 0,
) -> SessionReport:
    t_start = time.perf_counter()
    dataset_dir = Path(dataset_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    robot_dirs = sorted(dataset_dir.glob("robot*"))
    if not robot_dirs:
        raise ConfigError(f"{dataset_dir}: no robot directories found")
    cfg_path = dataset_dir / "config.yaml"
    session_cfg = load_config(cfg_path) if cfg_path.exists() else None
    if solve_interval is None:
        solve_interval = session_cfg.solve_interval if session_cfg else 10.0

    imu_params = session_cfg.rig.imu if session_cfg else ImuNoiseParams()
    scan_period = session_cfg.rig.lidar.scan_period if session_cfg else 0.1
    frontend_cfg = frontend_cfg or FrontendConfig(imu=imu_params, scan_period=scan_period)
    backend_cfg = backend_cfg or BackendConfig()

    robots = list(range(len(robot_dirs)))
    datasets = {}
    events = []
    for r, rdir in zip(robots, robot_dirs):
        imu, scans, gt, uwb = load_robot_dataset(rdir)
        datasets[r] = {"gt": gt}
        for s in imu:
            events.append((s.t, 0, r, s))
        for peer, t, z in uwb:
            events.append((t, 1, r, (peer, t, z)))
        for t, cloud in scans:
            events.append((t, 2, r, cloud))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    if not use_loops:
        backend_cfg = replace(backend_cfg, max_loop_verifications=0)
    transport = SimTransport(seed=transport_seed)
    server = ServerBackend(backend_cfg)
    server_enabled_ranges = use_ranges
    frontends = {}
    pending_ranges: dict[int, list] = {r: [] for r in robots}
    for r in robots:
        transport.register(r)
        server.register_robot(r)
        frontends[r] = LioFrontend(r, frontend_cfg)

    solve_seq = 0
    t0 = events[0][0] if events else 0.0
    next_solve = t0 + solve_interval
    frontend_time = 0.0
    solve_time = 0.0

    def handle_server_messages(t):
        for robot_id, data in transport.poll_server(t):
            msg = decode(data)
            if isinstance(msg, KeyframeMessage):
                ranges = [
                    (rm.peer_id, rm.t, rm.z) for rm in msg.ranges
                ] if server_enabled_ranges else []
                server.ingest_keyframe(
                    msg.robot_id, msg.keyframe_id, msg.timestamp, msg.odometry,
                    msg.odometry_covariance, msg.scan_context(), msg.cloud(), ranges,
                )

    def do_solve(t):
        nonlocal solve_seq, solve_time
        tic = time.perf_counter()
        corrections = server.solve_global()
        solve_time += time.perf_counter() - tic
        solve_seq += 1
        for r in robots:
            poses = corrections.get(r, [])
            if not poses:
                continue
            msg = GlobalEstimateMessage(r, solve_seq, tuple(poses))
            transport.send_to_robot(r, encode(msg), t)
        for r in robots:
            for data in transport.poll_robot(r, t):
                est = decode(data)
                frontends[r].apply_global_feedback(list(est.poses))

    for ev in events:
        t, kind, r, payload = ev
        while t >= next_solve - 1e-9:
            handle_server_messages(next_solve)
            do_solve(next_solve)
            next_solve += solve_interval
        if kind == 0:
            frontends[r].add_imu(payload)
        elif kind == 1:
            pending_ranges[r].append(payload)
        else:
            tic = time.perf_counter()
            result = frontends[r].process_scan(t, payload)
            frontend_time += time.perf_counter() - tic
            if result.keyframe is not None:
                kf = result.keyframe
                odom = result.odom_factor
                msg = KeyframeMessage.build(
                    r, kf.keyframe_id, kf.t,
                    odom.measurement if odom else None,
                    odom.covariance if odom else None,
                    kf.descriptor, kf.cloud,
                    ranges=tuple(
                        RangeMeasurement(p, tt, zz) for p, tt, zz in pending_ranges[r]
                    ),
                )
                pending_ranges[r] = []
                transport.send_to_server(r, encode(msg), t)
                handle_server_messages(t)

    # final ingest + solve covering the tail of the session
    t_end = events[-1][0] if events else 0.0
    handle_server_messages(t_end)
    do_solve(t_end)

    report = SessionReport()
    report.flags = {"ranges": use_ranges, "loops": use_loops}
    corrections = {r: dict(ps) for r, ps in server.solve_global().items()}
    for r in robots:
        kf_poses = corrections.get(r, {})
        times = []
        poses = []
        for kf_id in sorted(kf_poses):
            rec = server.records.get((r, kf_id))
            if rec is None:
                continue
            times.append(rec.t)
            poses.append(kf_poses[kf_id])
        est = EvalTrajectory(np.array(times), poses)
        save_tum(out / f"est_robot{r}.tum", est)
        gt_rows = datasets[r]["gt"]
        gt_traj = EvalTrajectory(
            np.array([row[0] for row in gt_rows]),
            [tum_row_to_pose(row) for row in gt_rows],
        )
        save_tum(out / f"gt_robot{r}.tum", gt_traj)
        entry = {"keyframes": len(poses)}
        try:
            result = ate(est, gt_traj)
            entry.update(
                ate_rmse=result["rmse"], ate_mean=result["mean"], ate_max=result["max"]
            )
        except ValueError as exc:
            entry["ate_error"] = str(exc)
        report.per_robot[r] = entry

    stats = server.stats
    report.loop_counts = {
        "detected": stats.loops_detected,
        "pcm_accepted": stats.loops_pcm_accepted,
        "gnc_inlier": stats.loops_gnc_inlier,
    }
    report.range_counts = {
        "received": stats.ranges_received,
        "gated": stats.ranges_gated,
        "gnc_inlier": stats.ranges_gnc_inlier,
    }
    bw = bandwidth_report(transport.log)
    report.bandwidth = {
        r: {
            "bytes_up": s.bytes_up,
            "bytes_down": s.bytes_down,
            "up_kbps_mean": s.up_kbps_mean,
            "up_kbps_std": s.up_kbps_std,
            "down_kbps_mean": s.down_kbps_mean,
            "down_kbps_std": s.down_kbps_std,
            "mean_keyframe_bytes": s.mean_keyframe_bytes,
        }
        for r, s in bw.items()
    }
    report.timings = {
        "frontend_s": frontend_time,
        "solve_s": solve_time,
        "total_s": time.perf_counter() - t_start,
    }

    write_traffic_csv(out / "traffic.csv", transport.log)
    _write_constraints(out / "constraints.csv", server)
    with open(out / "report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    return report


def tum_row_to_pose(row) -> Pose:
    from .geometry import Rotation

    _, x, y, z, qx, qy, qz, qw = row
    return Pose(Rotation(np.array([qw, qx, qy, qz])), np.array([x, y, z]))


def _write_constraints(path, server: ServerBackend):
    """PCM-accepted loops and gated ranges with their final inlier flags."""
    inliers = getattr(server, "_last_inliers", {})
    with open(path, "w") as f:
        f.write("robot_a,kf_a,robot_b,kf_b,type,inlier\n")
        for loop in server.intra_loops + server._last_pcm:
            flag = inliers.get(("loop", loop.a, loop.b), True)
            f.write(
                f"{loop.a[0]},{loop.a[1]},{loop.b[0]},{loop.b[1]},loop,{int(flag)}\n"
            )
        for rng in server.graph.ranges:
            flag = inliers.get(("range", rng.a, rng.b), True)
            f.write(
                f"{rng.a[0]},{rng.a[1]},{rng.b[0]},{rng.b[1]},range,{int(flag)}\n"
            )


def export_plot(session_dir, out_subdir: str = "plot") -> Path:
    """Per-robot est/gt position CSVs plus the constraint list."""
    session_dir = Path(session_dir)
    est_files = sorted(session_dir.glob("est_robot*.tum"))
    if not est_files:
        raise FileNotFoundError(f"{session_dir}: no session outputs (est_robot*.tum)")
    out = session_dir / out_subdir
    out.mkdir(exist_ok=True)
    for est_path in est_files:
        robot = est_path.stem.replace("est_robot", "")
        for kind, path in (("est", est_path), ("gt", session_dir / f"gt_robot{robot}.tum")):
            traj = load_tum(path)
            with open(out / f"robot{robot}_{kind}.csv", "w") as f:
                f.write("t,x,y,z\n")
                for t, p in zip(traj.times, traj.poses):
                    x, y, z = p.translation
                    f.write(f"{t:.9f},{x:.9f},{y:.9f},{z:.9f}\n")
    constraints = session_dir / "constraints.csv"
    if constraints.exists():
        (out / "constraints.csv").write_bytes(constraints.read_bytes())
    return out

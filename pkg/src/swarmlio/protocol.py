"""Wire schemas and a simulated robot-server transport.

Binary little-endian framing: 4-byte magic `CLRO`, version byte, message
type byte, u32 payload length, then fixed-layout fields. Cloud and
descriptor payloads use f32 (sensor-noise dominated); poses and
covariances use f64. Messages are constructed with their float32 fields
already quantized, so encode/decode is an exact bijection.

The transport is per-link FIFO with configurable latency and drop
probability; statistics count encoded bytes exactly, dropped or not.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .geometry import Pose, Rotation
from .place_recognition import ScanContext

MAGIC = b"CLRO"
VERSION = 1
MSG_KEYFRAME = 1
MSG_GLOBAL_ESTIMATE = 2

HEADER = struct.Struct("<4sBBI")
DESCRIPTOR_SHAPE = (20, 60)


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (offset {offset})")


@dataclass(frozen=True)
class RangeMeasurement:
    peer_id: int
    t: float
    z: float


@dataclass(frozen=True, eq=False)
class KeyframeMessage:
    robot_id: int
    keyframe_id: int
    timestamp: float
    odometry: Pose | None  # relative pose from the previous keyframe
    odometry_covariance: np.ndarray  # 6x6
    descriptor: np.ndarray  # (rings, sectors) f32
    cloud_positions: np.ndarray  # (N, 3) f32
    cloud_intensities: np.ndarray  # (N,) f32
    ranges: tuple[RangeMeasurement, ...] = ()

    @staticmethod
    def build(robot_id, keyframe_id, timestamp, odometry, odometry_covariance,
              descriptor: ScanContext, cloud: PointCloud, ranges=()) -> "KeyframeMessage":
        return KeyframeMessage(
            robot_id=int(robot_id),
            keyframe_id=int(keyframe_id),
            timestamp=float(timestamp),
            odometry=odometry,
            odometry_covariance=np.zeros((6, 6)) if odometry_covariance is None
            else np.asarray(odometry_covariance, dtype=np.float64),
            descriptor=np.asarray(descriptor.matrix, dtype=np.float32),
            cloud_positions=np.asarray(cloud.positions, dtype=np.float32),
            cloud_intensities=np.asarray(cloud.intensities, dtype=np.float32),
            ranges=tuple(ranges),
        )

    def cloud(self) -> PointCloud:
        return PointCloud(
            self.cloud_positions.astype(np.float64),
            self.cloud_intensities.astype(np.float64),
        )

    def scan_context(self) -> ScanContext:
        return ScanContext(self.descriptor.astype(np.float64))


@dataclass(frozen=True, eq=False)
class GlobalEstimateMessage:
    robot_id: int
    solve_seq: int
    poses: tuple[tuple[int, Pose], ...]  # (keyframe_id, optimized pose)


def _pack_pose(p: Pose) -> bytes:
    qw, qx, qy, qz = p.rotation.q
    t = p.translation
    return struct.pack("<7d", t[0], t[1], t[2], qx, qy, qz, qw)


def _unpack_pose(buf: bytes, off: int) -> tuple[Pose, int]:
    tx, ty, tz, qx, qy, qz, qw = struct.unpack_from("<7d", buf, off)
    return Pose(Rotation(np.array([qw, qx, qy, qz])), np.array([tx, ty, tz])), off + 56


def encode(msg) -> bytes:
    if isinstance(msg, KeyframeMessage):
        body = _encode_keyframe(msg)
        mtype = MSG_KEYFRAME
    elif isinstance(msg, GlobalEstimateMessage):
        body = _encode_estimate(msg)
        mtype = MSG_GLOBAL_ESTIMATE
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    return HEADER.pack(MAGIC, VERSION, mtype, len(body)) + body


def _encode_keyframe(m: KeyframeMessage) -> bytes:
    parts = [struct.pack("<IIdB", m.robot_id, m.keyframe_id, m.timestamp,
                         0 if m.odometry is None else 1)]
    parts.append(_pack_pose(m.odometry if m.odometry is not None else Pose.identity()))
    parts.append(np.ascontiguousarray(m.odometry_covariance, dtype="<f8").tobytes())
    if m.descriptor.shape != DESCRIPTOR_SHAPE:
        raise ValueError(f"descriptor must be {DESCRIPTOR_SHAPE}, got {m.descriptor.shape}")
    parts.append(np.ascontiguousarray(m.descriptor, dtype="<f4").tobytes())
    n = len(m.cloud_positions)
    parts.append(struct.pack("<I", n))
    interleaved = np.empty((n, 4), dtype="<f4")
    interleaved[:, :3] = m.cloud_positions
    interleaved[:, 3] = m.cloud_intensities
    parts.append(interleaved.tobytes())
    parts.append(struct.pack("<I", len(m.ranges)))
    for r in m.ranges:
        parts.append(struct.pack("<Idd", r.peer_id, r.t, r.z))
    return b"".join(parts)


def _encode_estimate(m: GlobalEstimateMessage) -> bytes:
    parts = [struct.pack("<III", m.robot_id, m.solve_seq, len(m.poses))]
    for kf_id, pose in m.poses:
        parts.append(struct.pack("<I", kf_id))
        parts.append(_pack_pose(pose))
    return b"".join(parts)


def peek_type(data: bytes) -> int:
    if len(data) < HEADER.size:
        raise DecodeError("truncated header", len(data))
    return data[5]


def decode(data: bytes):
    if len(data) < HEADER.size:
        raise DecodeError("truncated header", len(data))
    magic, version, mtype, length = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", 4)
    if len(data) != HEADER.size + length:
        raise DecodeError(
            f"length mismatch: header says {length}, got {len(data) - HEADER.size}", 6
        )
    body = data[HEADER.size:]
    try:
        if mtype == MSG_KEYFRAME:
            return _decode_keyframe(body)
        if mtype == MSG_GLOBAL_ESTIMATE:
            return _decode_estimate(body)
    except struct.error as exc:
        raise DecodeError(f"malformed body: {exc}", HEADER.size) from exc
    raise DecodeError(f"unknown message type {mtype}", 5)


def _decode_keyframe(body: bytes) -> KeyframeMessage:
    off = 0
    robot_id, kf_id, ts, has_odom = struct.unpack_from("<IIdB", body, off)
    off += struct.calcsize("<IIdB")
    odom, off = _unpack_pose(body, off)
    cov = np.frombuffer(body, dtype="<f8", count=36, offset=off).reshape(6, 6).copy()
    off += 36 * 8
    n_desc = DESCRIPTOR_SHAPE[0] * DESCRIPTOR_SHAPE[1]
    desc = (
        np.frombuffer(body, dtype="<f4", count=n_desc, offset=off)
        .reshape(DESCRIPTOR_SHAPE)
        .copy()
    )
    off += n_desc * 4
    (n_pts,) = struct.unpack_from("<I", body, off)
    off += 4
    if off + n_pts * 16 > len(body):
        raise DecodeError("cloud block exceeds payload", off)
    pts = np.frombuffer(body, dtype="<f4", count=n_pts * 4, offset=off).reshape(n_pts, 4)
    off += n_pts * 16
    (n_rng,) = struct.unpack_from("<I", body, off)
    off += 4
    ranges = []
    for _ in range(n_rng):
        peer, t, z = struct.unpack_from("<Idd", body, off)
        off += struct.calcsize("<Idd")
        ranges.append(RangeMeasurement(peer, t, z))
    if off != len(body):
        raise DecodeError(f"trailing bytes: {len(body) - off}", off)
    return KeyframeMessage(
        robot_id=robot_id,
        keyframe_id=kf_id,
        timestamp=ts,
        odometry=None if has_odom == 0 else odom,
        odometry_covariance=cov,
        descriptor=desc,
        cloud_positions=pts[:, :3].copy(),
        cloud_intensities=pts[:, 3].copy(),
        ranges=tuple(ranges),
    )


def _decode_estimate(body: bytes) -> GlobalEstimateMessage:
    robot_id, seq, count = struct.unpack_from("<III", body, 0)
    off = struct.calcsize("<III")
    poses = []
    for _ in range(count):
        (kf_id,) = struct.unpack_from("<I", body, off)
        off += 4
        pose, off = _unpack_pose(body, off)
        poses.append((kf_id, pose))
    if off != len(body):
        raise DecodeError(f"trailing bytes: {len(body) - off}", off)
    return GlobalEstimateMessage(robot_id, seq, tuple(poses))


def keyframe_messages_equal(a: KeyframeMessage, b: KeyframeMessage) -> bool:
    if (a.robot_id, a.keyframe_id, a.timestamp) != (b.robot_id, b.keyframe_id, b.timestamp):
        return False
    if (a.odometry is None) != (b.odometry is None):
        return False
    if a.odometry is not None:
        if not np.array_equal(a.odometry.rotation.q, b.odometry.rotation.q):
            return False
        if not np.array_equal(a.odometry.translation, b.odometry.translation):
            return False
    return (
        np.array_equal(a.odometry_covariance, b.odometry_covariance)
        and np.array_equal(a.descriptor, b.descriptor)
        and np.array_equal(a.cloud_positions, b.cloud_positions)
        and np.array_equal(a.cloud_intensities, b.cloud_intensities)
        and a.ranges == b.ranges
    )


# --------------------------------------------------------------------------
# simulated transport
# --------------------------------------------------------------------------


@dataclass
class TrafficRecord:
    t: float
    robot_id: int
    direction: str  # "up" (robot->server) or "down"
    bytes: int
    msg_type: int
    delivered: bool


@dataclass
class _Link:
    to_server: list = field(default_factory=list)  # (deliver_t, seq, data)
    to_robot: list = field(default_factory=list)


class SimTransport:
    """Per-robot FIFO links with latency, drops, and byte-exact stats."""

    def __init__(self, seed: int = 0, latency: float = 0.0, drop_prob: float = 0.0):
        if not 0.0 <= drop_prob <= 1.0:
            raise ValueError("drop probability must be in [0, 1]")
        self.latency = latency
        self.drop_prob = drop_prob
        self.links: dict[int, _Link] = {}
        self.log: list[TrafficRecord] = []
        self._rng = np.random.default_rng(seed)
        self._seq = 0

    def register(self, robot_id: int):
        if robot_id in self.links:
            raise ValueError(f"robot {robot_id} already registered")
        self.links[robot_id] = _Link()

    def deregister(self, robot_id: int):
        if robot_id not in self.links:
            raise ValueError(f"robot {robot_id} not registered")
        del self.links[robot_id]

    def _send(self, robot_id: int, data: bytes, t: float, direction: str):
        if robot_id not in self.links:
            raise ValueError(f"robot {robot_id} not registered")
        dropped = self.drop_prob > 0.0 and self._rng.random() < self.drop_prob
        self.log.append(
            TrafficRecord(t, robot_id, direction, len(data), peek_type(data), not dropped)
        )
        if dropped:
            return
        queue = self.links[robot_id].to_server if direction == "up" else self.links[robot_id].to_robot
        queue.append((t + self.latency, self._seq, data))
        self._seq += 1

    def send_to_server(self, robot_id: int, data: bytes, t: float):
        self._send(robot_id, data, t, "up")

    def send_to_robot(self, robot_id: int, data: bytes, t: float):
        self._send(robot_id, data, t, "down")

    def poll_server(self, t: float) -> list[tuple[int, bytes]]:
        """All due robot->server messages in global send order."""
        due = []
        for robot_id in sorted(self.links):
            q = self.links[robot_id].to_server
            while q and q[0][0] <= t:
                deliver_t, seq, data = q.pop(0)
                due.append((seq, robot_id, data))
        due.sort()
        return [(robot_id, data) for _, robot_id, data in due]

    def poll_robot(self, robot_id: int, t: float) -> list[bytes]:
        if robot_id not in self.links:
            raise ValueError(f"robot {robot_id} not registered")
        q = self.links[robot_id].to_robot
        out = []
        while q and q[0][0] <= t:
            out.append(q.pop(0)[2])
        return out


@dataclass
class LinkStats:
    bytes_up: int = 0
    bytes_down: int = 0
    messages_up: int = 0
    messages_down: int = 0
    up_kbps_mean: float = 0.0
    up_kbps_std: float = 0.0
    down_kbps_mean: float = 0.0
    down_kbps_std: float = 0.0
    mean_keyframe_bytes: float = 0.0


def bandwidth_report(log: list[TrafficRecord], window: float = 1.0) -> dict[int, LinkStats]:
    """Per-robot totals plus windowed kB/s mean and standard deviation.

    Every sent message counts, delivered or not (the radio spent the
    bytes). kB here is 1000 bytes.
    """
    robots = sorted({r.robot_id for r in log})
    out: dict[int, LinkStats] = {}
    if not log:
        return out
    t0 = np.floor(min(r.t for r in log) / window) * window
    t1 = max(r.t for r in log)
    n_windows = max(int(np.floor((t1 - t0) / window)) + 1, 1)
    for robot in robots:
        stats = LinkStats()
        up_bins = np.zeros(n_windows)
        down_bins = np.zeros(n_windows)
        kf_sizes = []
        for rec in log:
            if rec.robot_id != robot:
                continue
            b = int(np.floor((rec.t - t0) / window))
            if rec.direction == "up":
                stats.bytes_up += rec.bytes
                stats.messages_up += 1
                up_bins[b] += rec.bytes
                if rec.msg_type == MSG_KEYFRAME:
                    kf_sizes.append(rec.bytes)
            else:
                stats.bytes_down += rec.bytes
                stats.messages_down += 1
                down_bins[b] += rec.bytes
        scale = 1000.0 * window  # bytes per bin -> kB per second
        stats.up_kbps_mean = float(up_bins.mean() / scale)
        stats.up_kbps_std = float(up_bins.std() / scale)
        stats.down_kbps_mean = float(down_bins.mean() / scale)
        stats.down_kbps_std = float(down_bins.std() / scale)
        stats.mean_keyframe_bytes = float(np.mean(kf_sizes)) if kf_sizes else 0.0
        out[robot] = stats
    return out


def write_traffic_csv(path, log: list[TrafficRecord]):
    with open(path, "w") as f:
        f.write("t,robot_id,direction,bytes,msg_type\n")
        for rec in log:
            f.write(f"{rec.t:.6f},{rec.robot_id},{rec.direction},{rec.bytes},{rec.msg_type}\n")


def keyframe_fixed_overhead() -> int:
    """Encoded size of a keyframe message with empty cloud and no ranges."""
    return (
        HEADER.size
        + struct.calcsize("<IIdB")
        + 56  # pose
        + 36 * 8  # covariance
        + DESCRIPTOR_SHAPE[0] * DESCRIPTOR_SHAPE[1] * 4
        + 4  # point count
        + 4  # range count
    )

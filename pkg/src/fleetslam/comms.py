"""Message schema, bit-exact encoding and a metered broadcast channel.

All payloads are big-endian. Sizes (bits)::

    Descriptor    sender u8 | keyframe u16 | pose 3*f32 | histogram 16*u8        = 248
    CloudRequest  sender u8 | target u8 | keyframe u16                          = 32
    Cloud         sender u8 | keyframe u16 | compressed cloud                   = 24 + 112 + 16n
                  sender u8 | keyframe u16 | count u16 | n * (x f32, y f32)     = 24 + 16 + 64n
    Loop          src (robot u8, kf u16) | dst (robot u8, kf u16)
                  | transform 3*f32 | covariance diagonal 3*f32                 = 240
    PoseUpdate    sender u8 | count u16 | k * (keyframe u16 | pose 3*f32)       = 24 + 112k

The sender of a loop message is the robot of its ``src`` key. Whether a
cloud is compressed travels with the message envelope and is not counted.
"""

from __future__ import annotations

import csv
import struct
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import codec
from .geometry import PointCloud2D, Pose2, as_points
from .place import N_BINS, SceneDescriptor


class Variant(str, Enum):
    DESCRIPTOR = "DescriptorMsg"
    CLOUD_REQUEST = "CloudRequestMsg"
    CLOUD = "CloudMsg"
    LOOP = "LoopMsg"
    POSE_UPDATE = "PoseUpdateMsg"


class MessageOverflowError(ValueError):
    """A field value does not fit its wire width."""


def _u8(v: int) -> int:
    if not 0 <= v <= 0xFF:
        raise MessageOverflowError(f"{v} does not fit in u8")
    return v


def _u16(v: int) -> int:
    if not 0 <= v <= 0xFFFF:
        raise MessageOverflowError(f"{v} does not fit in u16")
    return v


def f32(v: float) -> float:
    """Round to the nearest float32, as values are after a trip over the wire."""
    return float(np.float32(v))


def f32_pose(p: Pose2) -> Pose2:
    return Pose2(f32(p.x), f32(p.y), f32(p.theta))


_POSE = struct.Struct(">fff")
_DESC = struct.Struct(">BH3f16B")
_REQ = struct.Struct(">BBH")
_CLOUD_HEAD = struct.Struct(">BH")
_LOOP = struct.Struct(">BHBH3f3f")
_POSE_HEAD = struct.Struct(">BH")
_POSE_ITEM = struct.Struct(">H3f")


@dataclass(frozen=True)
class DescriptorMsg:
    sender: int
    keyframe: int
    pose: Pose2
    histogram: tuple[int, ...]

    variant = Variant.DESCRIPTOR

    def descriptor(self, bin_width: float = 0.0) -> SceneDescriptor:
        return SceneDescriptor(tuple(self.histogram), bin_width)


@dataclass(frozen=True)
class CloudRequestMsg:
    sender: int
    target: int
    keyframe: int

    variant = Variant.CLOUD_REQUEST


@dataclass(frozen=True, eq=False)
class CloudMsg:
    sender: int
    keyframe: int
    cloud: Union[codec.CompressedCloud, PointCloud2D]

    variant = Variant.CLOUD

    @property
    def compressed(self) -> bool:
        return isinstance(self.cloud, codec.CompressedCloud)

    def points(self) -> np.ndarray:
        if self.compressed:
            return codec.decompress(self.cloud).points
        return as_points(self.cloud)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CloudMsg):
            return NotImplemented
        return encode(self) == encode(other) and self.compressed == other.compressed


@dataclass(frozen=True)
class LoopMsg:
    src: tuple[int, int]
    dst: tuple[int, int]
    transform: Pose2
    cov_diag: tuple[float, float, float]

    variant = Variant.LOOP

    @property
    def sender(self) -> int:
        return self.src[0]


@dataclass(frozen=True)
class PoseUpdateMsg:
    sender: int
    poses: tuple[tuple[int, Pose2], ...] = ()

    variant = Variant.POSE_UPDATE


NetMessage = Union[DescriptorMsg, CloudRequestMsg, CloudMsg, LoopMsg, PoseUpdateMsg]


def encode(m: NetMessage) -> bytes:
    """Serialise a message to its normative payload.

    Raises:
        MessageOverflowError: if an id or count exceeds its field width.
    """
    if isinstance(m, DescriptorMsg):
        if len(m.histogram) != N_BINS:
            raise ValueError(f"histogram needs {N_BINS} bins")
        return _DESC.pack(_u8(m.sender), _u16(m.keyframe), m.pose.x, m.pose.y, m.pose.theta,
                          *(_u8(int(b)) for b in m.histogram))
    if isinstance(m, CloudRequestMsg):
        return _REQ.pack(_u8(m.sender), _u8(m.target), _u16(m.keyframe))
    if isinstance(m, CloudMsg):
        head = _CLOUD_HEAD.pack(_u8(m.sender), _u16(m.keyframe))
        try:
            body = codec.to_bytes(m.cloud) if m.compressed else codec.raw_to_bytes(m.cloud)
        except codec.CodecOverflowError as exc:
            raise MessageOverflowError(str(exc)) from exc
        return head + body
    if isinstance(m, LoopMsg):
        t = m.transform
        return _LOOP.pack(_u8(m.src[0]), _u16(m.src[1]), _u8(m.dst[0]), _u16(m.dst[1]),
                          t.x, t.y, t.theta, *m.cov_diag)
    if isinstance(m, PoseUpdateMsg):
        parts = [_POSE_HEAD.pack(_u8(m.sender), _u16(len(m.poses)))]
        parts += [_POSE_ITEM.pack(_u16(k), p.x, p.y, p.theta) for k, p in m.poses]
        return b"".join(parts)
    raise TypeError(f"not a message: {type(m).__name__}")


def size_bits(m: NetMessage) -> int:
    return 8 * len(encode(m))


def decode(variant: Variant, data: bytes, compressed: bool = True) -> NetMessage:
    """Inverse of :func:`encode` (floats come back float32-rounded)."""
    variant = Variant(variant)
    if variant is Variant.DESCRIPTOR:
        v = _DESC.unpack(data)
        return DescriptorMsg(v[0], v[1], Pose2(v[2], v[3], v[4]), tuple(v[5:]))
    if variant is Variant.CLOUD_REQUEST:
        return CloudRequestMsg(*_REQ.unpack(data))
    if variant is Variant.CLOUD:
        sender, kf = _CLOUD_HEAD.unpack_from(data, 0)
        body = data[_CLOUD_HEAD.size:]
        cloud, used = codec.from_bytes(body) if compressed else codec.raw_from_bytes(body)
        if used != len(body):
            raise ValueError("trailing bytes after cloud payload")
        return CloudMsg(sender, kf, cloud)
    if variant is Variant.LOOP:
        v = _LOOP.unpack(data)
        return LoopMsg((v[0], v[1]), (v[2], v[3]), Pose2(v[4], v[5], v[6]), tuple(v[7:10]))
    sender, count = _POSE_HEAD.unpack_from(data, 0)
    if len(data) != _POSE_HEAD.size + count * _POSE_ITEM.size:
        raise ValueError("pose update length does not match its count")
    poses = []
    for i in range(count):
        k, x, y, th = _POSE_ITEM.unpack_from(data, _POSE_HEAD.size + i * _POSE_ITEM.size)
        poses.append((k, Pose2(x, y, th)))
    return PoseUpdateMsg(sender, tuple(poses))


# -- channel -----------------------------------------------------------------


@dataclass(frozen=True)
class ChannelEvent:
    timestamp: float
    sender: int
    variant: Variant
    size_bits: int
    target: int = -1  # requested robot, CloudRequest only
    keyframe: int = -1  # keyframe referenced by Descriptor / CloudRequest / Cloud


@dataclass(frozen=True)
class Delivery:
    timestamp: float
    message: NetMessage
    raw: bytes


CSV_HEADER = ("timestamp", "sender", "variant", "size_bits", "target", "keyframe")


class Channel:
    """Reliable, lossless, in-order broadcast medium shared by the team.

    Every broadcast is logged once (or once per recipient when
    ``per_recipient`` is set) and delivered to every robot but the sender.
    """

    def __init__(self, robots: Iterable[int], per_recipient: bool = False):
        self.robots = sorted(set(robots))
        self.per_recipient = per_recipient
        self.queues: dict[int, deque[Delivery]] = {r: deque() for r in self.robots}
        self.log: list[ChannelEvent] = []

    def broadcast(self, m: NetMessage, t: float) -> int:
        """Send ``m`` at time ``t``; returns the number of deliveries."""
        if self.log and t < self.log[-1].timestamp:
            raise ValueError(f"timestamp {t} precedes last event {self.log[-1].timestamp}")
        raw = encode(m)
        compressed = m.compressed if isinstance(m, CloudMsg) else True
        received = decode(m.variant, raw, compressed)
        recipients = [r for r in self.robots if r != m.sender]
        for r in recipients:
            self.queues[r].append(Delivery(t, received, raw))
        target = m.target if isinstance(m, CloudRequestMsg) else -1
        keyframe = getattr(m, "keyframe", -1)
        event = ChannelEvent(float(t), m.sender, m.variant, 8 * len(raw), target, keyframe)
        self.log.extend([event] * (len(recipients) if self.per_recipient else 1))
        return len(recipients)

    def receive(self, robot: int) -> list[Delivery]:
        q = self.queues[robot]
        out = list(q)
        q.clear()
        return out

    def pending(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def total_bits(self, variant: Optional[Variant] = None) -> int:
        return sum(e.size_bits for e in self.log if variant is None or e.variant is variant)


def write_log_csv(log: Sequence[ChannelEvent], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for e in log:
            w.writerow([f"{e.timestamp:.6f}", e.sender, e.variant.value, e.size_bits, e.target, e.keyframe])


def read_log_csv(path: str | Path) -> list[ChannelEvent]:
    with open(path, newline="", encoding="ascii") as fh:
        rows = list(csv.DictReader(fh))
    return [
        ChannelEvent(float(r["timestamp"]), int(r["sender"]), Variant(r["variant"]), int(r["size_bits"]),
                     int(r["target"]), int(r["keyframe"]))
        for r in rows
    ]


@dataclass
class Utilization:
    times: np.ndarray
    series: np.ndarray  # bits/s over the trailing window at each event
    average: float
    minimum: float
    maximum: float
    total_bits: int
    duration: float


def utilization(
    log: Sequence[ChannelEvent],
    window: int = 100,
    start: float = 0.0,
    duration: Optional[float] = None,
) -> Utilization:
    """Sliding-window bit rate and mission summary.

    The window ending at event ``i`` covers the last ``window`` events and
    spans from the event just before it (or ``start``) to event ``i``.
    Windows of zero duration are skipped. The summary average is total bits
    over the mission ``duration``, which defaults to ``last event - start``.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if not log:
        return Utilization(np.zeros(0), np.zeros(0), 0.0, 0.0, 0.0, 0, duration or 0.0)
    t = np.array([e.timestamp for e in log])
    bits = np.array([e.size_bits for e in log], dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(bits)])
    idx = np.arange(len(t))
    lo = np.maximum(idx - window + 1, 0)
    win_bits = csum[idx + 1] - csum[lo]
    begin = np.where(idx >= window, t[np.maximum(idx - window, 0)], start)
    span = t - begin
    ok = span > 0
    series = win_bits[ok] / span[ok]
    total = int(bits.sum())
    dur = float(t[-1] - start) if duration is None else float(duration)
    avg = total / dur if dur > 0 else 0.0
    lo_v = float(series.min()) if len(series) else 0.0
    hi_v = float(series.max()) if len(series) else 0.0
    return Utilization(t[ok], series, avg, lo_v, hi_v, total, dur)


def write_utilization_csv(u: Utilization, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("timestamp", "bits_per_second"))
        for ti, v in zip(u.times, u.series):
            w.writerow([f"{ti:.6f}", f"{v:.6f}"])


def causality_violations(log: Sequence[ChannelEvent]) -> list[str]:
    """Protocol order check on a channel log.

    Every CloudRequest for (robot, keyframe) must follow that robot's
    Descriptor for the keyframe, and every Cloud from (robot, keyframe) must
    follow a CloudRequest targeting it.
    """
    described: set[tuple[int, int]] = set()
    requested: set[tuple[int, int]] = set()
    problems = []
    for i, e in enumerate(log):
        if e.variant is Variant.DESCRIPTOR:
            described.add((e.sender, e.keyframe))
        elif e.variant is Variant.CLOUD_REQUEST:
            if (e.target, e.keyframe) not in described:
                problems.append(f"event {i}: request for {e.target}:{e.keyframe} before its descriptor")
            requested.add((e.target, e.keyframe))
        elif e.variant is Variant.CLOUD:
            if (e.sender, e.keyframe) not in requested:
                problems.append(f"event {i}: cloud {e.sender}:{e.keyframe} sent without a request")
    return problems

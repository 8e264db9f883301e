"""Voxel compression of point clouds into 8-bit grid cells, and the wire
layout used for cloud messages.

Compressed wire layout (big-endian)::

    origin_x f32 | origin_y f32 | resolution f32 | count u16 | (i u8, j u8) * count
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import CloudLike, PointCloud2D, as_points

HEADER_BITS = 96
COUNT_BITS = 16
CELL_BITS = 16
RAW_POINT_BITS = 64
MAX_CELL_INDEX = 255

_HEADER = struct.Struct(">fffH")


class CodecOverflowError(ValueError):
    """A cell index or count does not fit its wire field."""


@dataclass
class CompressedCloud:
    origin: tuple[float, float]
    resolution: float
    cells: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.uint8))

    def __post_init__(self) -> None:
        self.cells = np.asarray(self.cells, dtype=np.uint8).reshape(-1, 2)

    @property
    def count(self) -> int:
        return len(self.cells)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CompressedCloud):
            return NotImplemented
        return (
            tuple(self.origin) == tuple(other.origin)
            and self.resolution == other.resolution
            and np.array_equal(self.cells, other.cells)
        )


def _f32_floor(v: float) -> float:
    """Largest float32 value not exceeding ``v``."""
    f = np.float32(v)
    if float(f) > v:
        f = np.nextafter(f, np.float32(-np.inf))
    return float(f)


def compress(cloud: CloudLike, delta: float) -> CompressedCloud:
    """Discretise a cloud onto a ``delta`` grid anchored at its min corner."""
    if delta <= 0:
        raise ValueError("compression resolution must be positive")
    res = float(np.float32(delta))
    pts = as_points(cloud)
    if len(pts) == 0:
        return CompressedCloud((0.0, 0.0), res)
    lo = pts.min(axis=0)
    origin = (_f32_floor(lo[0]), _f32_floor(lo[1]))
    # the epsilon absorbs float noise when re-compressing decoded voxel centres
    idx = np.floor((pts - np.array(origin)) / res + 1e-9).astype(np.int64)
    if idx.min() < 0 or idx.max() > MAX_CELL_INDEX:
        extent = pts.max(axis=0) - lo
        raise CodecOverflowError(
            f"cloud extent {extent.tolist()} m exceeds 256 cells at {delta} m resolution"
        )
    cells = np.unique(idx, axis=0)  # sorted by (i, j)
    if len(cells) > 0xFFFF:
        raise CodecOverflowError("more than 65535 occupied cells")
    return CompressedCloud(origin, res, cells.astype(np.uint8))


def decompress(c: CompressedCloud, frame: int | None = None) -> PointCloud2D:
    """Voxel centres of every occupied cell."""
    if c.count == 0:
        return PointCloud2D(np.zeros((0, 2)), frame)
    pts = np.asarray(c.origin) + (c.cells.astype(np.float64) + 0.5) * c.resolution
    return PointCloud2D(pts, frame)


def encoded_size_bits(c: CompressedCloud | CloudLike) -> int:
    """Exact payload size: 64 bits/point raw, or header + count + 16 bits/cell."""
    if isinstance(c, CompressedCloud):
        return HEADER_BITS + COUNT_BITS + CELL_BITS * c.count
    return RAW_POINT_BITS * len(as_points(c))


def to_bytes(c: CompressedCloud) -> bytes:
    if c.count > 0xFFFF:
        raise CodecOverflowError("cell count exceeds u16")
    head = _HEADER.pack(c.origin[0], c.origin[1], c.resolution, c.count)
    return head + c.cells.astype(np.uint8).tobytes()


def from_bytes(data: bytes) -> tuple[CompressedCloud, int]:
    """Parse a compressed cloud; returns the cloud and bytes consumed."""
    ox, oy, res, count = _HEADER.unpack_from(data, 0)
    end = _HEADER.size + 2 * count
    if len(data) < end:
        raise ValueError("truncated compressed cloud")
    cells = np.frombuffer(data[_HEADER.size:end], dtype=np.uint8).reshape(-1, 2)
    return CompressedCloud((float(ox), float(oy)), float(res), cells.copy()), end


def raw_to_bytes(cloud: CloudLike) -> bytes:
    """Raw layout: count u16 followed by (x f32, y f32) per point."""
    pts = as_points(cloud)
    if len(pts) > 0xFFFF:
        raise CodecOverflowError("point count exceeds u16")
    return struct.pack(">H", len(pts)) + pts.astype(">f4").tobytes()


def raw_from_bytes(data: bytes) -> tuple[PointCloud2D, int]:
    (count,) = struct.unpack_from(">H", data, 0)
    end = 2 + 8 * count
    if len(data) < end:
        raise ValueError("truncated raw cloud")
    pts = np.frombuffer(data[2:end], dtype=">f4").astype(np.float64).reshape(-1, 2)
    return PointCloud2D(pts), end

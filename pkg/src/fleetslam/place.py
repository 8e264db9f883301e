"""Scene descriptors for place retrieval and coarse scene images for
pre-registration screening."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CloudLike, as_points

N_BINS = 16
DESCRIPTOR_BITS = N_BINS * 8
DEFAULT_MAX_TREE_DISTANCE = 40.0
DEFAULT_SCENE_CELL = 1.0


@dataclass(frozen=True)
class SceneDescriptor:
    """Range histogram: 16 saturating 8-bit counts."""

    bins: tuple[int, ...]
    bin_width: float

    def __post_init__(self) -> None:
        if len(self.bins) != N_BINS:
            raise ValueError(f"descriptor needs {N_BINS} bins, got {len(self.bins)}")
        if any(b < 0 or b > 255 for b in self.bins):
            raise ValueError("descriptor bins must fit in u8")

    def vector(self) -> np.ndarray:
        return np.asarray(self.bins, dtype=np.float64)

    def to_bytes(self) -> bytes:
        return bytes(self.bins)

    @classmethod
    def from_bytes(cls, data: bytes, bin_width: float = 0.0) -> "SceneDescriptor":
        return cls(tuple(data[:N_BINS]), bin_width)


def make_descriptor(cloud: CloudLike, max_range: float) -> SceneDescriptor:
    """Count points per range bin; points at or beyond ``max_range`` are dropped."""
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    pts = as_points(cloud)
    width = max_range / N_BINS
    r = np.hypot(pts[:, 0], pts[:, 1])
    r = r[r < max_range]
    k = np.minimum((r / width).astype(np.int64), N_BINS - 1)
    counts = np.minimum(np.bincount(k, minlength=N_BINS), 255)
    return SceneDescriptor(tuple(int(c) for c in counts), width)


class DescriptorTree:
    """Exact nearest-neighbour index over scene descriptors.

    The k-d tree is rebuilt lazily after inserts. Results are sorted by
    distance with insertion order breaking ties, so they match a linear scan.
    """

    def __init__(self) -> None:
        self._ids: list[Hashable] = []
        self._rows: list[np.ndarray] = []
        self._tree: cKDTree | None = None
        self._data: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, key: Hashable) -> bool:
        return key in self._ids

    def insert(self, key: Hashable, d: SceneDescriptor) -> None:
        self._ids.append(key)
        self._rows.append(d.vector())
        self._tree = None

    def _build(self) -> None:
        self._data = np.vstack(self._rows)
        self._tree = cKDTree(self._data)

    def query(self, d: SceneDescriptor, max_dist: float, k: int) -> list[tuple[Hashable, float]]:
        if not self._ids or k <= 0:
            return []
        if self._tree is None:
            self._build()
        q = d.vector()
        hits = self._tree.query_ball_point(q, r=max_dist)
        if not hits:
            return []
        hits = np.asarray(sorted(hits))
        dist = np.sqrt(((self._data[hits] - q) ** 2).sum(axis=1))
        keep = dist <= max_dist
        hits, dist = hits[keep], dist[keep]
        order = np.lexsort((hits, dist))[:k]
        return [(self._ids[i], float(dist_i)) for i, dist_i in zip(hits[order], dist[order])]


def tree_insert(tree: DescriptorTree, key: Hashable, d: SceneDescriptor) -> None:
    tree.insert(key, d)


def tree_query(tree: DescriptorTree, d: SceneDescriptor, max_dist: float, k: int) -> list[tuple[Hashable, float]]:
    return tree.query(d, max_dist, k)


@dataclass
class SceneImage:
    grid: np.ndarray
    cell: float
    max_range: float

    @property
    def mass(self) -> int:
        return int(self.grid.sum())


def make_scene_image(cloud: CloudLike, cell: float = DEFAULT_SCENE_CELL, max_range: float = 30.0) -> SceneImage:
    """Binary occupancy raster of side ``2 * max_range`` centred on the sensor."""
    if cell <= 0:
        raise ValueError("scene image cell must be positive")
    n = int(np.ceil(2.0 * max_range / cell))
    grid = np.zeros((n, n), dtype=bool)
    pts = as_points(cloud)
    if len(pts):
        ij = np.floor((pts + max_range) / cell).astype(np.int64)
        inside = np.all((ij >= 0) & (ij < n), axis=1)
        ij = ij[inside]
        grid[ij[:, 0], ij[:, 1]] = True
    return SceneImage(grid, cell, max_range)


def scene_sad(a: SceneImage, b: SceneImage) -> float:
    """Normalised sum of absolute differences in [0, 1]."""
    if a.grid.shape != b.grid.shape:
        raise ValueError(f"scene image shapes differ: {a.grid.shape} vs {b.grid.shape}")
    diff = np.count_nonzero(a.grid != b.grid)
    return diff / max(a.mass + b.mass, 1)

"""Sonar image processing: CA-CFAR detection, metric projection and
medoid voxel downsampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .geometry import PointCloud2D, as_points, CloudLike

DEFAULT_FRONTEND_VOXEL = 0.3


@dataclass
class PolarImage:
    """Intensity grid of shape ``(n_range_bins, n_beams)``.

    ``bearing_of_beam`` maps a beam index to its bearing in radians. When it
    is omitted, beams are spread uniformly across ``fov`` centred on the
    sensor x axis.
    """

    intensities: np.ndarray
    range_resolution: float
    fov: float = math.radians(130.0)
    bearing_of_beam: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self) -> None:
        img = np.asarray(self.intensities, dtype=np.float64)
        if img.ndim != 2:
            raise ValueError("polar image must be 2D (range bins x beams)")
        if not np.all(np.isfinite(img)) or np.any(img < 0):
            raise ValueError("intensities must be finite and non-negative")
        self.intensities = img

    @property
    def n_range_bins(self) -> int:
        return self.intensities.shape[0]

    @property
    def n_beams(self) -> int:
        return self.intensities.shape[1]

    @property
    def max_range(self) -> float:
        return self.n_range_bins * self.range_resolution

    def bearings(self, beams: np.ndarray) -> np.ndarray:
        beams = np.asarray(beams)
        if self.bearing_of_beam is not None:
            return np.asarray(self.bearing_of_beam(beams), dtype=np.float64)
        return uniform_bearings(self.n_beams, self.fov)[beams]


def uniform_bearings(n_beams: int, fov: float) -> np.ndarray:
    """Beam-centre bearings for ``n_beams`` spanning ``fov`` radians."""
    return -0.5 * fov + (np.arange(n_beams) + 0.5) * (fov / n_beams)


@dataclass(frozen=True)
class CfarParams:
    train_cells: int = 10
    guard_cells: int = 2
    pfa: float = 1e-3

    def __post_init__(self) -> None:
        if self.train_cells < 1:
            raise ValueError("train_cells must be >= 1")
        if self.guard_cells < 0:
            raise ValueError("guard_cells must be >= 0")
        if not 0.0 < self.pfa < 1.0:
            raise ValueError("pfa must lie in (0, 1)")


def cfar_scale(n_train: np.ndarray | int, pfa: float) -> np.ndarray:
    """CA-CFAR threshold multiplier for ``n_train`` averaged cells."""
    n = np.asarray(n_train, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return n * (pfa ** (-1.0 / n) - 1.0)


def cfar_detect(img: PolarImage, p: CfarParams) -> np.ndarray:
    """Cell-averaging CFAR along the range axis of every beam.

    Training cells sit on both sides of the cell under test beyond the guard
    band. Near the image edges only the training cells that exist are used,
    and the threshold multiplier is computed from that reduced count.

    Returns:
        Boolean mask with the same shape as the image.
    """
    data = img.intensities
    n_bins = data.shape[0]
    t, g = p.train_cells, p.guard_cells
    if 2 * (t + g) + 1 > n_bins:
        raise ValueError(
            f"CFAR window (train={t}, guard={g}) exceeds {n_bins} range bins"
        )

    # direct window sums over a zero-padded copy; prefix sums would cancel
    # catastrophically next to strong returns
    pad = np.zeros((g + t, data.shape[1]))
    padded = np.vstack([pad, data, pad])
    win = np.lib.stride_tricks.sliding_window_view(padded, t, axis=0).sum(axis=-1)
    lead_sum = win[:n_bins]
    lag_sum = win[2 * g + t + 1 : 2 * g + t + 1 + n_bins]

    idx = np.arange(n_bins)
    count = (np.clip(idx - g, 0, None) - np.clip(idx - g - t, 0, None)) + (
        np.clip(idx + g + t + 1, None, n_bins) - np.clip(idx + g + 1, None, n_bins)
    )

    noise = (lead_sum + lag_sum) / count[:, None]
    alpha = cfar_scale(count, p.pfa)[:, None]
    return data > alpha * noise


def mask_to_cloud(mask: np.ndarray, img: PolarImage, frame: Optional[int] = None) -> PointCloud2D:
    """Project flagged cells to the sensor plane using bin-centre ranges."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.intensities.shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {img.intensities.shape}")
    bins, beams = np.nonzero(mask)
    r = (bins + 0.5) * img.range_resolution
    b = img.bearings(beams)
    return PointCloud2D(np.column_stack([r * np.cos(b), r * np.sin(b)]), frame)


def medoid_index(points: np.ndarray) -> int:
    """Index of the member minimising the summed distance to the others.

    Ties go to the lowest index (``argmin`` returns the first minimum).
    """
    if len(points) == 1:
        return 0
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1))
    return int(np.argmin(d.sum(axis=1)))


def downsample_medoid(cloud: CloudLike, voxel: float = DEFAULT_FRONTEND_VOXEL) -> PointCloud2D:
    """Replace each occupied voxel by the medoid of its points.

    Output is ordered by voxel index ``(i, j)`` ascending.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    pts = as_points(cloud)
    frame = cloud.frame if isinstance(cloud, PointCloud2D) else None
    if len(pts) == 0:
        return PointCloud2D(np.zeros((0, 2)), frame)

    cells = np.floor(pts / voxel).astype(np.int64)
    # stable sort keeps input order inside each voxel
    order = np.lexsort((cells[:, 1], cells[:, 0]))
    sorted_cells = cells[order]
    breaks = np.flatnonzero(np.any(np.diff(sorted_cells, axis=0) != 0, axis=1)) + 1
    out = []
    for group in np.split(order, breaks):
        members = pts[group]
        out.append(members[medoid_index(members)])
    return PointCloud2D(np.array(out), frame)


def extract_cloud(
    img: PolarImage,
    params: CfarParams,
    voxel: float = DEFAULT_FRONTEND_VOXEL,
    frame: Optional[int] = None,
) -> PointCloud2D:
    """Full frontend: CFAR, projection, medoid downsampling."""
    mask = cfar_detect(img, params)
    return downsample_medoid(mask_to_cloud(mask, img, frame), voxel)


def write_pgm(mask: np.ndarray, path: str | Path) -> None:
    """Dump a detection mask as a binary (P5) PGM for debugging."""
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())

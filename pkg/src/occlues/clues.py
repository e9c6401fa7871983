"""3D clue generation from depth and segmentation rasters.

Pipeline: unproject every frame, accumulate the clouds in the target ego frame,
split by class, run a radius filter and then a statistical filter on each class,
merge back in class-id order and voxelise.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cloud import SemanticPointCloud
from .errors import InvalidInputError
from .formats import IGNORE_LABEL, DepthMap, SemanticMap
from .geometry import CameraModel, Pose, invert_pose, transform_points, unproject_pixels
from .voxel import GridConfig, LabelGrid, voxelize

log = logging.getLogger(__name__)

# Relative band around the query radius inside which the tree's distance
# arithmetic may disagree with ours; points in the band are re-checked exactly.
_BAND = 1e-9


def worker_count() -> int:
    """Thread cap from ``OCC_THREADS`` (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("OCC_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _kdtree_workers() -> int:
    n = worker_count()
    return -1 if n == (os.cpu_count() or 1) else n


@dataclass(frozen=True)
class FrameBundle:
    depth: DepthMap
    semantics: SemanticMap
    cam: CameraModel
    frame_pose: Pose  # frame's ego (the camera model's world) to world

    def __post_init__(self) -> None:
        if self.depth.values.shape != self.semantics.labels.shape:
            raise InvalidInputError(
                f"depth {self.depth.values.shape} and semantics {self.semantics.labels.shape} differ in size"
            )


@dataclass(frozen=True)
class FilterConfig:
    radius: float = 0.4
    min_neighbors: int = 5
    sor_k: int = 16
    sor_alpha: float = 2.0

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise InvalidInputError(f"radius must be > 0, got {self.radius}")
        if self.min_neighbors < 1:
            raise InvalidInputError(f"min_neighbors must be >= 1, got {self.min_neighbors}")
        if self.sor_k < 1:
            raise InvalidInputError(f"sor_k must be >= 1, got {self.sor_k}")
        if not self.sor_alpha > 0:
            raise InvalidInputError(f"sor_alpha must be > 0, got {self.sor_alpha}")

    def to_dict(self) -> dict:
        return {"radius": self.radius, "min_neighbors": self.min_neighbors,
                "sor_k": self.sor_k, "sor_alpha": self.sor_alpha}

    @classmethod
    def from_dict(cls, d: dict) -> "FilterConfig":
        return cls(float(d["radius"]), int(d["min_neighbors"]), int(d["sor_k"]), float(d["sor_alpha"]))


# -- unprojection and accumulation ---------------------------------------------

def unproject_frame(frame: FrameBundle, stride: int = 1) -> SemanticPointCloud:
    """World-frame points for sampled pixels with depth and a usable class.

    Pixels with the 0.0 depth sentinel, the ignore label 255 or label 0 (no
    class) are skipped. Points come out in row-major pixel order.
    """
    if stride < 1:
        raise InvalidInputError(f"stride must be >= 1, got {stride}")
    depth = frame.depth.values[::stride, ::stride]
    sem = frame.semantics.labels[::stride, ::stride]
    keep = (depth > 0) & (sem != IGNORE_LABEL) & (sem != 0)
    rows, cols = np.nonzero(keep)
    if rows.size == 0:
        return SemanticPointCloud.empty()
    uv = np.stack([cols * stride, rows * stride], axis=1).astype(np.float64)
    ego = unproject_pixels(uv, depth[rows, cols].astype(np.float64), frame.cam)
    return SemanticPointCloud(frame.frame_pose.apply(ego), sem[rows, cols])


def accumulate_frames(frames: Sequence[FrameBundle], target_pose: Pose,
                      stride: int = 1) -> SemanticPointCloud:
    """All frames' points expressed in the target ego frame, frame order kept."""
    if not frames:
        raise InvalidInputError("need at least one frame to accumulate")
    to_target = invert_pose(target_pose)

    def one(frame: FrameBundle) -> SemanticPointCloud:
        return transform_points(unproject_frame(frame, stride), to_target)

    if len(frames) > 1 and worker_count() > 1:
        with ThreadPoolExecutor(worker_count()) as pool:
            clouds = list(pool.map(one, frames))
    else:
        clouds = [one(f) for f in frames]
    return SemanticPointCloud.concat(clouds)


def split_by_class(cloud: SemanticPointCloud) -> dict[int, SemanticPointCloud]:
    return {int(c): cloud.subset(cloud.classes == c) for c in np.unique(cloud.classes)}


# -- spatial index -------------------------------------------------------------

def _dist(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Euclidean distance, the one formula every filter decision uses."""
    return np.sqrt(((points - center) ** 2).sum(axis=-1))


class SpatialIndex:
    """k-d tree over a point set with exact radius / k-NN semantics.

    ``center`` may be a coordinate or an integer index into the indexed set;
    an integer also excludes that point from the result.
    """

    def __init__(self, points) -> None:
        pts = points.coords if isinstance(points, SemanticPointCloud) else points
        self.points = np.ascontiguousarray(np.asarray(pts, dtype=np.float64).reshape(-1, 3))
        self.tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def _center(self, center) -> tuple[np.ndarray, int | None]:
        if isinstance(center, (int, np.integer)):
            return self.points[int(center)], int(center)
        return np.asarray(center, dtype=np.float64).reshape(3), None

    def radius_query(self, center, r: float) -> np.ndarray:
        """Sorted indices ``i`` with ``dist <= r`` (query point excluded)."""
        if not r > 0:
            raise InvalidInputError(f"radius must be > 0, got {r}")
        if self.tree is None:
            return np.zeros(0, dtype=np.int64)
        c, skip = self._center(center)
        cand = np.asarray(self.tree.query_ball_point(c, r * (1 + _BAND)), dtype=np.int64)
        cand = cand[_dist(self.points[cand], c) <= r]
        if skip is not None:
            cand = cand[cand != skip]
        return np.sort(cand)

    def knn_query(self, center, k: int) -> np.ndarray:
        """The ``k`` nearest indices by distance, ties to the smaller index."""
        if k < 1:
            raise InvalidInputError(f"k must be >= 1, got {k}")
        c, skip = self._center(center)
        avail = len(self) - (skip is not None)
        k = min(k, avail)
        if k <= 0:
            return np.zeros(0, dtype=np.int64)
        _, idx = self.tree.query(c, k=min(k + 1, len(self)))
        idx = np.atleast_1d(idx)
        if skip is not None:
            idx = idx[idx != skip]
        reach = _dist(self.points[idx[:k]], c).max()
        cand = np.asarray(self.tree.query_ball_point(c, reach * (1 + _BAND) + 1e-300), dtype=np.int64)
        if skip is not None:
            cand = cand[cand != skip]
        d = _dist(self.points[cand], c)
        order = np.lexsort((cand, d))
        return cand[order[:k]]

    def neighbor_counts(self, r: float) -> np.ndarray:
        """Per indexed point: number of other points within ``r``."""
        n = len(self)
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        pairs = self.tree.query_pairs(r * (1 + _BAND), output_type="ndarray")
        pairs = pairs[_dist(self.points[pairs[:, 0]], self.points[pairs[:, 1]]) <= r]
        return np.bincount(pairs.reshape(-1), minlength=n).astype(np.int64)

    def knn_mean_distances(self, k: int) -> np.ndarray:
        """Per indexed point: mean distance to its ``min(k, N-1)`` nearest others."""
        n = len(self)
        k = min(k, n - 1)
        if k <= 0:
            return np.zeros(n)
        _, idx = self.tree.query(self.points, k=k + 1, workers=_kdtree_workers())
        idx = np.asarray(idx).reshape(n, k + 1)
        is_self = idx == np.arange(n)[:, None]
        # drop self; if a zero-distance duplicate displaced it, drop the last column
        drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
        keep = np.ones_like(idx, dtype=bool)
        keep[np.arange(n), drop] = False
        nbr = idx[keep].reshape(n, k)
        d = np.sort(_dist(self.points[nbr], self.points[:, None, :]), axis=1)
        total = d[:, 0].copy()
        for j in range(1, k):
            total += d[:, j]
        return total / k


def build_spatial_index(points) -> SpatialIndex:
    return SpatialIndex(points)


def radius_query(index: SpatialIndex, center, r: float) -> np.ndarray:
    return index.radius_query(center, r)


def knn_query(index: SpatialIndex, center, k: int) -> np.ndarray:
    return index.knn_query(center, k)


# -- filters -------------------------------------------------------------------

def radius_filter(cloud: SemanticPointCloud, radius: float, min_neighbors: int) -> SemanticPointCloud:
    """Keep points with at least ``min_neighbors`` other points within ``radius``."""
    if len(cloud) == 0:
        return cloud
    counts = SpatialIndex(cloud.coords).neighbor_counts(radius)
    return cloud.subset(counts >= min_neighbors)


def statistical_filter(cloud: SemanticPointCloud, sor_k: int, sor_alpha: float) -> SemanticPointCloud:
    """Drop points whose mean k-NN distance exceeds mean + alpha * std (one pass)."""
    if len(cloud) < 2:
        return cloud
    m = SpatialIndex(cloud.coords).knn_mean_distances(sor_k)
    return cloud.subset(m <= m.mean() + sor_alpha * m.std())


def filter_class_cloud(cloud: SemanticPointCloud, filt: FilterConfig) -> SemanticPointCloud:
    cloud = radius_filter(cloud, filt.radius, filt.min_neighbors)
    return statistical_filter(cloud, filt.sor_k, filt.sor_alpha)


def regularize(cloud: SemanticPointCloud, filt: FilterConfig | None) -> SemanticPointCloud:
    """Per-class filtering, re-merged in ascending class-id order."""
    parts = split_by_class(cloud)
    if filt is None:
        return SemanticPointCloud.concat(parts[c] for c in sorted(parts))
    classes = sorted(parts)
    if len(classes) > 1 and worker_count() > 1:
        with ThreadPoolExecutor(worker_count()) as pool:
            filtered = list(pool.map(lambda c: filter_class_cloud(parts[c], filt), classes))
    else:
        filtered = [filter_class_cloud(parts[c], filt) for c in classes]
    for c, before, after in zip(classes, (parts[c] for c in classes), filtered):
        log.debug("class %d: %d -> %d points", c, len(before), len(after))
    return SemanticPointCloud.concat(filtered)


def generate_clue_cloud(frames: Sequence[FrameBundle], target_pose: Pose,
                        filt: FilterConfig | None, stride: int = 1) -> SemanticPointCloud:
    """Accumulated, regularised clue points in the target ego frame."""
    return regularize(accumulate_frames(frames, target_pose, stride), filt)


def generate_clues(frames: Sequence[FrameBundle], target_pose: Pose, grid: GridConfig,
                   filt: FilterConfig | None, stride: int = 1) -> LabelGrid:
    """Clue grid for the target frame. ``filt=None`` skips regularisation."""
    return voxelize(generate_clue_cloud(frames, target_pose, filt, stride), grid)

"""Voxel grid model and voxelisation of semantic point clouds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import SemanticPointCloud
from .errors import InvalidClassError, InvalidInputError


@dataclass(frozen=True)
class GridConfig:
    """Dense H x W x Z grid; ``origin`` is the min corner of voxel (0, 0, 0).

    Label space is ``0..num_classes`` with 0 meaning empty.
    """

    dims: tuple[int, int, int] = (256, 256, 32)
    voxel_size: float = 0.2
    origin: tuple[float, float, float] = (0.0, -25.6, -2.0)
    num_classes: int = 19

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or min(dims) <= 0:
            raise InvalidInputError(f"dims must be three positive ints, got {self.dims}")
        if len(origin) != 3 or not np.all(np.isfinite(origin)):
            raise InvalidInputError(f"origin must be a finite 3-vector, got {self.origin}")
        if not (self.voxel_size > 0 and np.isfinite(self.voxel_size)):
            raise InvalidInputError(f"voxel_size must be positive, got {self.voxel_size}")
        if int(self.num_classes) < 1:
            raise InvalidInputError(f"num_classes must be >= 1, got {self.num_classes}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @classmethod
    def semantic_kitti(cls) -> "GridConfig":
        return cls((256, 256, 32), 0.2, (0.0, -25.6, -2.0), 19)

    @classmethod
    def nyu(cls) -> "GridConfig":
        return cls((60, 36, 60), 0.08, (0.0, 0.0, 0.0), 11)

    @property
    def num_voxels(self) -> int:
        h, w, z = self.dims
        return h * w * z

    def voxel_centers(self) -> np.ndarray:
        """(H, W, Z, 3) world coordinates of voxel centres."""
        axes = [self.origin[i] + (np.arange(self.dims[i]) + 0.5) * self.voxel_size for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "voxel_size": self.voxel_size,
                "origin": list(self.origin), "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(tuple(d["dims"]), d["voxel_size"], tuple(d["origin"]), d["num_classes"])


@dataclass(frozen=True, eq=False)
class LabelGrid:
    config: GridConfig
    labels: np.ndarray  # (H, W, Z) uint16, 0 = empty
    ignore_mask: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels)
        if lab.shape != self.config.dims:
            raise InvalidInputError(f"label shape {lab.shape} != grid dims {self.config.dims}")
        if lab.size and (lab.min() < 0 or lab.max() > self.config.num_classes):
            raise InvalidInputError(
                f"labels must lie in [0, {self.config.num_classes}], got max {int(lab.max())}"
            )
        lab = np.ascontiguousarray(lab, dtype=np.uint16)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        if self.ignore_mask is not None:
            mask = np.ascontiguousarray(self.ignore_mask, dtype=bool)
            if mask.shape != self.config.dims:
                raise InvalidInputError(f"ignore mask shape {mask.shape} != grid dims {self.config.dims}")
            mask.setflags(write=False)
            object.__setattr__(self, "ignore_mask", mask)

    @classmethod
    def empty(cls, config: GridConfig) -> "LabelGrid":
        return cls(config, np.zeros(config.dims, dtype=np.uint16))

    def with_mask(self, mask: np.ndarray | None) -> "LabelGrid":
        return LabelGrid(self.config, self.labels, mask)

    def equals(self, other: "LabelGrid") -> bool:
        if self.config != other.config or not np.array_equal(self.labels, other.labels):
            return False
        if self.ignore_mask is None or other.ignore_mask is None:
            return self.ignore_mask is None and other.ignore_mask is None
        return np.array_equal(self.ignore_mask, other.ignore_mask)


def voxel_indices(coords: np.ndarray, config: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Integer voxel indices for (N, 3) points and a mask of in-bounds rows."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((coords - np.asarray(config.origin)) / config.voxel_size)
    inside = np.all((idx >= 0) & (idx < np.asarray(config.dims)), axis=1)
    # out-of-range rows are clamped so the int cast is safe; callers use ``inside``
    idx = np.clip(idx, 0, np.asarray(config.dims) - 1).astype(np.int64)
    return idx, inside


def world_to_voxel(x, config: GridConfig) -> tuple[int, int, int] | None:
    """Voxel containing ``x`` or ``None`` when it falls outside the grid."""
    idx, inside = voxel_indices(np.asarray(x, dtype=np.float64).reshape(1, 3), config)
    if not inside[0]:
        return None
    return tuple(int(v) for v in idx[0])


def voxel_center(index, config: GridConfig) -> np.ndarray:
    return np.asarray(config.origin) + (np.asarray(index, dtype=np.float64) + 0.5) * config.voxel_size


def voxelize(cloud: SemanticPointCloud, config: GridConfig) -> LabelGrid:
    """Majority class per voxel; ties go to the smaller class id."""
    classes = cloud.classes
    if classes.size and (classes.min() < 1 or classes.max() > config.num_classes):
        bad = classes[(classes < 1) | (classes > config.num_classes)][0]
        raise InvalidClassError(f"class id {int(bad)} outside [1, {config.num_classes}]")
    labels = np.zeros(config.num_voxels, dtype=np.uint16)
    idx, inside = voxel_indices(cloud.coords, config)
    if inside.any():
        h, w, z = config.dims
        lin = idx[inside, 0] * (w * z) + idx[inside, 1] * z + idx[inside, 2]
        ncls = config.num_classes + 1
        keys, counts = np.unique(lin * ncls + classes[inside], return_counts=True)
        vox = keys // ncls
        cls_ = keys % ncls
        # per voxel: highest count first, then smallest class id
        order = np.lexsort((cls_, -counts, vox))
        vox, cls_ = vox[order], cls_[order]
        first = np.ones(vox.size, dtype=bool)
        first[1:] = vox[1:] != vox[:-1]
        labels[vox[first]] = cls_[first]
    return LabelGrid(config, labels.reshape(config.dims))


def occupancy_of(grid: LabelGrid) -> np.ndarray:
    return grid.labels != 0

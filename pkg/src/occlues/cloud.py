"""Semantic point cloud container shared by geometry, clue generation and export."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True, eq=False)
class SemanticPointCloud:
    """N points with float64 coordinates (meters) and an integer class per point."""

    coords: np.ndarray
    classes: np.ndarray

    def __post_init__(self) -> None:
        coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.float64).reshape(-1, 3))
        classes = np.ascontiguousarray(np.asarray(self.classes, dtype=np.int64).reshape(-1))
        if coords.shape[0] != classes.shape[0]:
            raise ValueError(
                f"coordinate count {coords.shape[0]} != class count {classes.shape[0]}"
            )
        if not np.all(np.isfinite(coords)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "classes", classes)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def empty(cls) -> "SemanticPointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, clouds: Iterable["SemanticPointCloud"]) -> "SemanticPointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.coords for c in clouds], axis=0),
            np.concatenate([c.classes for c in clouds], axis=0),
        )

    def subset(self, keep: np.ndarray) -> "SemanticPointCloud":
        """Points selected by a boolean mask or an index array, order preserved."""
        return SemanticPointCloud(self.coords[keep], self.classes[keep])

    def equals(self, other: "SemanticPointCloud") -> bool:
        return (
            len(self) == len(other)
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.classes, other.classes)
        )

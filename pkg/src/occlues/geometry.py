"""Pinhole camera model and rigid transforms.

Conventions
-----------
* Camera frame: x right, y down, z forward (optical axis).
* ``CameraModel.extrinsics`` maps world points into the camera frame
  (world-to-camera). Pose files on disk are camera-to-world; callers invert
  explicitly with :func:`invert_pose`.
* Pixels are depth-scaled homogeneous coordinates: a pixel ``(u, v)`` at depth
  ``d`` sits at ``K^-1 [u*d, v*d, d]`` in the camera frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import SemanticPointCloud
from .errors import BehindCameraError, InvalidInputError

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"intrinsics must be finite, got {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x' = R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("pose entries must be finite")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise InvalidInputError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
        det = np.linalg.det(R)
        if abs(det - 1.0) > ORTHO_TOL:
            raise InvalidInputError(f"rotation determinant is {det!r}, expected +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        """Build from a 3x4 or 4x4 ``[R | t]`` matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) or (3,) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __repr__(self) -> str:
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True)
class CameraModel:
    intrinsics: CameraIntrinsics
    extrinsics: Pose  # world-to-camera

    @classmethod
    def identity(cls) -> "CameraModel":
        return cls(CameraIntrinsics(1.0, 1.0, 0.0, 0.0), Pose.identity())


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) (closest in Frobenius norm)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def compose(a: Pose, b: Pose) -> Pose:
    """The pose applying ``b`` first, then ``a``."""
    R = nearest_rotation(a.rotation @ b.rotation)
    return Pose(R, a.rotation @ b.translation + a.translation)


def invert_pose(pose: Pose) -> Pose:
    Rt = pose.rotation.T
    return Pose(Rt, -(Rt @ pose.translation))


def transform_points(points: SemanticPointCloud, pose: Pose) -> SemanticPointCloud:
    return SemanticPointCloud(pose.apply(points.coords), points.classes.copy())


def _check_depth(d: np.ndarray) -> None:
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise InvalidInputError("depth must be positive and finite")


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Vectorised :func:`unproject_pixel`: (N, 2) pixels and (N,) depths to (N, 3) world points."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    _check_depth(d)
    k = cam.intrinsics
    cam_pts = np.stack(
        [(uv[:, 0] - k.cx) * d / k.fx, (uv[:, 1] - k.cy) * d / k.fy, d], axis=1
    )
    ext = cam.extrinsics
    # world = R^T (cam - t)
    return (cam_pts - ext.translation) @ ext.rotation


def unproject_pixel(u, d: float, cam: CameraModel) -> np.ndarray:
    """World point seen at pixel ``u = (u_x, u_y)`` with camera-frame depth ``d``."""
    return unproject_pixels(np.asarray(u, dtype=np.float64).reshape(1, 2), np.array([d]), cam)[0]


def project_points(x: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    c = cam.extrinsics.apply(pts)
    z = c[:, 2]
    if np.any(~(z > 0)):
        raise BehindCameraError("point has non-positive camera-frame depth")
    k = cam.intrinsics
    uv = np.stack([k.fx * c[:, 0] / z + k.cx, k.fy * c[:, 1] / z + k.cy], axis=1)
    return uv, z


def project_point(x, cam: CameraModel) -> tuple[np.ndarray, float]:
    """Pixel coordinates and camera-frame depth of a world point."""
    uv, z = project_points(np.asarray(x, dtype=np.float64).reshape(1, 3), cam)
    return uv[0], float(z[0])

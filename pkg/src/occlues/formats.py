"""Codecs and parsers for every on-disk artifact.

Binary layouts (all little-endian):

* depth raster ``.dpt1``: ``b"DPT1"``, u32 width, u32 height, width*height f32, row-major.
* semantic raster ``.seg1``: ``b"SEG1"``, u32 width, u32 height, width*height u8.
* voxel labels ``.label``: H*W*Z u16, linear index ``x*(W*Z) + y*Z + z``.
* occupancy mask ``.occ``: one bit per voxel in the same order, MSB first,
  ceil(H*W*Z / 8) bytes, padding bits zero.

Text formats:

* ``calib.txt`` native: ``K: fx fy cx cy`` and ``Tr: r00 r01 r02 t0 r10 ... t2``
  (row-major 3x4, camera-to-ego). KITTI compatibility: ``P2:`` (12 floats,
  K taken from the left 3x3) and ``Tr:`` (velodyne/ego-to-camera).
* ``poses.txt``: one camera-to-world 3x4 pose per line, 12 floats.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .cloud import SemanticPointCloud
from .errors import FormatError, InvalidInputError
from .geometry import ORTHO_TOL, CameraIntrinsics, CameraModel, Pose, invert_pose, nearest_rotation
from .voxel import GridConfig, LabelGrid

DEPTH_MAGIC = b"DPT1"
SEMANTIC_MAGIC = b"SEG1"
IGNORE_LABEL = 255
PARSE_ORTHO_TOL = 1e-6
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Row-major float32 depth in meters; 0.0 means no depth."""

    values: np.ndarray  # (height, width) float32

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if v.ndim != 2:
            raise InvalidInputError(f"depth map must be 2-D, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def equals(self, other: "DepthMap") -> bool:
        return self.values.shape == other.values.shape and self.values.tobytes() == other.values.tobytes()


@dataclass(frozen=True, eq=False)
class SemanticMap:
    """Row-major uint8 class ids; 255 is the ignore label."""

    labels: np.ndarray  # (height, width) uint8

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise InvalidInputError(f"semantic map must be 2-D, got shape {lab.shape}")
        if lab.dtype != np.uint8:
            if lab.size and (lab.min() < 0 or lab.max() > 255):
                raise InvalidInputError("semantic labels must fit in uint8")
            lab = lab.astype(np.uint8)
        object.__setattr__(self, "labels", np.ascontiguousarray(lab))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def equals(self, other: "SemanticMap") -> bool:
        return np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class CalibrationRecord:
    intrinsics: CameraIntrinsics
    cam_to_ego: Pose

    def camera(self) -> CameraModel:
        """Camera model whose world frame is the ego frame."""
        return CameraModel(self.intrinsics, invert_pose(self.cam_to_ego))


# -- rasters -----------------------------------------------------------------

def _read_header(data: bytes, magic: bytes) -> tuple[int, int]:
    if len(data) < 4:
        raise FormatError("truncated magic", offset=0)
    if data[:4] != magic:
        raise FormatError(f"bad magic {data[:4]!r}, expected {magic!r}", offset=0)
    if len(data) < 8:
        raise FormatError("truncated width", offset=4)
    if len(data) < 12:
        raise FormatError("truncated height", offset=8)
    _, width, height = _HEADER.unpack_from(data, 0)
    return width, height


def _check_payload(data: bytes, n_bytes: int) -> None:
    end = _HEADER.size + n_bytes
    if len(data) < end:
        raise FormatError(
            f"truncated payload: need {n_bytes} bytes, have {len(data) - _HEADER.size}",
            offset=_HEADER.size,
        )
    if len(data) > end:
        raise FormatError(f"{len(data) - end} trailing bytes after payload", offset=end)


def encode_depth_raster(depth: DepthMap) -> bytes:
    h, w = depth.values.shape
    return _HEADER.pack(DEPTH_MAGIC, w, h) + depth.values.astype("<f4", copy=False).tobytes()


def decode_depth_raster(data: bytes) -> DepthMap:
    width, height = _read_header(data, DEPTH_MAGIC)
    _check_payload(data, 4 * width * height)
    values = np.frombuffer(data, dtype="<f4", count=width * height, offset=_HEADER.size)
    bad = np.flatnonzero(~(np.isfinite(values) & (values >= 0)))
    if bad.size:
        raise FormatError(
            f"depth value {values[bad[0]]!r} is neither positive-finite nor 0.0",
            offset=_HEADER.size + 4 * int(bad[0]),
        )
    return DepthMap(values.astype(np.float32).reshape(height, width))


def encode_semantic_raster(sem: SemanticMap) -> bytes:
    h, w = sem.labels.shape
    return _HEADER.pack(SEMANTIC_MAGIC, w, h) + sem.labels.tobytes()


def decode_semantic_raster(data: bytes) -> SemanticMap:
    width, height = _read_header(data, SEMANTIC_MAGIC)
    _check_payload(data, width * height)
    labels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=_HEADER.size)
    return SemanticMap(labels.reshape(height, width).copy())


# -- voxel volumes -----------------------------------------------------------

def _dims_of(grid) -> tuple[int, int, int]:
    dims = grid.dims if isinstance(grid, GridConfig) else tuple(int(v) for v in grid)
    if len(dims) != 3 or min(dims) <= 0:
        raise InvalidInputError(f"dims must be three positive ints, got {dims}")
    return dims


def encode_voxel_labels(grid: LabelGrid, ignore_label: int | None = None) -> bytes:
    """Serialise labels; with ``ignore_label`` set, masked voxels are written as that id."""
    labels = grid.labels
    if ignore_label is not None and grid.ignore_mask is not None:
        labels = np.where(grid.ignore_mask, np.uint16(ignore_label), labels)
    return np.ascontiguousarray(labels).astype("<u2", copy=False).tobytes()


def decode_voxel_labels(data: bytes, grid, ignore_label: int | None = None) -> LabelGrid:
    """Parse a ``.label`` payload.

    ``grid`` is a :class:`GridConfig` or a bare ``(H, W, Z)`` tuple; with a bare
    tuple the class count is taken from the largest label present. With
    ``ignore_label`` set, voxels holding that id become masked empties.
    """
    dims = _dims_of(grid)
    n = dims[0] * dims[1] * dims[2]
    if len(data) != 2 * n:
        raise FormatError(
            f"voxel label payload for dims {dims} must be {2 * n} bytes, got {len(data)}",
            offset=min(len(data), 2 * n),
        )
    labels = np.frombuffer(data, dtype="<u2").astype(np.uint16).reshape(dims)
    mask = None
    if ignore_label is not None:
        mask = labels == ignore_label
        labels = np.where(mask, np.uint16(0), labels)
    if isinstance(grid, GridConfig):
        config = grid
    else:
        config = GridConfig(dims=dims, num_classes=max(1, int(labels.max(initial=0))))
    try:
        return LabelGrid(config, labels, mask)
    except InvalidInputError as exc:
        bad = int(np.flatnonzero(labels.reshape(-1) > config.num_classes)[0])
        raise FormatError(str(exc), offset=2 * bad) from exc


def occupancy_mask_nbytes(dims) -> int:
    h, w, z = _dims_of(dims)
    return -(-(h * w * z) // 8)


def encode_occupancy_mask(mask: np.ndarray) -> bytes:
    bits = np.asarray(mask, dtype=bool).reshape(-1)
    return np.packbits(bits, bitorder="big").tobytes()


def decode_occupancy_mask(data: bytes, dims) -> np.ndarray:
    dims = _dims_of(dims)
    n = dims[0] * dims[1] * dims[2]
    expected = -(-n // 8)
    if len(data) != expected:
        raise FormatError(
            f"occupancy payload for dims {dims} must be {expected} bytes, got {len(data)}",
            offset=min(len(data), expected),
        )
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")
    if bits[n:].any():
        raise FormatError("non-zero padding bits", offset=expected - 1)
    return bits[:n].astype(bool).reshape(dims)


# -- text formats ------------------------------------------------------------

def _floats(tokens: Sequence[str], *, line: int, field: str, count: int) -> list[float]:
    if len(tokens) != count:
        raise FormatError(f"expected {count} floats, got {len(tokens)}", line=line, field=field)
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(f"not a number: {exc}", line=line, field=field) from None
    if not all(math.isfinite(v) for v in vals):
        raise FormatError("non-finite value", line=line, field=field)
    return vals


def _pose_from_12(vals: Sequence[float], *, line: int, field: str) -> Pose:
    m = np.asarray(vals, dtype=np.float64).reshape(3, 4)
    R = m[:, :3]
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > PARSE_ORTHO_TOL or np.linalg.det(R) < 0:
        raise FormatError(f"rotation not orthonormal (error {err:.3g})", line=line, field=field)
    # keep exact rotations verbatim so format(parse(text)) reproduces text
    return Pose(R if err <= 0.1 * ORTHO_TOL else nearest_rotation(R), m[:, 3])


def parse_calibration(text: str) -> CalibrationRecord:
    entries: dict[str, tuple[int, list[str]]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        key, sep, rest = raw.partition(":")
        if not sep:
            raise FormatError("expected 'key: values'", line=lineno)
        entries[key.strip()] = (lineno, rest.split())

    if "K" in entries:
        lineno, toks = entries["K"]
        fx, fy, cx, cy = _floats(toks, line=lineno, field="K", count=4)
        try:
            intr = CameraIntrinsics(fx, fy, cx, cy)
        except InvalidInputError as exc:
            raise FormatError(str(exc), line=lineno, field="K") from None
        if "Tr" not in entries:
            raise FormatError("missing key 'Tr'", field="Tr")
        lineno, toks = entries["Tr"]
        cam_to_ego = _pose_from_12(_floats(toks, line=lineno, field="Tr", count=12),
                                   line=lineno, field="Tr")
        return CalibrationRecord(intr, cam_to_ego)

    if "P2" in entries:
        lineno, toks = entries["P2"]
        p = np.asarray(_floats(toks, line=lineno, field="P2", count=12)).reshape(3, 4)
        try:
            intr = CameraIntrinsics(p[0, 0], p[1, 1], p[0, 2], p[1, 2])
        except InvalidInputError as exc:
            raise FormatError(str(exc), line=lineno, field="P2") from None
        if "Tr" not in entries:
            raise FormatError("missing key 'Tr'", field="Tr")
        lineno, toks = entries["Tr"]
        ego_to_cam = _pose_from_12(_floats(toks, line=lineno, field="Tr", count=12),
                                   line=lineno, field="Tr")
        return CalibrationRecord(intr, invert_pose(ego_to_cam))

    raise FormatError("missing key 'K' (or KITTI 'P2')", field="K")


def format_calibration(calib: CalibrationRecord) -> str:
    k = calib.intrinsics
    m = np.hstack([calib.cam_to_ego.rotation, calib.cam_to_ego.translation[:, None]])
    return (f"K: {k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}\n"
            "Tr: " + " ".join(repr(float(v)) for v in m.reshape(-1)) + "\n")


def parse_poses(text: str) -> list[Pose]:
    poses = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split()
        if not toks:
            continue
        vals = _floats(toks, line=lineno, field="pose", count=12)
        poses.append(_pose_from_12(vals, line=lineno, field="pose"))
    return poses


def format_poses(poses: Sequence[Pose]) -> str:
    lines = []
    for p in poses:
        m = np.hstack([p.rotation, p.translation[:, None]])
        lines.append(" ".join(repr(float(v)) for v in m.reshape(-1)))
    return "".join(line + "\n" for line in lines)


# -- point cloud export ------------------------------------------------------

def export_ply(cloud: SemanticPointCloud, palette: Mapping[int, tuple[int, int, int]]) -> bytes:
    """ASCII PLY with xyz floats and per-class RGB colours."""
    missing = sorted(set(np.unique(cloud.classes).tolist()) - set(palette))
    if missing:
        raise InvalidInputError(f"palette has no colour for class id {missing[0]}")
    out = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for (x, y, z), c in zip(cloud.coords.tolist(), cloud.classes.tolist()):
        r, g, b = palette[c]
        out.append(f"{x:.6f} {y:.6f} {z:.6f} {r:d} {g:d} {b:d}")
    return ("\n".join(out) + "\n").encode("ascii")


# SemanticKITTI class colours (RGB) for ids 0..19; other ids get a hashed colour.
SEMANTIC_KITTI_PALETTE: dict[int, tuple[int, int, int]] = {
    0: (0, 0, 0), 1: (100, 150, 245), 2: (100, 230, 245), 3: (30, 60, 150),
    4: (80, 30, 180), 5: (100, 80, 250), 6: (255, 30, 30), 7: (255, 40, 200),
    8: (150, 30, 90), 9: (255, 0, 255), 10: (255, 150, 255), 11: (75, 0, 75),
    12: (175, 0, 75), 13: (255, 200, 0), 14: (255, 120, 50), 15: (0, 175, 0),
    16: (135, 60, 0), 17: (150, 240, 80), 18: (255, 240, 150), 19: (255, 0, 0),
}


def default_palette(class_ids) -> dict[int, tuple[int, int, int]]:
    pal = {}
    for c in sorted({int(c) for c in class_ids}):
        if c in SEMANTIC_KITTI_PALETTE:
            pal[c] = SEMANTIC_KITTI_PALETTE[c]
        else:
            h = (c * 2654435761) & 0xFFFFFF
            pal[c] = ((h >> 16) & 0xFF, (h >> 8) & 0xFF, h & 0xFF)
    return pal

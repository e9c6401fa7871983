import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occlues.cloud import SemanticPointCloud
from occlues.errors import FormatError, InvalidInputError
from occlues.formats import (
    CalibrationRecord,
    DepthMap,
    SemanticMap,
    decode_depth_raster,
    decode_occupancy_mask,
    decode_semantic_raster,
    decode_voxel_labels,
    encode_depth_raster,
    encode_occupancy_mask,
    encode_semantic_raster,
    encode_voxel_labels,
    export_ply,
    format_calibration,
    format_poses,
    parse_calibration,
    parse_poses,
)
from occlues.geometry import CameraIntrinsics, Pose
from occlues.voxel import GridConfig, LabelGrid

FIXTURES = Path(__file__).parent / "fixtures"
IDENTITY_TR = "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n"

KITTI_CALIB = """\
P0: 7.188560000000e+02 0.000000000000e+00 6.071928000000e+02 0.000000000000e+00 0.000000000000e+00 7.188560000000e+02 1.852157000000e+02 0.000000000000e+00 0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 0.000000000000e+00
P2: 7.188560000000e+02 0.000000000000e+00 6.071928000000e+02 4.538225000000e+01 0.000000000000e+00 7.188560000000e+02 1.852157000000e+02 -1.130887000000e-01 0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 3.779761000000e-03
Tr: 4.276802385584e-04 -9.999672484946e-01 -8.084491683471e-03 -1.198459927713e-02 -7.210626507497e-03 8.081198471645e-03 -9.999413164504e-01 -5.403984729748e-02 9.999738645903e-01 4.859485810390e-04 -7.206933692422e-03 -2.921968648686e-01
"""


# -- calibration ---------------------------------------------------------------

def test_native_identity_calibration():
    rec = parse_calibration("K: 1 1 0 0\n" + IDENTITY_TR)
    cam = rec.camera()
    assert cam.intrinsics == CameraIntrinsics(1, 1, 0, 0)
    assert cam.extrinsics.allclose(Pose.identity(), atol=0)


def test_native_intrinsics_echo_fields():
    rec = parse_calibration("K: 718.856 718.856 607.1928 185.2157\n" + IDENTITY_TR)
    assert (rec.intrinsics.fx, rec.intrinsics.fy, rec.intrinsics.cx, rec.intrinsics.cy) == (
        718.856, 718.856, 607.1928, 185.2157)


def test_kitti_p2_against_text_slicing_oracle():
    rec = parse_calibration(KITTI_CALIB)
    # oracle: slice the P2 line by hand
    line = next(l for l in KITTI_CALIB.splitlines() if l.startswith("P2:"))
    vals = [float(t) for t in line[3:].split()]
    assert rec.intrinsics.fx == vals[0]
    assert rec.intrinsics.cx == vals[2]
    assert rec.intrinsics.fy == vals[5]
    assert rec.intrinsics.cy == vals[6]
    # KITTI Tr is ego-to-camera; the record stores camera-to-ego
    tr_line = next(l for l in KITTI_CALIB.splitlines() if l.startswith("Tr:"))
    tr = np.array([float(t) for t in tr_line[3:].split()]).reshape(3, 4)
    ego_pt = np.array([5.0, 1.0, -0.5])
    cam_pt = tr[:, :3] @ ego_pt + tr[:, 3]
    np.testing.assert_allclose(rec.cam_to_ego.apply(cam_pt), ego_pt, atol=1e-5)


@pytest.mark.parametrize("text, field", [
    ("K: 1 1 0\n" + IDENTITY_TR, "K"),
    ("K: 1 1 0 0\n", "Tr"),
    ("K: 1 1 0 0\nTr: 1 0 0 0 0 1 0 0 0 0 1\n", "Tr"),
    ("K: 1 1 0 0\nTr: 2 0 0 0 0 1 0 0 0 0 1 0\n", "Tr"),
    ("Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n", "K"),
    ("K: 0 1 0 0\n" + IDENTITY_TR, "K"),
])
def test_calibration_errors_name_field(text, field):
    with pytest.raises(FormatError) as exc:
        parse_calibration(text)
    assert exc.value.field == field


def test_calibration_error_names_line():
    with pytest.raises(FormatError) as exc:
        parse_calibration("K: 1 1 0 0\n\nTr: 1 0 0\n")
    assert exc.value.line == 3


def test_calibration_format_round_trip():
    rec = parse_calibration(KITTI_CALIB)
    again = parse_calibration(format_calibration(rec))
    assert again.intrinsics == rec.intrinsics
    assert again.cam_to_ego.allclose(rec.cam_to_ego, atol=1e-12)


# -- poses -----------------------------------------------------------------------

def test_parse_poses_examples():
    assert parse_poses("") == []
    [p] = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n")
    assert p.allclose(Pose.identity(), atol=0)
    text = "".join(f"1 0 0 0 0 1 0 0 0 0 1 {i}\n" for i in range(3))
    poses = parse_poses(text)
    assert [p.translation.tolist() for p in poses] == [[0, 0, 0], [0, 0, 1], [0, 0, 2]]


def test_parse_poses_reorthonormalises_small_drift():
    [p] = parse_poses("1.0000004 0 0 0 0 1 0 0 0 0 1 0\n")
    np.testing.assert_allclose(p.rotation, np.eye(3), atol=1e-6)


def test_parse_poses_bad_token_count():
    with pytest.raises(FormatError) as exc:
        parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0\n")
    assert exc.value.line == 2


def test_format_poses_round_trip():
    from scipy.spatial.transform import Rotation
    rng = np.random.default_rng(3)
    poses = [Pose(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3)) for _ in range(4)]
    back = parse_poses(format_poses(poses))
    assert all(a.allclose(b, atol=1e-12) for a, b in zip(poses, back))


# -- rasters ---------------------------------------------------------------------

def test_depth_one_pixel():
    data = encode_depth_raster(DepthMap(np.array([[2.5]], dtype=np.float32)))
    assert len(data) == 16
    assert data == b"DPT1" + struct.pack("<IIf", 1, 1, 2.5)
    assert decode_depth_raster(data).values[0, 0] == 2.5


@pytest.mark.parametrize("cut, offset", [(14, 12), (12, 12), (10, 8), (6, 4), (2, 0)])
def test_depth_truncation_offsets(cut, offset):
    data = encode_depth_raster(DepthMap(np.array([[2.5]], dtype=np.float32)))
    with pytest.raises(FormatError) as exc:
        decode_depth_raster(data[:cut])
    assert exc.value.offset == offset


def test_depth_bad_magic_and_trailing():
    data = encode_depth_raster(DepthMap(np.ones((2, 2), dtype=np.float32)))
    with pytest.raises(FormatError) as exc:
        decode_depth_raster(b"XPT1" + data[4:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError) as exc:
        decode_depth_raster(data + b"\0")
    assert exc.value.offset == len(data)


def test_depth_rejects_negative_values():
    data = b"DPT1" + struct.pack("<IIff", 2, 1, 1.0, -3.0)
    with pytest.raises(FormatError) as exc:
        decode_depth_raster(data)
    assert exc.value.offset == 16


def _random_depth(rng, h, w):
    v = rng.uniform(0.1, 100, (h, w)).astype(np.float32)
    v[rng.random((h, w)) < 0.2] = 0.0
    return DepthMap(v)


def test_depth_random_64x48_round_trip():
    rng = np.random.default_rng(0)
    m = _random_depth(rng, 48, 64)
    data = encode_depth_raster(m)
    assert decode_depth_raster(data).equals(m)
    assert encode_depth_raster(decode_depth_raster(data)) == data


def test_semantic_one_pixel_and_truncation():
    data = encode_semantic_raster(SemanticMap(np.array([[7]], dtype=np.uint8)))
    assert data == b"SEG1" + struct.pack("<IIB", 1, 1, 7)
    assert decode_semantic_raster(data).labels[0, 0] == 7
    with pytest.raises(FormatError) as exc:
        decode_semantic_raster(encode_semantic_raster(SemanticMap(np.zeros((2, 2), np.uint8)))[:14])
    assert exc.value.offset == 12
    with pytest.raises(FormatError):
        decode_semantic_raster(b"DPT1" + data[4:])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(0, 20), w=st.integers(0, 20))
def test_semantic_round_trip(seed, h, w):
    rng = np.random.default_rng(seed)
    m = SemanticMap(rng.integers(0, 256, (h, w), dtype=np.uint8))
    data = encode_semantic_raster(m)
    assert decode_semantic_raster(data).equals(m)
    assert encode_semantic_raster(decode_semantic_raster(data)) == data


# -- voxel volumes -------------------------------------------------------------

def test_voxel_label_payload_size():
    grid = LabelGrid.empty(GridConfig((256, 256, 32)))
    data = encode_voxel_labels(grid)
    assert len(data) == 4_194_304
    assert data == bytes(4_194_304)


def test_voxel_label_linear_order():
    labels = np.zeros((2, 3, 4), dtype=np.uint16)
    labels[1, 2, 3] = 5
    labels[0, 1, 2] = 9
    data = encode_voxel_labels(LabelGrid(GridConfig((2, 3, 4), num_classes=9), labels))
    words = struct.unpack("<24H", data)
    assert words[1 * 12 + 2 * 4 + 3] == 5
    assert words[0 * 12 + 1 * 4 + 2] == 9


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), dims=st.tuples(*[st.integers(1, 8)] * 3))
def test_voxel_label_round_trip(seed, dims):
    rng = np.random.default_rng(seed)
    cfg = GridConfig(dims, num_classes=19)
    grid = LabelGrid(cfg, rng.integers(0, 20, dims))
    data = encode_voxel_labels(grid)
    assert decode_voxel_labels(data, cfg).equals(grid)
    assert encode_voxel_labels(decode_voxel_labels(data, cfg)) == data


def test_voxel_label_size_mismatch_reports_counts():
    with pytest.raises(FormatError, match="must be 128 bytes, got 126"):
        decode_voxel_labels(bytes(126), (4, 4, 4))


def test_voxel_label_class_out_of_range():
    data = np.array([0, 3, 40, 1], dtype="<u2").tobytes()
    with pytest.raises(FormatError) as exc:
        decode_voxel_labels(data, GridConfig((1, 2, 2), num_classes=19))
    assert exc.value.offset == 4


def test_voxel_label_ignore_round_trip():
    raw = np.array([0, 255, 3, 255], dtype="<u2").tobytes()
    grid = decode_voxel_labels(raw, GridConfig((1, 1, 4), num_classes=19), ignore_label=255)
    assert grid.labels.reshape(-1).tolist() == [0, 0, 3, 0]
    assert grid.ignore_mask.reshape(-1).tolist() == [False, True, False, True]
    assert encode_voxel_labels(grid, ignore_label=255) == raw


def test_voxel_label_bare_dims_infers_classes():
    raw = np.array([0, 7], dtype="<u2").tobytes()
    assert decode_voxel_labels(raw, (1, 1, 2)).config.num_classes == 7


def test_occupancy_sizes_and_bit_order():
    assert len(encode_occupancy_mask(np.zeros((256, 256, 32), bool))) == 262_144
    m = np.zeros((2, 2, 3), bool)
    m[0, 0, 0] = True
    data = encode_occupancy_mask(m)
    assert data == b"\x80\x00"
    m2 = np.zeros((2, 2, 3), bool)
    m2[1, 1, 2] = True  # linear index 11 -> byte 1, bit 3 from the top
    assert encode_occupancy_mask(m2) == bytes([0, 0b00010000])


def test_occupancy_errors():
    with pytest.raises(FormatError):
        decode_occupancy_mask(bytes(3), (2, 2, 3))
    with pytest.raises(FormatError, match="padding"):
        decode_occupancy_mask(b"\x00\x01", (2, 2, 3))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), dims=st.tuples(*[st.integers(1, 9)] * 3))
def test_occupancy_round_trip(seed, dims):
    rng = np.random.default_rng(seed)
    m = rng.random(dims) < 0.3
    data = encode_occupancy_mask(m)
    np.testing.assert_array_equal(decode_occupancy_mask(data, dims), m)
    assert encode_occupancy_mask(decode_occupancy_mask(data, dims)) == data


def test_checked_in_volume_fixtures():
    from .fixtures.make_volume_fixtures import DIMS, volume_labels

    label_bytes = (FIXTURES / "volume_256x256x32.label").read_bytes()
    occ_bytes = (FIXTURES / "volume_256x256x32.occ").read_bytes()
    assert len(label_bytes) == 4_194_304 and len(occ_bytes) == 262_144
    grid = decode_voxel_labels(label_bytes, GridConfig(DIMS, num_classes=19))
    expected, box = volume_labels()
    np.testing.assert_array_equal(grid.labels, expected)
    assert grid.labels[10, 100, 0] == (10 + 200) % 20
    np.testing.assert_array_equal(decode_occupancy_mask(occ_bytes, DIMS), box)
    assert encode_voxel_labels(grid) == label_bytes


# -- PLY -----------------------------------------------------------------------

PALETTE = {1: (255, 0, 0), 2: (0, 255, 0)}


def test_ply_empty():
    text = export_ply(SemanticPointCloud.empty(), PALETTE).decode()
    assert "element vertex 0\n" in text
    assert text.endswith("end_header\n")


def test_ply_one_point():
    lines = export_ply(SemanticPointCloud([[1.0, 2.0, 3.0]], [2]), PALETTE).decode().splitlines()
    assert lines[-1] == "1.000000 2.000000 3.000000 0 255 0"
    assert lines[2] == "element vertex 1"


def test_ply_golden_three_points():
    cloud = SemanticPointCloud([[0, 0, 0], [1.5, -2.25, 3.125], [-0.1, 10, 1 / 3]], [1, 2, 1])
    assert export_ply(cloud, PALETTE) == (FIXTURES / "three_points.ply").read_bytes()


def test_ply_unmapped_class():
    with pytest.raises(InvalidInputError, match="class id 3"):
        export_ply(SemanticPointCloud([[0.0, 0, 0]], [3]), PALETTE)

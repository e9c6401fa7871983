import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occlues.cloud import SemanticPointCloud
from occlues.clues import (
    FilterConfig,
    FrameBundle,
    SpatialIndex,
    accumulate_frames,
    build_spatial_index,
    generate_clues,
    knn_query,
    radius_filter,
    radius_query,
    regularize,
    split_by_class,
    statistical_filter,
    unproject_frame,
)
from occlues.errors import InvalidInputError
from occlues.formats import DepthMap, SemanticMap
from occlues.geometry import CameraIntrinsics, CameraModel, Pose
from occlues.synthetic import SyntheticScene, render_frames
from occlues.voxel import GridConfig, voxelize

from . import oracles


def _frame(depth, labels, cam=None, pose=None):
    return FrameBundle(
        DepthMap(np.asarray(depth, np.float32)),
        SemanticMap(np.asarray(labels, np.uint8)),
        cam or CameraModel.identity(),
        pose or Pose.identity(),
    )


def _rot(axis, angle):
    from scipy.spatial.transform import Rotation
    return Rotation.from_rotvec(np.asarray(axis, float) * angle).as_matrix()


# -- unprojection --------------------------------------------------------------

def test_unproject_all_zero_depth():
    assert len(unproject_frame(_frame(np.zeros((4, 4)), np.ones((4, 4))))) == 0


def test_unproject_single_pixel():
    cloud = unproject_frame(_frame([[1.0]], [[4]]))
    np.testing.assert_array_equal(cloud.coords, [[0, 0, 1]])
    assert cloud.classes.tolist() == [4]


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_unproject_matches_per_pixel_oracle(stride):
    rng = np.random.default_rng(stride)
    depth = rng.uniform(1, 20, (4, 4))
    depth[1, 2] = 0.0
    labels = rng.integers(1, 6, (4, 4))
    labels[3, 0] = 255
    labels[0, 3] = 0
    cam = CameraModel(CameraIntrinsics(2.0, 3.0, 1.5, 1.2), Pose(_rot([0, 1, 0], 0.3), [0.1, -0.2, 0.5]))
    pose = Pose(_rot([0, 0, 1], -0.7), [3.0, 1.0, 0.0])
    cloud = unproject_frame(_frame(depth, labels, cam, pose), stride)
    exp_xyz, exp_cls = oracles.per_pixel_unproject(
        np.asarray(depth, np.float32), labels, 2.0, 3.0, 1.5, 1.2,
        cam.extrinsics.matrix(), pose.matrix(), stride)
    np.testing.assert_allclose(cloud.coords, exp_xyz, atol=1e-10)
    np.testing.assert_array_equal(cloud.classes, exp_cls)


def test_frame_dim_mismatch():
    with pytest.raises(InvalidInputError):
        _frame(np.ones((2, 2)), np.ones((2, 3)))


def test_unproject_bad_stride():
    with pytest.raises(InvalidInputError):
        unproject_frame(_frame([[1.0]], [[1]]), 0)


# -- accumulation --------------------------------------------------------------

def test_accumulate_single_frame_in_own_ego_frame():
    rng = np.random.default_rng(0)
    pose = Pose(_rot([0, 0, 1], 0.4), [5.0, -2.0, 0.3])
    frame = _frame(rng.uniform(1, 5, (3, 3)), rng.integers(1, 4, (3, 3)),
                   CameraModel(CameraIntrinsics(2, 2, 1, 1), Pose.identity()), pose)
    acc = accumulate_frames([frame], pose)
    local = unproject_frame(_frame(frame.depth.values, frame.semantics.labels, frame.cam))
    np.testing.assert_allclose(acc.coords, local.coords, atol=1e-12)
    np.testing.assert_array_equal(acc.classes, local.classes)


def test_accumulate_duplicates_double_count():
    f = _frame(np.ones((3, 3)), np.ones((3, 3)))
    assert len(accumulate_frames([f, f], Pose.identity())) == 2 * len(unproject_frame(f))


def test_accumulate_translation_offset_per_point():
    rng = np.random.default_rng(1)
    depth, labels = rng.uniform(1, 5, (3, 4)), rng.integers(1, 4, (3, 4))
    f0 = _frame(depth, labels, pose=Pose.identity())
    f1 = _frame(depth, labels, pose=Pose.from_translation([1, 0, 0]))
    acc = accumulate_frames([f0, f1], Pose.identity())
    n = len(unproject_frame(f0))
    first, second = acc.coords[:n], acc.coords[n:]
    # second frame sits 1 m further along x, so its points do too
    np.testing.assert_allclose(second - first, np.tile([1.0, 0, 0], (n, 1)), atol=1e-12)
    acc_t = accumulate_frames([f0, f1], Pose.from_translation([1, 0, 0]))
    np.testing.assert_allclose(acc_t.coords[:n], first + [-1.0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(acc_t.coords[n:], first, atol=1e-12)


def test_accumulate_empty_list():
    with pytest.raises(InvalidInputError):
        accumulate_frames([], Pose.identity())


# -- split -----------------------------------------------------------------------

def test_split_by_class():
    assert split_by_class(SemanticPointCloud.empty()) == {}
    single = SemanticPointCloud(np.arange(9.0).reshape(3, 3), [2, 2, 2])
    parts = split_by_class(single)
    assert list(parts) == [2] and parts[2].equals(single)
    rng = np.random.default_rng(0)
    cls = rng.integers(1, 7, 200)
    parts = split_by_class(SemanticPointCloud(rng.normal(size=(200, 3)), cls))
    hist = np.bincount(cls)
    assert {c: len(p) for c, p in parts.items()} == {c: int(hist[c]) for c in range(7) if hist[c]}
    assert all(np.all(p.classes == c) for c, p in parts.items())


# -- spatial index -----------------------------------------------------------

def test_radius_query_boundary():
    idx = build_spatial_index(np.array([[0.0, 0, 0], [1, 0, 0]]))
    assert radius_query(idx, 0, 0.5).tolist() == []
    assert radius_query(idx, 0, 1.0).tolist() == [1]


def test_queries_match_brute_force_500_points():
    rng = np.random.default_rng(7)
    pts = rng.uniform(0, 3, (500, 3))
    pts[10] = pts[11]  # a duplicate pair
    index = SpatialIndex(pts)
    for i in range(0, 500, 7):
        assert index.radius_query(i, 0.4).tolist() == oracles.brute_radius_query(pts, pts[i], 0.4, exclude=i)
        assert index.knn_query(i, 6).tolist() == oracles.brute_knn_query(pts, pts[i], 6, exclude=i)
    c = np.array([1.5, 1.5, 1.5])
    assert index.radius_query(c, 0.5).tolist() == oracles.brute_radius_query(pts, c, 0.5)
    assert knn_query(index, c, 9).tolist() == oracles.brute_knn_query(pts, c, 9)


def test_knn_ties_prefer_smaller_index():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, 0, 5]])
    assert SpatialIndex(pts).knn_query(0, 2).tolist() == [1, 2]
    assert SpatialIndex(pts).knn_query(0, 10).tolist() == [1, 2, 3, 4]


# -- filters -----------------------------------------------------------------

def test_radius_filter_examples():
    assert len(radius_filter(SemanticPointCloud.empty(), 1.0, 1)) == 0
    assert len(radius_filter(SemanticPointCloud([[0.0, 0, 0]], [1]), 1.0, 1)) == 0
    line = SemanticPointCloud([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]], [1, 1, 1])
    out = radius_filter(line, 1.5, 2)
    np.testing.assert_array_equal(out.coords, [[1, 0, 0]])


def test_statistical_filter_examples():
    two = SemanticPointCloud([[0.0, 0, 0], [1, 0, 0]], [1, 1])
    assert statistical_filter(two, 1, 1.0).equals(two)
    assert statistical_filter(SemanticPointCloud.empty(), 3, 1.0).equals(SemanticPointCloud.empty())
    one = SemanticPointCloud([[1.0, 2, 3]], [2])
    assert statistical_filter(one, 3, 1.0).equals(one)
    rng = np.random.default_rng(3)
    pts = np.vstack([rng.uniform(0, 0.1, (10, 3)), [[10.0, 10, 10]]])
    out = statistical_filter(SemanticPointCloud(pts, np.ones(11)), 3, 1.0)
    np.testing.assert_array_equal(out.coords, pts[:10])
    np.testing.assert_array_equal(oracles.brute_statistical_keep(pts, 3, 1.0), np.arange(10))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 120),
       radius=st.floats(0.05, 1.0), min_nb=st.integers(1, 8),
       k=st.integers(1, 12), alpha=st.floats(0.1, 3.0))
def test_filters_equal_brute_force(seed, n, radius, min_nb, k, alpha):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 2, (n, 3))
    if n > 4:
        pts[1] = pts[0]
    cloud = SemanticPointCloud(pts, np.ones(n))
    rf = radius_filter(cloud, radius, min_nb)
    np.testing.assert_array_equal(rf.coords, pts[oracles.brute_radius_keep(pts, radius, min_nb)])
    sf = statistical_filter(cloud, k, alpha)
    np.testing.assert_array_equal(sf.coords, pts[oracles.brute_statistical_keep(pts, k, alpha)])
    # subsetting, stable order, never grows on re-run
    assert len(radius_filter(rf, radius, min_nb)) <= len(rf)


def test_per_class_filtering_is_independent():
    """A dense class must not rescue a sparse one sharing its space."""
    rng = np.random.default_rng(4)
    dense = rng.uniform(0, 1, (300, 3))
    sparse = rng.uniform(0, 1, (5, 3))
    cloud = SemanticPointCloud(np.vstack([dense, sparse]), [1] * 300 + [2] * 5)
    grid = GridConfig((5, 5, 5), 0.2, (0, 0, 0), 2)
    filt = FilterConfig(radius=0.1, min_neighbors=3, sor_k=4, sor_alpha=2.0)
    mixed = regularize(cloud, filt)
    assert 2 not in set(mixed.classes.tolist())
    alone = regularize(SemanticPointCloud(dense, [1] * 300), filt)
    assert mixed.equals(alone)
    assert voxelize(mixed, grid).equals(voxelize(alone, grid))


# -- end to end ------------------------------------------------------------------

def _small_scene():
    from dataclasses import replace
    s = SyntheticScene()
    return replace(s, intrinsics=CameraIntrinsics(20.0, 20.0, 20.0, 12.0), image_size=(40, 24))


def test_generate_clues_two_frame_scene_matches_staged_oracle():
    scene = _small_scene()
    frames = render_frames(scene, indices=[5, 7])
    filt = FilterConfig(radius=0.8, min_neighbors=2, sor_k=4, sor_alpha=1.5)
    got = generate_clues(frames, scene.target_pose, scene.grid, filt, stride=1)
    expected = oracles.staged_clues(frames, scene.target_pose, scene.grid, filt, 1)
    assert got.labels.any()
    np.testing.assert_array_equal(got.labels, expected)


def test_generate_clues_single_frame_duplicated_reduces_to_voxelised_unprojection():
    scene = _small_scene()
    [frame] = render_frames(scene, indices=[7])
    filt = FilterConfig(radius=1e-6, min_neighbors=1, sor_k=1, sor_alpha=1e9)
    got = generate_clues([frame, frame], scene.target_pose, scene.grid, filt)
    plain = voxelize(accumulate_frames([frame], scene.target_pose), scene.grid)
    assert got.equals(plain)


def test_generate_clues_everything_filtered():
    f = _frame([[1.0, 0.0], [0.0, 0.0]], [[1, 1], [1, 1]])
    grid = GridConfig((4, 4, 4), 0.5, (-1, -1, 0), 3)
    out = generate_clues([f], Pose.identity(), grid, FilterConfig(min_neighbors=1))
    assert not out.labels.any()


def test_generate_clues_invariant_to_frame_order():
    scene = _small_scene()
    frames = render_frames(scene, indices=[4, 6, 7])
    filt = FilterConfig(radius=0.8, min_neighbors=2, sor_k=4, sor_alpha=1.5)
    base = generate_clues(frames, scene.target_pose, scene.grid, filt)
    assert base.equals(generate_clues(frames[::-1], scene.target_pose, scene.grid, filt))

"""Grid data model tests: voxelization, deprojection, voxel centers,
connected components (vs a BFS oracle), and augmentation isometries."""

import numpy as np
import pytest

import oracles
from voxinst.errors import EmptyInput, IndexOutOfBounds, InvalidGeometry
from voxinst.grid import (
    AUGMENT_OPS,
    InstanceLabeling,
    PointCloud,
    SceneSample,
    VoxelGrid,
    augment,
    augment_inverse,
    connected_components,
    devoxelize,
    voxel_center,
    voxel_centers,
    voxelize,
)
from voxinst.util import linear_index


def make_grid(dims=(4, 5, 6), seed=0, num_instances=3):
    rng = np.random.default_rng(seed)
    sem = np.zeros(dims, dtype=np.uint16)
    inst = np.zeros(dims, dtype=np.uint16)
    occupied = rng.random(dims) < 0.3
    inst[occupied] = rng.integers(1, num_instances + 1, size=int(occupied.sum()))
    sem[occupied] = inst[occupied] + 1
    return VoxelGrid(dims, 0.1, np.zeros(3), sem, inst)


# -- voxelize / devoxelize ----------------------------------------------------


def test_voxelize_single_point_at_origin():
    g = voxelize(PointCloud([[0.0, 0.0, 0.0]], [2], [1]), 0.1, origin=(0, 0, 0))
    assert g.dims == (1, 1, 1)
    assert g.semantic[0, 0, 0] == 2 and g.instance[0, 0, 0] == 1


def test_voxelize_floor_binning():
    g = voxelize(PointCloud([[0.05, 0.0, 0.0], [0.15, 0.0, 0.0]], [1, 2], [1, 2]), 0.1, origin=(0, 0, 0))
    assert g.dims == (2, 1, 1)
    assert g.semantic[0, 0, 0] == 1 and g.semantic[1, 0, 0] == 2


def test_voxelize_majority_vote_and_tie_break():
    pts = [[0.01, 0.01, 0.01]] * 3
    g = voxelize(PointCloud(pts, [5, 5, 3], [2, 2, 1]), 0.1, origin=(0, 0, 0))
    assert g.semantic[0, 0, 0] == 5 and g.instance[0, 0, 0] == 2
    g = voxelize(PointCloud(pts[:2], [3, 5], [1, 2]), 0.1, origin=(0, 0, 0))
    assert g.semantic[0, 0, 0] == 3  # tie -> smallest id


def test_voxelize_errors():
    with pytest.raises(EmptyInput):
        voxelize(PointCloud(np.empty((0, 3))), 0.1)
    with pytest.raises(InvalidGeometry):
        voxelize(PointCloud([[np.nan, 0, 0]]), 0.1)


def test_voxelize_min_corner_policy():
    g = voxelize(PointCloud([[1.0, 2.0, 3.0], [1.25, 2.0, 3.0]], [1, 1], [0, 0]), 0.1)
    np.testing.assert_allclose(g.origin, [1.0, 2.0, 3.0])
    assert g.dims == (3, 1, 1)


def test_devoxelize_lookup_and_out_of_bounds():
    g = make_grid()
    labels = np.zeros(g.num_voxels, dtype=np.uint16)
    labels[linear_index(1, 2, 3, g.dims)] = 7
    cloud = PointCloud([[0.15, 0.25, 0.35], [9.0, 9.0, 9.0]])
    out = devoxelize(g, labels, cloud)
    assert out[0] == 7 and out[1] == 0


def test_devoxelize_round_trip_one_point_per_voxel():
    rng = np.random.default_rng(5)
    dims = (3, 3, 2)
    pts, inst = [], []
    for k in range(dims[2]):
        for j in range(dims[1]):
            for i in range(dims[0]):
                pts.append((np.array([i, j, k]) + rng.random(3)) * 0.1)
                inst.append(linear_index(i, j, k, dims) + 1)
    cloud = PointCloud(pts, np.ones(len(pts)), inst)
    g = voxelize(cloud, 0.1, origin=(0, 0, 0))
    back = devoxelize(g, g.linear_instance(), cloud)
    np.testing.assert_array_equal(back, inst)


def test_devoxelize_length_mismatch():
    g = make_grid()
    with pytest.raises(InvalidGeometry):
        devoxelize(g, np.zeros(3), PointCloud([[0, 0, 0]]))


# -- voxel centers ------------------------------------------------------------


def test_voxel_center_formula():
    g = VoxelGrid((4, 5, 6), 0.1)
    np.testing.assert_allclose(voxel_center(g, 0), [0.05, 0.05, 0.05])
    np.testing.assert_allclose(voxel_center(g, linear_index(1, 2, 3, g.dims)), [0.15, 0.25, 0.35])


def test_voxel_center_origin_shift():
    a = VoxelGrid((4, 4, 4), 0.1)
    b = VoxelGrid((4, 4, 4), 0.1, origin=np.array([1.0, 0, 0]))
    np.testing.assert_allclose(voxel_center(b, 21) - voxel_center(a, 21), [1.0, 0, 0], atol=1e-7)


def test_voxel_center_bounds():
    g = VoxelGrid((2, 2, 2), 0.1)
    with pytest.raises(IndexOutOfBounds):
        voxel_center(g, 8)
    with pytest.raises(IndexOutOfBounds):
        voxel_centers(g, np.array([0, 9]))


def test_voxel_centers_matches_scalar():
    g = VoxelGrid((3, 4, 5), 0.07, origin=np.array([0.2, -0.1, 0.0], dtype=np.float32))
    idx = np.arange(g.num_voxels)
    batch = voxel_centers(g, idx)
    for i in idx:
        np.testing.assert_allclose(batch[i], voxel_center(g, int(i)))


# -- connected components -----------------------------------------------------


def test_components_two_separated_cubes():
    vol = np.zeros((8, 8, 8), dtype=bool)
    vol[0:2, 0:2, 0:2] = True
    vol[5:7, 5:7, 5:7] = True
    g = VoxelGrid((8, 8, 8))
    comps = connected_components(g, vol)
    assert len(comps) == 2
    assert sum(len(c) for c in comps) == 16


def test_components_l_shape_matches_bfs_oracle():
    vol = np.zeros((5, 5, 3), dtype=bool)
    vol[0:4, 0, 0] = True
    vol[3, 0:4, 0] = True
    g = VoxelGrid((5, 5, 3))
    comps = connected_components(g, vol)
    ref = oracles.connected_components_bfs(vol)
    assert len(comps) == len(ref) == 1
    np.testing.assert_array_equal(comps[0], ref[0])


def test_components_empty_mask():
    g = VoxelGrid((4, 4, 4))
    assert connected_components(g, np.empty(0, dtype=np.int64)) == []


@pytest.mark.parametrize("connectivity", [6, 18, 26])
def test_components_random_volumes_match_oracle(connectivity):
    rng = np.random.default_rng(connectivity)
    for _ in range(5):
        vol = rng.random((6, 5, 4)) < 0.35
        g = VoxelGrid(vol.shape)
        comps = connected_components(g, vol, connectivity)
        ref = oracles.connected_components_bfs(vol, connectivity)
        assert len(comps) == len(ref)
        for c, r in zip(comps, ref):
            np.testing.assert_array_equal(c, np.asarray(r))


def test_components_accept_linear_indices():
    g = VoxelGrid((4, 4, 4))
    idx = np.array([0, 1, 2, 40])
    comps = connected_components(g, idx)
    assert [list(c) for c in comps] == [[0, 1, 2], [40]]


def test_components_partition_property():
    rng = np.random.default_rng(77)
    vol = rng.random((7, 6, 5)) < 0.4
    g = VoxelGrid(vol.shape)
    comps = connected_components(g, vol)
    allv = np.concatenate(comps) if comps else np.empty(0, dtype=np.int64)
    assert len(np.unique(allv)) == len(allv) == int(vol.sum())


# -- augmentation -------------------------------------------------------------


def make_sample():
    return SceneSample(make_grid((6, 6, 4), seed=3), InstanceLabeling.from_grid(make_grid((6, 6, 4), seed=3)))


@pytest.mark.parametrize("op", AUGMENT_OPS)
def test_augment_inverse_round_trip(op):
    s = make_sample()
    back = augment(augment(s, op), augment_inverse(op))
    np.testing.assert_array_equal(back.grid.semantic, s.grid.semantic)
    np.testing.assert_array_equal(back.grid.instance, s.grid.instance)


def test_rotate_four_quarter_turns_is_identity():
    s = make_sample()
    t = s
    for _ in range(4):
        t = augment(t, "rot-z-90")
    np.testing.assert_array_equal(t.grid.semantic, s.grid.semantic)
    np.testing.assert_array_equal(t.grid.instance, s.grid.instance)


def test_augment_centers_transform_by_the_isometry():
    s = make_sample()
    g = s.grid
    nx, ny, _ = g.dims
    vs = g.voxel_size

    flipped = augment(s, "flip-x")
    for iid, rec in s.gt.items():
        expected = rec.center.copy()
        expected[0] = 2 * g.origin[0] + nx * vs - rec.center[0]
        np.testing.assert_allclose(flipped.gt.instances[iid].center, expected, atol=1e-9)

    rotated = augment(s, "rot-z-90")
    for iid, rec in s.gt.items():
        # lattice map (i,j) -> (ny-1-j, i): world (x,y) -> (ox + ny*vs - (y-oy), oy + (x-ox))
        expected = rec.center.copy()
        expected[0] = g.origin[0] + ny * vs - (rec.center[1] - g.origin[1])
        expected[1] = g.origin[1] + (rec.center[0] - g.origin[0])
        np.testing.assert_allclose(rotated.gt.instances[iid].center, expected, atol=1e-9)


def test_augment_rebuilds_consistent_labeling():
    s = make_sample()
    t = augment(s, "rot-z-180")
    ref = InstanceLabeling.from_grid(t.grid)
    assert set(t.gt.instances) == set(ref.instances)
    for iid in ref.instances:
        np.testing.assert_array_equal(t.gt.instances[iid].voxels, ref.instances[iid].voxels)
        np.testing.assert_allclose(t.gt.instances[iid].center, ref.instances[iid].center)


def test_instance_labeling_from_grid_centers():
    g = make_grid((5, 4, 3), seed=9)
    lab = InstanceLabeling.from_grid(g)
    for iid, rec in lab.items():
        np.testing.assert_allclose(rec.center, voxel_centers(g, rec.voxels).mean(axis=0))
        assert np.all(np.diff(rec.voxels) > 0)


def test_grid_invariant_rejects_instance_without_semantic():
    sem = np.zeros((2, 2, 2), dtype=np.uint16)
    inst = np.zeros((2, 2, 2), dtype=np.uint16)
    inst[0, 0, 0] = 1
    with pytest.raises(InvalidGeometry):
        VoxelGrid((2, 2, 2), 0.1, None, sem, inst)

"""Synthetic scene generator: determinism, geometric invariants, dataset
manifest, and input encoding."""

import json
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from voxinst.errors import ConfigError, InvalidGeometry, PlacementError
from voxinst.formats import read_mvox
from voxinst.grid import connected_components
from voxinst.synthgen import (
    EMPTY_CLASS,
    FIRST_OBJECT_CLASS,
    GROUND_CLASS,
    SynthConfig,
    _rasterize_footprint,
    encode_input,
    generate_dataset,
    generate_scene,
    generate_scene_with_retries,
)

CFG = SynthConfig(seed=11, num_scenes=6, train_scenes=4)


def instance_masks(grid):
    inst = grid.instance
    return {int(i): np.argwhere(inst == i) for i in np.unique(inst) if i != 0}


# -- config validation ----------------------------------------------------------


def test_config_rejects_oversized_shape():
    with pytest.raises(ConfigError):
        SynthConfig(dims=(10, 10, 24))  # diag of (9,9) needs 15


def test_config_rejects_bad_split():
    with pytest.raises(ConfigError):
        SynthConfig(num_scenes=5, train_scenes=6)


def test_config_rejects_bad_contact_probability():
    with pytest.raises(ConfigError):
        SynthConfig(contact_probability=1.5)


def test_num_classes_counts_empty_and_ground():
    assert CFG.num_classes == 7


# -- footprint rasterization ----------------------------------------------------


def test_axis_aligned_footprint_is_exact_rectangle():
    # center chosen so faces fall on voxel boundaries: exactly 4 x 6 voxels
    vs = 0.1
    fi, fj = _rasterize_footprint(
        cx=(10 + 2) * vs, cy=(20 + 3) * vs, hx=2 * vs, hy=3 * vs, yaw=0.0,
        dims=(48, 48, 24), voxel_size=vs,
    )
    assert fi.size == 4 * 6
    assert fi.min() == 10 and fi.max() == 13
    assert fj.min() == 20 and fj.max() == 25


def test_quarter_turn_footprint_swaps_extents():
    vs = 0.1
    fi, fj = _rasterize_footprint(
        cx=2.0, cy=2.0, hx=2 * vs, hy=4.5 * vs, yaw=np.pi / 2,
        dims=(48, 48, 24), voxel_size=vs,
    )
    assert fi.max() - fi.min() + 1 == 9
    assert fj.max() - fj.min() + 1 == 4


# -- scene generation -----------------------------------------------------------


def test_scene_regeneration_is_bit_identical():
    a = generate_scene(CFG, 3)
    b = generate_scene(CFG, 3)
    np.testing.assert_array_equal(a.grid.semantic, b.grid.semantic)
    np.testing.assert_array_equal(a.grid.instance, b.grid.instance)
    assert a.meta == b.meta


def test_different_scene_indices_differ():
    a = generate_scene(CFG, 0)
    b = generate_scene(CFG, 1)
    assert not np.array_equal(a.grid.instance, b.grid.instance)


def test_ground_plane_fills_bottom_layer_only():
    g = generate_scene(CFG, 0).grid
    assert (g.semantic[:, :, 0] == GROUND_CLASS).all()
    assert not (g.semantic[:, :, 1:] == GROUND_CLASS).any()
    assert (g.instance[:, :, 0] == 0).all()


def test_object_count_and_classes_in_range():
    for i in range(8):
        s = generate_scene(CFG, i)
        n = len(s.meta["objects"])
        assert CFG.min_objects <= n <= CFG.max_objects
        assert len(s.gt) == n
        for obj in s.meta["objects"]:
            assert FIRST_OBJECT_CLASS <= obj["class"] < CFG.num_classes


def test_objects_rest_on_ground_and_have_shape_heights():
    s = generate_scene(CFG, 2)
    heights = {shape[2] for shape in CFG.shapes}
    for iid, rec in s.gt.items():
        coords = np.argwhere(s.grid.instance == iid)
        ks = coords[:, 2]
        assert ks.min() == 1  # first layer above the ground plane
        assert (ks.max() - ks.min() + 1) in heights
        # column structure: every (i,j) column spans the full height
        cols = {(i, j) for i, j, _ in coords}
        assert len(coords) == len(cols) * (ks.max() - ks.min() + 1)


def test_every_instance_is_6_connected():
    for i in range(6):
        s = generate_scene(CFG, i)
        for iid, rec in s.gt.items():
            comps = connected_components(s.grid, rec.voxels, connectivity=6)
            assert len(comps) == 1, f"scene {i} instance {iid} split"


def test_contact_and_clearance_invariants():
    """Objects marked as contact share a face with their partner; all other
    pairs have at least one voxel of separation (not even corner-adjacent)."""
    face = ndimage.generate_binary_structure(3, 1)
    cube = np.ones((3, 3, 3), dtype=bool)
    checked_contact = 0
    checked_clear = 0
    for i in range(10):
        s = generate_scene(CFG, i)
        inst = s.grid.instance
        masks = {iid: inst == iid for iid in s.gt.instances}
        partners = {o["instance"]: o["contact_with"] for o in s.meta["objects"]}
        for iid, m in masks.items():
            face_dil = ndimage.binary_dilation(m, structure=face)
            cube_dil = ndimage.binary_dilation(m, structure=cube)
            for jid, other in masks.items():
                if jid == iid:
                    continue
                assert not (m & other).any(), "instances overlap"
                face_adj = (face_dil & other).any()
                near = (cube_dil & other).any()
                if partners.get(iid) == jid:
                    assert face_adj, f"scene {i}: {iid} not flush with partner {jid}"
                    checked_contact += 1
                elif partners.get(jid) != iid:
                    assert not near, f"scene {i}: {iid} and {jid} closer than 1 voxel"
                    checked_clear += 1
    assert checked_contact > 0 and checked_clear > 0


def test_placement_error_when_grid_too_crowded():
    cfg = SynthConfig(
        seed=0, num_scenes=1, train_scenes=1, dims=(15, 15, 24),
        shapes=((9, 9, 4),), min_objects=3, max_objects=3, contact_probability=0.0,
    )
    with pytest.raises(PlacementError):
        generate_scene(cfg, 0)


# -- dataset + manifest ---------------------------------------------------------


def test_generate_dataset_writes_scenes_and_manifest(tmp_path):
    manifest = generate_dataset(CFG, tmp_path)
    files = sorted(p.name for p in tmp_path.glob("*.mvox"))
    assert len(files) == CFG.num_scenes
    assert manifest["train"] == [0, 1, 2, 3]
    assert manifest["test"] == [4, 5]
    assert manifest["num_classes"] == 7
    for cls, (lo, hi) in manifest["size_bands"].items():
        assert FIRST_OBJECT_CLASS <= int(cls) < CFG.num_classes
        assert 0 < lo <= hi
    # scene files round-trip and agree with the per-scene inventory
    grid, num_classes = read_mvox(tmp_path / manifest["scenes"][0]["file"])
    assert num_classes == 7
    regenerated = generate_scene(CFG, 0, attempt=manifest["scenes"][0]["attempt"])
    np.testing.assert_array_equal(grid.semantic, regenerated.grid.semantic)
    np.testing.assert_array_equal(grid.instance, regenerated.grid.instance)


def test_dataset_regeneration_is_byte_identical(tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    generate_dataset(CFG, a_dir)
    generate_dataset(CFG, b_dir)
    for p in sorted(a_dir.iterdir()):
        assert p.read_bytes() == (b_dir / p.name).read_bytes(), p.name


def test_size_bands_cover_most_train_instances(tmp_path):
    manifest = generate_dataset(CFG, tmp_path)
    sizes = {}
    for scene in manifest["scenes"]:
        if scene["id"] not in manifest["train"]:
            continue
        for obj in scene["objects"]:
            sizes.setdefault(obj["class"], []).append(obj["num_voxels"])
    for cls, vals in sizes.items():
        lo, hi = manifest["size_bands"][str(cls)]
        frac = np.mean([(lo <= v <= hi) for v in vals])
        assert frac >= 0.9


# -- input encoding -------------------------------------------------------------


def test_encode_input_one_hot():
    s = generate_scene(CFG, 0)
    x = encode_input(s.grid, CFG.num_classes)
    assert x.shape == (7, 48, 48, 24)
    assert x.data.dtype == np.float32
    assert (x.data[EMPTY_CLASS] == 0).all()
    for c in range(1, 7):
        np.testing.assert_array_equal(x.data[c], (s.grid.semantic == c).astype(np.float32))
    # exactly one channel set per occupied voxel
    np.testing.assert_array_equal(x.data.sum(axis=0), (s.grid.semantic > 0).astype(np.float32))


def test_encode_input_rejects_out_of_range_semantics():
    s = generate_scene(CFG, 0)
    with pytest.raises(InvalidGeometry):
        encode_input(s.grid, 3)


def test_encode_input_noise_flips_only_occupied_voxels():
    s = generate_scene(CFG, 0)
    rng = np.random.default_rng(5)
    x = encode_input(s.grid, 7, noise_probability=1.0, rng=rng)
    sem_noisy = np.zeros_like(s.grid.semantic, dtype=np.int64)
    for c in range(1, 7):
        sem_noisy[x.data[c] == 1] = c
    occ = s.grid.semantic > 0
    assert ((sem_noisy > 0) == occ).all()  # occupancy preserved
    assert (sem_noisy[occ] != s.grid.semantic[occ]).all()  # p=1 flips every one
    assert (sem_noisy[~occ] == 0).all()


def test_encode_input_noise_rate_and_determinism():
    s = generate_scene(CFG, 1)
    a = encode_input(s.grid, 7, noise_probability=0.3, rng=np.random.default_rng(9))
    b = encode_input(s.grid, 7, noise_probability=0.3, rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a.data, b.data)
    occ = s.grid.semantic > 0
    changed = (a.data.argmax(axis=0)[occ] != s.grid.semantic[occ]).mean()
    assert 0.15 < changed < 0.45


def test_class_distribution_uniform_over_large_run():
    """Object classes are drawn uniformly: over a 1000-scene run every
    class's share of instances stays within 5 percentage points of 1/5."""
    cfg = SynthConfig(seed=123, num_scenes=1000, train_scenes=900)
    counts = np.zeros(cfg.num_classes, dtype=np.int64)
    for i in range(cfg.num_scenes):
        sample, _ = generate_scene_with_retries(cfg, i)
        for obj in sample.meta["objects"]:
            counts[obj["class"]] += 1
    shares = counts[FIRST_OBJECT_CLASS:] / counts.sum()
    expected = 1.0 / len(cfg.shapes)
    assert np.all(np.abs(shares - expected) <= 0.05), shares

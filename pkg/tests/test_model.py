"""Network tests: deterministic build, shape contracts, receptive-field
accounting vs measured gradient footprints, and checkpoint round-trips."""

import numpy as np
import pytest

from voxinst import autodiff as ad
from voxinst import model as M
from voxinst.autodiff import Tensor
from voxinst.errors import BadMagic, ConfigError, CorruptTensorTable, ShapeError, VersionMismatch


def small_config(**kw):
    layers = [
        M.LayerSpec("conv", 4, 3, 1, 1),
        M.LayerSpec("pool", kernel=2, stride=2),
        M.LayerSpec("conv", 6, 3, 1, 2),
        M.LayerSpec("deconv", 6, 2, 2, 1),
        M.LayerSpec("conv", 6, 3, 1, 1),
    ]
    defaults = dict(num_classes=3, embed_dim=2, layers=layers, target_receptive_field_voxels=1)
    defaults.update(kw)
    return M.ModelConfig(**defaults)


def ones_model(config):
    """All weights 1, all biases 0: on a zero input with a single +1 voxel,
    every reachable output value is strictly positive (no cancellation),
    so the footprint is exactly the positive set."""
    model = M.build(config, seed=0)
    for name, t in model.params.items():
        t.data = np.ones_like(t.data, dtype=np.float64) if name.endswith("weight") else np.zeros_like(
            t.data, dtype=np.float64
        )
    return model


def measure_footprint(config, dims, voxel):
    model = ones_model(config)
    x = np.zeros((config.num_classes, *dims), dtype=np.float64)
    x[(1, *voxel)] = 1.0
    with ad.no_grad():
        out = model.forward(Tensor(x))
    hit = out.embedding.data[0] > 0
    assert hit.any()
    axes_idx = np.nonzero(hit)
    return tuple((int(a.min()), int(a.max())) for a in axes_idx)


# -- receptive-field accounting ------------------------------------------------


def test_receptive_field_single_conv():
    cfg = M.ModelConfig(layers=[M.LayerSpec("conv", 8, 3, 1, 1)], target_receptive_field_voxels=1)
    assert M.receptive_field(cfg) == 3


def test_receptive_field_dilation_stack():
    cfg = M.ModelConfig(
        layers=[M.LayerSpec("conv", 8, 3, 1, 1), M.LayerSpec("conv", 8, 3, 1, 2)],
        target_receptive_field_voxels=1,
    )
    assert M.receptive_field(cfg) == 7


def test_default_config_receptive_field_meets_target():
    cfg = M.ModelConfig()
    assert M.receptive_field(cfg) >= 142


def test_all_dilations_one_rejected():
    layers = [
        M.LayerSpec("conv", spec.filters, spec.kernel, spec.stride, 1)
        if spec.type == "conv"
        else spec
        for spec in M.default_layers()
    ]
    with pytest.raises(ConfigError):
        M.build(M.ModelConfig(layers=layers))


def test_unbalanced_stack_rejected():
    with pytest.raises(ConfigError):
        M.build(M.ModelConfig(layers=[M.LayerSpec("pool", kernel=2, stride=2)], target_receptive_field_voxels=1))
    with pytest.raises(ConfigError):
        M.build(
            M.ModelConfig(
                layers=[M.LayerSpec("deconv", 4, 2, 2, 1)], target_receptive_field_voxels=1
            )
        )


def test_pool_doubles_later_contributions():
    """A post-pool conv's measured reach spans twice its kernel radius."""
    cfg = small_config()
    # middle probe far from borders on a 24-long axis
    fp = M.dependency_footprint(cfg, (24, 8, 8), (12, 4, 4))
    measured = measure_footprint(cfg, (24, 8, 8), (12, 4, 4))
    assert measured == fp


# -- build/forward ---------------------------------------------------------------


def test_build_deterministic():
    a = M.build(small_config(), seed=5)
    b = M.build(small_config(), seed=5)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    c = M.build(small_config(), seed=6)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


@pytest.mark.parametrize("dims", [(8, 8, 8), (16, 12, 8), (9, 7, 6)])
def test_forward_preserves_dims(dims):
    cfg = small_config()
    model = M.build(cfg, seed=1)
    x = Tensor(np.random.default_rng(0).random((3, *dims), dtype=np.float64))
    with ad.no_grad():
        out = model.forward(x)
    assert out.embedding.shape == (2, *dims)
    assert out.direction.shape == (3, *dims)


def test_forward_zero_input_finite():
    model = M.build(small_config(), seed=2)
    with ad.no_grad():
        out = model.forward(Tensor(np.zeros((3, 8, 8, 8), dtype=np.float32)))
    assert np.all(np.isfinite(out.embedding.data))
    norms = np.linalg.norm(out.direction.data, axis=0)
    assert np.all(norms <= 1 + 1e-4)


def test_forward_direction_unit_norm():
    model = M.build(small_config(), seed=3)
    x = Tensor(np.random.default_rng(1).random((3, 8, 8, 8), dtype=np.float32))
    with ad.no_grad():
        out = model.forward(x)
    norms = np.linalg.norm(out.direction.data, axis=0)
    ok = (norms == 0) | (np.abs(norms - 1) <= 1e-4)
    assert np.all(ok)


def test_forward_deterministic_bit_exact():
    model = M.build(small_config(), seed=4)
    x = Tensor(np.random.default_rng(2).random((3, 10, 8, 6), dtype=np.float32))
    with ad.no_grad():
        a = model.forward(x)
        b = model.forward(x)
    np.testing.assert_array_equal(a.embedding.data, b.embedding.data)
    np.testing.assert_array_equal(a.direction.data, b.direction.data)


def test_forward_rejects_wrong_channels():
    model = M.build(small_config(), seed=0)
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((4, 8, 8, 8), dtype=np.float32)))


# -- footprint vs analysis -------------------------------------------------------


@pytest.mark.parametrize("voxel", [(0, 0, 0), (10, 3, 2), (19, 7, 7)])
def test_measured_footprint_matches_dependency_analysis(voxel):
    cfg = small_config()
    dims = (20, 8, 8)
    assert measure_footprint(cfg, dims, voxel) == M.dependency_footprint(cfg, dims, voxel)


def test_footprint_within_analytic_radius():
    cfg = small_config()
    dims = (24, 8, 8)
    v = (12, 4, 4)
    rf = M.receptive_field(cfg)
    (xlo, xhi), _, _ = measure_footprint(cfg, dims, v)
    assert xhi - v[0] <= rf // 2 and v[0] - xlo <= rf // 2


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = M.build(small_config(), seed=9)
    p = tmp_path / "model.ckpt"
    M.save(model, p)
    loaded = M.load(p)
    for name in model.params:
        np.testing.assert_array_equal(loaded.params[name].data, model.params[name].data)
    x = Tensor(np.random.default_rng(3).random((3, 8, 8, 8), dtype=np.float32))
    with ad.no_grad():
        a = model.forward(x)
        b = loaded.forward(x)
    np.testing.assert_array_equal(a.embedding.data, b.embedding.data)
    np.testing.assert_array_equal(a.direction.data, b.direction.data)


def test_checkpoint_save_is_deterministic(tmp_path):
    model = M.build(small_config(), seed=9)
    M.save(model, tmp_path / "a.ckpt")
    M.save(model, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(BadMagic):
        M.load(p)


def test_checkpoint_version_mismatch(tmp_path):
    model = M.build(small_config(), seed=0)
    p = tmp_path / "m.ckpt"
    M.save(model, p)
    raw = bytearray(p.read_bytes())
    raw[4] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        M.load(p)


def test_checkpoint_truncated(tmp_path):
    model = M.build(small_config(), seed=0)
    p = tmp_path / "m.ckpt"
    M.save(model, p)
    p.write_bytes(p.read_bytes()[:-20])
    with pytest.raises(CorruptTensorTable):
        M.load(p)


def test_checkpoint_trailing_garbage(tmp_path):
    model = M.build(small_config(), seed=0)
    p = tmp_path / "m.ckpt"
    M.save(model, p)
    p.write_bytes(p.read_bytes() + b"junk")
    with pytest.raises(CorruptTensorTable):
        M.load(p)

"""The dual-head segmentation network: a configurable trunk of 3-d conv /
max-pool / dilated-conv / transposed-conv layers, a skip concatenation
around the dilated stack, and two 1x1x1 heads (D-dim embedding, unit
3-vector direction). Includes exact receptive-field accounting and a
binary checkpoint format.

Trunk wiring: each pool layer pushes its output onto a skip stack; each
deconv layer first concatenates the top skip entry onto its input (both at
the same resolution), so fine post-pool detail bypasses the dilated stack.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    BadMagic,
    ConfigError,
    CorruptTensorTable,
    ShapeError,
    VersionMismatch,
)
from .util import dataclass_from_dict, dataclass_to_dict

CHECKPOINT_MAGIC = b"MTML"
CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    type: str  # conv | pool | deconv
    filters: int = 0
    kernel: int = 3
    stride: int = 1
    dilation: int = 1


def default_layers():
    """Trunk satisfying the 142-voxel receptive-field target with one
    pool/deconv pair: two stem convs, a dilation pyramid at half
    resolution, skip concat, upsampling deconv, and a fusion conv."""
    dilated = [LayerSpec("conv", 32, 3, 1, d) for d in (1, 2, 4, 8, 16, 16)]
    return [
        LayerSpec("conv", 16, 3, 1, 1),
        LayerSpec("conv", 32, 3, 1, 1),
        LayerSpec("pool", kernel=2, stride=2),
        *dilated,
        LayerSpec("deconv", 32, 2, 2, 1),
        LayerSpec("conv", 32, 3, 1, 1),
    ]


@dataclass
class ModelConfig:
    num_classes: int = 7
    embed_dim: int = 8
    layers: "list[LayerSpec]" = field(default_factory=default_layers)
    target_receptive_field_voxels: int = 142


@dataclass
class FieldPair:
    """Per-voxel outputs: embedding [D, X, Y, Z] and unit direction [3, X, Y, Z]."""

    embedding: Tensor
    direction: Tensor


def receptive_field(config):
    """Analytic receptive-field extent in voxels: accumulate each layer's
    reach (kernel-1)*dilation scaled by the cumulative stride. A deconv
    with kernel == stride upsamples with non-overlapping windows, so each
    output sees exactly one input position and the extent does not grow;
    only the kernel - stride overlap (zero here) would add reach."""
    rf = 1.0
    jump = 1.0
    for layer in config.layers:
        if layer.type == "conv":
            rf += (layer.kernel - 1) * layer.dilation * jump
            jump *= layer.stride
        elif layer.type == "pool":
            rf += jump
            jump *= 2
        elif layer.type == "deconv":
            jump /= layer.stride
            rf += (layer.kernel - layer.stride) * layer.dilation * jump
        else:
            raise ConfigError(f"unknown layer type '{layer.type}'")
    return int(rf)


def _validate(config):
    if config.embed_dim < 1 or config.num_classes < 2:
        raise ConfigError(f"embed_dim {config.embed_dim} / num_classes {config.num_classes} invalid")
    scale = 1.0
    depth = 0
    for layer in config.layers:
        if layer.type == "conv":
            if layer.kernel % 2 == 0:
                raise ConfigError("conv layers require odd kernels for same-padding")
            scale *= layer.stride
        elif layer.type == "pool":
            scale *= 2
            depth += 1
        elif layer.type == "deconv":
            if layer.kernel != layer.stride:
                raise ConfigError("deconv layers require kernel == stride (exact upsampling)")
            scale /= layer.stride
            if depth == 0:
                raise ConfigError("deconv without a preceding pool (no skip source)")
            depth -= 1
        else:
            raise ConfigError(f"unknown layer type '{layer.type}'")
    if scale != 1.0 or depth != 0:
        raise ConfigError("layer stack must return to input resolution (pools matched by deconvs)")
    rf = receptive_field(config)
    if rf < config.target_receptive_field_voxels:
        raise ConfigError(
            f"receptive field {rf} below target {config.target_receptive_field_voxels}"
        )


class Model:
    """Weights table + forward pass. Parameters are named 'layerNN.weight'
    / 'layerNN.bias' for trunk layers and 'head_embed.*' / 'head_dir.*'."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def parameters(self):
        return self.params

    def forward(self, x):
        """x: Tensor[num_classes, X, Y, Z] -> FieldPair with equal spatial
        dims. Odd dims are padded to even before pooling and cropped back."""
        if x.data.ndim != 4 or x.shape[0] != self.config.num_classes:
            raise ShapeError(
                f"forward expects [{self.config.num_classes}, X, Y, Z], got {x.shape}"
            )
        orig = x.shape[1:]
        t = x
        skips = []
        for i, layer in enumerate(self.config.layers):
            if layer.type == "conv":
                t = ad.conv3d(
                    t,
                    self.params[f"layer{i:02d}.weight"],
                    self.params[f"layer{i:02d}.bias"],
                    stride=layer.stride,
                    dilation=layer.dilation,
                    padding="same",
                )
                t = ad.relu(t)
            elif layer.type == "pool":
                pads = tuple((-d) % 2 for d in t.shape[1:])
                if any(pads):
                    t = ad.pad_end3d(t, pads)
                t = ad.maxpool3d(t)
                skips.append(t)
            elif layer.type == "deconv":
                t = ad.concat([t, skips.pop()], axis=0)
                t = ad.conv_transpose3d(
                    t,
                    self.params[f"layer{i:02d}.weight"],
                    self.params[f"layer{i:02d}.bias"],
                    stride=layer.stride,
                )
                t = ad.relu(t)
        if t.shape[1:] != orig:
            t = ad.crop3d(t, orig)
        embedding = ad.conv3d(
            t, self.params["head_embed.weight"], self.params["head_embed.bias"], padding=0
        )
        raw_dir = ad.conv3d(
            t, self.params["head_dir.weight"], self.params["head_dir.bias"], padding=0
        )
        direction = ad.l2_normalize(raw_dir, axis=0)
        return FieldPair(embedding, direction)


def _channel_plan(config):
    """Yield (index, layer, in_channels, out_channels) for weighted layers,
    tracking the skip concatenation at each deconv."""
    ch = config.num_classes
    skip_ch = []
    plan = []
    for i, layer in enumerate(config.layers):
        if layer.type == "conv":
            plan.append((i, layer, ch, layer.filters))
            ch = layer.filters
        elif layer.type == "pool":
            skip_ch.append(ch)
        elif layer.type == "deconv":
            ch += skip_ch.pop()
            plan.append((i, layer, ch, layer.filters))
            ch = layer.filters
    return plan, ch


def build(config, seed=0):
    """Initialize a model deterministically: He fan-in normal weights,
    zero biases, f32."""
    _validate(config)
    rng = np.random.default_rng(seed)
    params = {}

    def he(shape, fan_in):
        return Tensor(
            (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32),
            requires_grad=True,
        )

    def zeros(n):
        return Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)

    plan, trunk_ch = _channel_plan(config)
    for i, layer, cin, cout in plan:
        k = layer.kernel
        fan_in = cin * k**3
        if layer.type == "conv":
            params[f"layer{i:02d}.weight"] = he((cout, cin, k, k, k), fan_in)
        else:  # deconv weights are [C_in, C_out, k, k, k]
            params[f"layer{i:02d}.weight"] = he((cin, cout, k, k, k), fan_in)
        params[f"layer{i:02d}.bias"] = zeros(cout)
    params["head_embed.weight"] = he((config.embed_dim, trunk_ch, 1, 1, 1), trunk_ch)
    params["head_embed.bias"] = zeros(config.embed_dim)
    params["head_dir.weight"] = he((3, trunk_ch, 1, 1, 1), trunk_ch)
    params["head_dir.bias"] = zeros(3)
    return Model(config, params)


# -- dependency-footprint analysis --------------------------------------------


def _ceil_div(a, b):
    return -((-a) // b)


def dependency_footprint(config, dims, voxel):
    """Exact per-axis interval of output voxels whose value can depend on
    the given input voxel, from layer-by-layer dependency composition
    (clipped to the volume). Returns ((xlo,xhi),(ylo,yhi),(zlo,zhi))."""
    intervals = []
    for axis in range(3):
        lo = hi = int(voxel[axis])
        n = int(dims[axis])
        orig_n = n
        skips = []
        for layer in config.layers:
            if layer.type == "conv":
                k, s, d = layer.kernel, layer.stride, layer.dilation
                p = d * (k - 1) // 2
                n_out = (n + 2 * p - d * (k - 1) - 1) // s + 1
                lo = max(_ceil_div(lo - d * (k - 1) + p, s), 0)
                hi = min((hi + p) // s, n_out - 1)
                n = n_out
            elif layer.type == "pool":
                n += n % 2  # forward pads odd dims up to even
                lo, hi = lo // 2, hi // 2
                n //= 2
                skips.append((lo, hi, n))
            elif layer.type == "deconv":
                slo, shi, _ = skips.pop()
                lo, hi = min(lo, slo), max(hi, shi)
                s, k = layer.stride, layer.kernel
                n = n * s
                lo = max(s * lo, 0)
                hi = min(s * hi + k - 1, n - 1)
        lo, hi = max(lo, 0), min(hi, orig_n - 1)  # final crop back to input dims
        intervals.append((lo, hi))
    return tuple(intervals)


# -- checkpoint I/O ------------------------------------------------------------


def save(model, path):
    """Write magic | version | config JSON | named f32 tensor table."""
    config_blob = json.dumps(dataclass_to_dict(model.config), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<I", len(model.params)))
        for name, tensor in model.params.items():
            blob = name.encode()
            data = np.ascontiguousarray(tensor.data, dtype="<f4")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: bad checkpoint magic {raw[:4]!r}")
    try:
        version, config_len = struct.unpack_from("<II", raw, 4)
    except struct.error as e:
        raise CorruptTensorTable(f"{path}: truncated header") from e
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 12
    try:
        config = dataclass_from_dict(
            ModelConfig, json.loads(raw[off : off + config_len].decode()), "checkpoint"
        )
        off += config_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + name_len].decode()
            off += name_len
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            params[name] = Tensor(data.copy(), requires_grad=True)
    except (struct.error, ValueError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptTensorTable(f"{path}: {e}") from e
    if off != len(raw):
        raise CorruptTensorTable(f"{path}: {len(raw) - off} trailing bytes")
    model = build(config, seed=0)
    expected = {name: t.data.shape for name, t in model.params.items()}
    got = {name: t.data.shape for name, t in params.items()}
    if expected != got:
        raise CorruptTensorTable(f"{path}: tensor table does not match the config's architecture")
    model.params = {name: params[name] for name in model.params}
    return model

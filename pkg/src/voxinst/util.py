"""Small shared helpers: index conventions and strict dataclass <-> dict I/O."""

import dataclasses

import numpy as np

from .errors import ConfigError

# Linear voxel indices are x-fastest everywhere: idx = i + nx*(j + ny*k).
# Fixed for file-format stability.


def linear_index(i, j, k, dims):
    nx, ny, _ = dims
    return i + nx * (j + ny * k)


def unravel(idx, dims):
    """x-fastest linear index -> (i, j, k) arrays."""
    idx = np.asarray(idx)
    nx, ny, _ = dims
    i = idx % nx
    j = (idx // nx) % ny
    k = idx // (nx * ny)
    return i, j, k


def to_c_flat(idx, dims):
    """x-fastest linear index -> flat index into a C-ordered (nx, ny, nz) array."""
    i, j, k = unravel(idx, dims)
    _, ny, nz = dims
    return k + nz * (j + ny * i)


def dataclass_to_dict(obj):
    return dataclasses.asdict(obj)


def dataclass_from_dict(cls, data, path=""):
    """Strict construction: unknown keys are rejected, nested dataclasses recurse."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {path or cls.__name__}, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} in {path or cls.__name__}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = _nested_dataclass(f.type)
        if sub is not None and isinstance(value, dict):
            value = dataclass_from_dict(sub, value, f"{path}.{name}" if path else name)
        elif sub is not None and isinstance(value, list):
            value = [dataclass_from_dict(sub, v, f"{path}.{name}[{i}]") for i, v in enumerate(value)]
        kwargs[name] = value
    return cls(**kwargs)


def _nested_dataclass(annotation):
    # Field types may be strings under `from __future__ import annotations`;
    # resolve only the ones we actually nest.
    from . import losses, meanshift, model, proposals, synthgen  # late import, avoids cycles

    table = {
        "LayerSpec": model.LayerSpec,
        "ModelConfig": model.ModelConfig,
        "LossParams": losses.LossParams,
        "MeanShiftParams": meanshift.MeanShiftParams,
        "ScoreWeights": proposals.ScoreWeights,
        "SynthConfig": synthgen.SynthConfig,
    }
    if isinstance(annotation, str):
        for key, cls in table.items():
            if key in annotation:
                return cls
        return None
    if dataclasses.is_dataclass(annotation):
        return annotation
    return None

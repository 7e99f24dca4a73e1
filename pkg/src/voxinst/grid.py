"""Voxel-grid data model: grids, point clouds, instance labelings,
voxelization/deprojection, 3-d connected components, and the
lattice-preserving augmentation group (flips, 90-degree z-rotations).

Conventions fixed across the package:
  * internal label volumes are C-order arrays of shape (nx, ny, nz);
  * a "linear voxel index" is x-fastest: i + nx*(j + ny*k), matching the
    record order of the MVOX file format;
  * world coordinates are meters; voxel (i,j,k) spans
    origin + [i,i+1) * voxel_size along x, etc.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, EmptyInput, IndexOutOfBounds, InvalidGeometry
from .util import linear_index, unravel

AUGMENT_OPS = ("identity", "flip-x", "flip-y", "rot-z-90", "rot-z-180", "rot-z-270")

_AUGMENT_INVERSE = {
    "identity": "identity",
    "flip-x": "flip-x",
    "flip-y": "flip-y",
    "rot-z-90": "rot-z-270",
    "rot-z-180": "rot-z-180",
    "rot-z-270": "rot-z-90",
}


@dataclass
class VoxelGrid:
    """Dense labeled voxel volume."""

    dims: tuple
    voxel_size: float = 0.1
    origin: np.ndarray = None
    semantic: np.ndarray = None
    instance: np.ndarray = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidGeometry(f"bad grid dims {self.dims}")
        if self.voxel_size <= 0:
            raise InvalidGeometry(f"voxel_size must be > 0, got {self.voxel_size}")
        self.origin = (
            np.zeros(3, dtype=np.float32)
            if self.origin is None
            else np.asarray(self.origin, dtype=np.float32)
        )
        if self.semantic is None:
            self.semantic = np.zeros(self.dims, dtype=np.uint16)
        if self.instance is None:
            self.instance = np.zeros(self.dims, dtype=np.uint16)
        self.semantic = np.ascontiguousarray(self.semantic, dtype=np.uint16)
        self.instance = np.ascontiguousarray(self.instance, dtype=np.uint16)
        if self.semantic.shape != self.dims or self.instance.shape != self.dims:
            raise InvalidGeometry(
                f"label volumes {self.semantic.shape}/{self.instance.shape} do not match dims {self.dims}"
            )
        if np.any((self.instance != 0) & (self.semantic == 0)):
            raise InvalidGeometry("instance id set on a semantically empty voxel")

    @property
    def num_voxels(self):
        nx, ny, nz = self.dims
        return nx * ny * nz

    def linear_semantic(self):
        """Per-voxel semantic ids in x-fastest linear order."""
        return self.semantic.ravel(order="F")

    def linear_instance(self):
        return self.instance.ravel(order="F")

    def copy(self):
        return VoxelGrid(
            self.dims, self.voxel_size, self.origin.copy(), self.semantic.copy(), self.instance.copy()
        )


@dataclass
class PointCloud:
    points: np.ndarray  # [N, 3] meters
    semantic: np.ndarray = None  # [N] u16
    instance: np.ndarray = None  # [N] u16
    color: np.ndarray = None  # [N, 3] u8, optional

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        self.semantic = (
            np.zeros(n, dtype=np.uint16) if self.semantic is None else np.asarray(self.semantic, dtype=np.uint16)
        )
        self.instance = (
            np.zeros(n, dtype=np.uint16) if self.instance is None else np.asarray(self.instance, dtype=np.uint16)
        )
        if self.color is not None:
            self.color = np.asarray(self.color, dtype=np.uint8).reshape(-1, 3)
            if len(self.color) != n:
                raise InvalidGeometry("color list length differs from point count")
        if len(self.semantic) != n or len(self.instance) != n:
            raise InvalidGeometry("attribute list lengths differ from point count")

    def __len__(self):
        return len(self.points)


@dataclass
class InstanceRecord:
    semantic: int
    voxels: np.ndarray  # sorted x-fastest linear indices
    center: np.ndarray  # mean of member voxel centers, meters (f64)


@dataclass
class InstanceLabeling:
    """Instance id -> (semantic id, member voxels, center of mass)."""

    instances: dict = field(default_factory=dict)

    @classmethod
    def from_grid(cls, grid):
        inst = grid.linear_instance()
        sem = grid.linear_semantic()
        out = {}
        for iid in np.unique(inst):
            if iid == 0:
                continue
            members = np.flatnonzero(inst == iid)
            centers = voxel_centers(grid, members)
            out[int(iid)] = InstanceRecord(
                semantic=int(sem[members[0]]),
                voxels=members.astype(np.int64),
                center=centers.mean(axis=0),
            )
        return cls(out)

    def __len__(self):
        return len(self.instances)

    def items(self):
        return self.instances.items()


@dataclass
class SceneSample:
    """A labeled grid plus its instance table and provenance metadata."""

    grid: VoxelGrid
    gt: InstanceLabeling
    scene_id: int = 0
    meta: dict = field(default_factory=dict)


def voxelize(cloud, voxel_size, origin=None):
    """Bin points into voxels; per-voxel labels are the majority vote over
    contained points (ties break toward the smallest id). With no origin
    given, the grid's min corner is the componentwise point minimum."""
    if len(cloud) == 0:
        raise EmptyInput("voxelize: empty point cloud")
    if voxel_size <= 0:
        raise InvalidGeometry(f"voxel_size must be > 0, got {voxel_size}")
    pts = cloud.points
    if not np.all(np.isfinite(pts)):
        raise InvalidGeometry("voxelize: non-finite point coordinate")
    origin = pts.min(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
    ijk = np.floor((pts - origin) / voxel_size).astype(np.int64)
    if ijk.min() < 0:
        raise InvalidGeometry("voxelize: point below the given origin")
    dims = tuple(int(d) for d in ijk.max(axis=0) + 1)
    grid = VoxelGrid(dims, voxel_size, origin.astype(np.float32))
    lin = linear_index(ijk[:, 0], ijk[:, 1], ijk[:, 2], dims)
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]
    boundaries = np.flatnonzero(np.diff(lin_sorted)) + 1
    sem_flat = np.zeros(grid.num_voxels, dtype=np.uint16)
    inst_flat = np.zeros(grid.num_voxels, dtype=np.uint16)
    for group in np.split(order, boundaries):
        v = lin[group[0]]
        sem_flat[v] = _majority(cloud.semantic[group])
        inst_flat[v] = _majority(cloud.instance[group])
    inst_flat[sem_flat == 0] = 0
    grid.semantic = sem_flat.reshape(dims, order="F")
    grid.instance = inst_flat.reshape(dims, order="F")
    return VoxelGrid(dims, voxel_size, grid.origin, grid.semantic, grid.instance)


def _majority(labels):
    counts = np.bincount(labels.astype(np.int64))
    return int(counts.argmax())  # argmax takes the first max -> smallest id


def devoxelize(grid, voxel_instances, cloud):
    """Assign each point the instance id of its containing voxel;
    out-of-bounds points get 0. `voxel_instances` is x-fastest linear."""
    voxel_instances = np.asarray(voxel_instances)
    if voxel_instances.shape != (grid.num_voxels,):
        raise InvalidGeometry(
            f"devoxelize: {voxel_instances.shape} labels for a {grid.num_voxels}-voxel grid"
        )
    ijk = np.floor((cloud.points - grid.origin.astype(np.float64)) / grid.voxel_size).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < np.asarray(grid.dims)), axis=1)
    out = np.zeros(len(cloud), dtype=voxel_instances.dtype)
    lin = linear_index(ijk[inside, 0], ijk[inside, 1], ijk[inside, 2], grid.dims)
    out[inside] = voxel_instances[lin]
    return out


def voxel_center(grid, index):
    """World-space center of the voxel at an x-fastest linear index."""
    if not 0 <= index < grid.num_voxels:
        raise IndexOutOfBounds(f"voxel index {index} outside grid of {grid.num_voxels}")
    i, j, k = unravel(int(index), grid.dims)
    return grid.origin.astype(np.float64) + (np.array([i, j, k], dtype=np.float64) + 0.5) * grid.voxel_size


def voxel_centers(grid, indices):
    """Vectorized voxel_center over an index array -> [N, 3] f64."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= grid.num_voxels):
        raise IndexOutOfBounds("voxel index outside grid")
    nx, ny, _ = grid.dims
    i = indices % nx
    j = (indices // nx) % ny
    k = indices // (nx * ny)
    ijk = np.stack([i, j, k], axis=-1).astype(np.float64)
    return grid.origin.astype(np.float64) + (ijk + 0.5) * grid.voxel_size


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(grid, mask, connectivity=6):
    """Partition a voxel subset into maximal connected components.

    `mask` is either a boolean volume of grid.dims or an array of x-fastest
    linear indices. Returns a list of sorted linear-index arrays, ordered
    by each component's smallest member."""
    if connectivity not in _STRUCTURES:
        raise ConfigError(f"connectivity must be one of 6/18/26, got {connectivity}")
    vol = np.zeros(grid.dims, dtype=bool)
    mask = np.asarray(mask)
    if mask.dtype == bool and mask.shape == tuple(grid.dims):
        vol = mask
    else:
        idx = mask.astype(np.int64).ravel()
        if idx.size == 0:
            return []
        if idx.min() < 0 or idx.max() >= grid.num_voxels:
            raise IndexOutOfBounds("mask index outside grid")
        flat = vol.reshape(-1)
        nx, ny, nz = grid.dims
        # convert x-fastest linear to C-order flat offsets
        i = idx % nx
        j = (idx // nx) % ny
        k = idx // (nx * ny)
        flat[(i * ny + j) * nz + k] = True
    labeled, n = ndimage.label(vol, structure=_STRUCTURES[connectivity])
    if n == 0:
        return []
    lin = labeled.ravel(order="F")  # x-fastest linear order
    comps = []
    for lab in range(1, n + 1):
        comps.append(np.flatnonzero(lin == lab).astype(np.int64))
    comps.sort(key=lambda c: int(c[0]))
    return comps


def _transform_volume(vol, op):
    if op == "identity":
        return vol.copy()
    if op == "flip-x":
        return vol[::-1, :, :].copy()
    if op == "flip-y":
        return vol[:, ::-1, :].copy()
    if op == "rot-z-90":
        return np.ascontiguousarray(np.rot90(vol, 1, axes=(0, 1)))
    if op == "rot-z-180":
        return np.ascontiguousarray(np.rot90(vol, 2, axes=(0, 1)))
    if op == "rot-z-270":
        return np.ascontiguousarray(np.rot90(vol, 3, axes=(0, 1)))
    raise ConfigError(f"unknown augmentation op '{op}'")


def augment(sample, op):
    """Apply a lattice-preserving isometry to a scene. Label volumes are
    permuted; the instance table is rebuilt so centers of mass stay equal
    to the mean of member voxel centers."""
    g = sample.grid
    sem = _transform_volume(g.semantic, op)
    inst = _transform_volume(g.instance, op)
    new_grid = VoxelGrid(sem.shape, g.voxel_size, g.origin.copy(), sem, inst)
    return SceneSample(
        grid=new_grid,
        gt=InstanceLabeling.from_grid(new_grid),
        scene_id=sample.scene_id,
        meta={**sample.meta, "augment": op},
    )


def augment_inverse(op):
    return _AUGMENT_INVERSE[op]

"""Deterministic synthetic dataset: upright cuboids of five classes with
continuous yaw, resting on a ground plane, with controlled object-contact
cases.

Determinism contract: scene i of a run is a pure function of
(config.seed, i, attempt) via a single numpy Generator whose draws happen
in a fixed order (per object: shape, yaw, contact coin, then placement
draws). Regenerating with the same config is byte-identical.

Placement:
  * non-contact objects are rejection-sampled until their voxelization has
    at least one empty voxel of clearance (Chebyshev) from every placed
    object;
  * contact objects are slid along a random lattice axis toward a placed
    partner one voxel at a time; the step before the first overlap is
    face-adjacent with zero overlap by construction.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .errors import ConfigError, InvalidGeometry, PlacementError
from .formats import write_mvox
from .grid import InstanceLabeling, SceneSample, VoxelGrid
from .util import dataclass_to_dict

EMPTY_CLASS = 0
GROUND_CLASS = 1
FIRST_OBJECT_CLASS = 2

DEFAULT_SHAPES = ((4, 4, 4), (6, 6, 6), (9, 9, 9), (4, 4, 9), (9, 9, 4))


@dataclass
class SynthConfig:
    seed: int = 0
    num_scenes: int = 1000
    train_scenes: int = 900
    dims: tuple = (48, 48, 24)
    voxel_size: float = 0.1
    shapes: tuple = DEFAULT_SHAPES
    min_objects: int = 3
    max_objects: int = 8
    contact_probability: float = 0.5

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.shapes = tuple(tuple(int(x) for x in s) for s in self.shapes)
        if self.num_scenes < 1 or not 0 <= self.train_scenes <= self.num_scenes:
            raise ConfigError(f"bad split {self.train_scenes}/{self.num_scenes}")
        if not 0 <= self.contact_probability <= 1:
            raise ConfigError(f"contact_probability {self.contact_probability} outside [0, 1]")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"bad object count range [{self.min_objects}, {self.max_objects}]")
        nx, ny, nz = self.dims
        for s in self.shapes:
            diag = int(np.ceil(np.hypot(s[0], s[1])))
            if diag + 2 > min(nx, ny) or s[2] + 2 > nz:
                raise ConfigError(f"shape {s} does not fit in {self.dims} with margin 1")

    @property
    def num_classes(self):
        return FIRST_OBJECT_CLASS + len(self.shapes)


def _rasterize_footprint(cx, cy, hx, hy, yaw, dims, voxel_size):
    """Voxel-center-inside test for an upright rectangle of half-extents
    (hx, hy) at (cx, cy) rotated by yaw. Returns (i, j) index arrays;
    indices are NOT clipped to the grid (callers check bounds)."""
    r = np.hypot(hx, hy)
    i0 = int(np.floor((cx - r) / voxel_size))
    i1 = int(np.ceil((cx + r) / voxel_size))
    j0 = int(np.floor((cy - r) / voxel_size))
    j1 = int(np.ceil((cy + r) / voxel_size))
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    px = (ii + 0.5) * voxel_size - cx
    py = (jj + 0.5) * voxel_size - cy
    c, s = np.cos(yaw), np.sin(yaw)
    u = c * px + s * py
    v = -s * px + c * py
    inside = (np.abs(u) <= hx) & (np.abs(v) <= hy)
    return ii[inside].astype(np.int64), jj[inside].astype(np.int64)


def _footprint_connected(fi, fj):
    if fi.size == 0:
        return False
    m = np.zeros((fi.max() - fi.min() + 1, fj.max() - fj.min() + 1), dtype=bool)
    m[fi - fi.min(), fj - fj.min()] = True
    _, n = ndimage.label(m, structure=ndimage.generate_binary_structure(2, 1))
    return n == 1


def _in_walls(fi, fj, dims):
    nx, ny, _ = dims
    return fi.size > 0 and fi.min() >= 1 and fi.max() <= nx - 2 and fj.min() >= 1 and fj.max() <= ny - 2


def _column_occupancy(occupied_2d, fi, fj):
    """True if the footprint hits any column that already holds an object
    whose z-range could intersect; occupancy is tracked per (i, j, z)."""
    return occupied_2d[fi, fj].any()


def generate_scene(config, scene_index, attempt=0):
    """Deterministic scene: ground plane at z=0, `count` upright cuboids
    resting on it, each either in face contact with an earlier object or
    separated from everything by at least one voxel."""
    rng = np.random.default_rng((config.seed, scene_index, attempt))
    nx, ny, nz = config.dims
    vs = config.voxel_size
    sem = np.zeros(config.dims, dtype=np.uint16)
    inst = np.zeros(config.dims, dtype=np.uint16)
    sem[:, :, 0] = GROUND_CLASS

    occupied = np.zeros(config.dims, dtype=np.uint16)  # instance id per voxel, objects only
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects = []

    for obj_i in range(count):
        shape_idx = int(rng.integers(len(config.shapes)))
        dx, dy, dz = config.shapes[shape_idx]
        yaw = float(rng.uniform(0.0, 2.0 * np.pi))
        hx, hy = dx * vs / 2.0, dy * vs / 2.0
        want_contact = bool(objects) and rng.random() < config.contact_probability

        placed = None
        for _ in range(1000):
            if want_contact:
                placed = _try_contact(rng, config, occupied, hx, hy, yaw, dz)
            else:
                placed = _try_clear(rng, config, occupied, hx, hy, yaw, dz)
            if placed is not None:
                break
        if placed is None:
            raise PlacementError(
                f"scene {scene_index}: object {obj_i} unplaceable after 1000 attempts"
            )
        fi, fj, cx, cy, partner = placed
        iid = obj_i + 1
        for k in range(1, dz + 1):
            sem[fi, fj, k] = FIRST_OBJECT_CLASS + shape_idx
            inst[fi, fj, k] = iid
            occupied[fi, fj, k] = iid
        objects.append(
            {
                "instance": iid,
                "class": FIRST_OBJECT_CLASS + shape_idx,
                "yaw": yaw,
                "center_xy": [cx, cy],
                "contact_with": partner,
                "num_voxels": int(fi.size) * dz,
            }
        )

    grid = VoxelGrid(config.dims, vs, None, sem, inst)
    return SceneSample(
        grid,
        InstanceLabeling.from_grid(grid),
        scene_id=scene_index,
        meta={"attempt": attempt, "objects": objects},
    )


def _try_clear(rng, config, occupied, hx, hy, yaw, dz):
    nx, ny, _ = config.dims
    vs = config.voxel_size
    cx = float(rng.uniform(0.0, nx * vs))
    cy = float(rng.uniform(0.0, ny * vs))
    fi, fj = _rasterize_footprint(cx, cy, hx, hy, yaw, config.dims, vs)
    if not _in_walls(fi, fj, config.dims) or not _footprint_connected(fi, fj):
        return None
    # every object rests on the ground plane, so column occupancy is exact:
    # one-voxel Chebyshev clearance in 2-d implies it in 3-d
    any_obj = occupied.max(axis=2) > 0
    dil = np.zeros_like(any_obj)
    dil[fi, fj] = True
    dil = ndimage.binary_dilation(dil, structure=np.ones((3, 3), dtype=bool))
    if (dil & any_obj).any():
        return None
    return fi, fj, cx, cy, None


def _try_contact(rng, config, occupied, hx, hy, yaw, dz):
    """Slide toward the scene along a random lattice axis: the position one
    step before the first overlap is flush (face-adjacent, zero overlap).
    Accepted only when the one-voxel neighborhood of that pose contains
    exactly one object and the adjacency with it is a face adjacency."""
    nx, ny, _ = config.dims
    vs = config.voxel_size
    axis = int(rng.integers(4))  # 0:+x 1:-x 2:+y 3:-y
    # rasterize mid-grid where the footprint is guaranteed whole, then move
    # it by whole voxels (rasterization commutes with integer translations)
    cx = nx * vs / 2.0 + float(rng.uniform(-vs / 2, vs / 2))
    cy = ny * vs / 2.0 + float(rng.uniform(-vs / 2, vs / 2))
    u_perp = float(rng.random())
    fi, fj = _rasterize_footprint(cx, cy, hx, hy, yaw, config.dims, vs)
    if fi.size == 0 or not _footprint_connected(fi, fj):
        return None
    step = {0: (1, 0), 1: (-1, 0), 2: (0, 1), 3: (0, -1)}[axis]
    # integer shift to the slide-start wall plus a perpendicular offset
    if axis == 0:
        di = 1 - fi.min()
        lo, hi = 1 - fj.min(), (ny - 2) - fj.max()
        dj = lo + int(u_perp * (hi - lo + 1))
    elif axis == 1:
        di = (nx - 2) - fi.max()
        lo, hi = 1 - fj.min(), (ny - 2) - fj.max()
        dj = lo + int(u_perp * (hi - lo + 1))
    elif axis == 2:
        dj = 1 - fj.min()
        lo, hi = 1 - fi.min(), (nx - 2) - fi.max()
        di = lo + int(u_perp * (hi - lo + 1))
    else:
        dj = (ny - 2) - fj.max()
        lo, hi = 1 - fi.min(), (nx - 2) - fi.max()
        di = lo + int(u_perp * (hi - lo + 1))
    fi, fj = fi + di, fj + dj
    cx, cy = cx + di * vs, cy + dj * vs
    occ2d = occupied.max(axis=2)  # one object per column (all rest on ground)
    blocked = occ2d > 0
    prev = None
    for t in range(max(nx, ny)):
        gi, gj = fi + step[0] * t, fj + step[1] * t
        if gi.min() < 1 or gi.max() > nx - 2 or gj.min() < 1 or gj.max() > ny - 2:
            break
        if blocked[gi, gj].any():
            if prev is None:
                return None  # overlapping from the start: bad lane
            pi, pj = prev
            m = np.zeros((nx, ny), dtype=bool)
            m[pi, pj] = True
            face = ndimage.binary_dilation(
                m, structure=ndimage.generate_binary_structure(2, 1)
            )
            cube = ndimage.binary_dilation(m, structure=np.ones((3, 3), dtype=bool))
            near_ids = set(np.unique(occ2d[cube])) - {0}
            face_ids = set(np.unique(occ2d[face])) - {0}
            if len(near_ids) != 1 or near_ids != face_ids:
                return None  # flush against several objects, or corner-only
            cxt = cx + step[0] * (t - 1) * vs
            cyt = cy + step[1] * (t - 1) * vs
            return pi, pj, cxt, cyt, int(near_ids.pop())
        prev = (gi, gj)
    return None


def generate_scene_with_retries(config, scene_index, max_attempts=50):
    """generate_scene, advancing the attempt sub-seed past placement
    failures. Returns (sample, attempt)."""
    attempt = 0
    while True:
        try:
            return generate_scene(config, scene_index, attempt), attempt
        except PlacementError:
            attempt += 1
            if attempt >= max_attempts:
                raise


def _write_one_scene(job):
    config, i, out_dir = job
    sample, attempt = generate_scene_with_retries(config, i)
    fname = f"scene_{i:05d}.mvox"
    write_mvox(sample.grid, config.num_classes, Path(out_dir) / fname)
    return {"id": i, "file": fname, "attempt": attempt, "objects": sample.meta["objects"]}


def generate_dataset(config, out_dir, jobs=1):
    """Write one MVOX file per scene plus manifest.json (split membership,
    per-class size bands from the train split, per-scene inventories).
    Scenes that fail placement are regenerated with the next attempt index,
    recorded in the manifest. With jobs > 1, scenes are generated in
    parallel worker processes (output is identical: every scene depends
    only on its own sub-seed)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    todo = [(config, i, str(out)) for i in range(config.num_scenes)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scenes = list(pool.map(_write_one_scene, todo, chunksize=8))
    else:
        scenes = [_write_one_scene(job) for job in todo]
    sizes_by_class = {}
    for row in scenes:
        if row["id"] < config.train_scenes:
            for obj in row["objects"]:
                sizes_by_class.setdefault(obj["class"], []).append(obj["num_voxels"])
    # nearest-sample percentiles so the band always covers >= 90% of the
    # train instances, even for classes with only a handful of examples
    size_bands = {
        str(cls): [
            int(np.percentile(v, 5, method="lower")),
            int(np.percentile(v, 95, method="higher")),
        ]
        for cls, v in sorted(sizes_by_class.items())
    }
    manifest = {
        "config": dataclass_to_dict(config),
        "num_classes": config.num_classes,
        "train": list(range(config.train_scenes)),
        "test": list(range(config.train_scenes, config.num_scenes)),
        "size_bands": size_bands,
        "scenes": scenes,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def encode_input(grid, num_classes, noise_probability=0.0, rng=None):
    """One-hot semantic volume [num_classes, X, Y, Z] (f32). Channel 0
    (empty) is always all-zero. With noise, each occupied voxel's class is
    flipped to a uniformly random other class with the given probability."""
    sem = grid.semantic.astype(np.int64)
    if sem.max(initial=0) >= num_classes:
        raise InvalidGeometry(f"semantic id {sem.max()} exceeds num_classes {num_classes}")
    if noise_probability > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        occupied = sem > 0
        flip = occupied & (rng.random(sem.shape) < noise_probability)
        # uniform over the other num_classes-2 occupied classes
        offs = rng.integers(1, num_classes - 1, size=sem.shape)
        sem = np.where(flip, (sem - 1 + offs) % (num_classes - 1) + 1, sem)
    out = np.zeros((num_classes, *grid.dims), dtype=np.float32)
    for c in range(1, num_classes):
        out[c] = sem == c
    return Tensor(out)

"""On-disk formats: MVOX binary scenes, ascii PLY point clouds, and
run-length-encoded prediction JSON.

MVOX layout (little-endian):
  magic "MVX1" | u32 nx, ny, nz | f32 voxel_size | 3 x f32 origin |
  u16 num_classes | nx*ny*nz records of (u16 semantic, u16 instance),
  x-fastest voxel order.
"""

import json
import struct

import numpy as np

from .errors import BadMagic, InvalidGeometry
from .grid import PointCloud, VoxelGrid

MVOX_MAGIC = b"MVX1"
_HEADER = struct.Struct("<4sIIIf3fH")


def write_mvox(grid, num_classes, path):
    nx, ny, nz = grid.dims
    header = _HEADER.pack(MVOX_MAGIC, nx, ny, nz, grid.voxel_size, *grid.origin.astype(np.float32), num_classes)
    records = np.empty((grid.num_voxels, 2), dtype="<u2")
    records[:, 0] = grid.linear_semantic()
    records[:, 1] = grid.linear_instance()
    with open(path, "wb") as f:
        f.write(header)
        f.write(records.tobytes())


def read_mvox(path):
    """-> (VoxelGrid, num_classes)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise BadMagic(f"{path}: file shorter than an MVOX header")
    magic, nx, ny, nz, voxel_size, ox, oy, oz, num_classes = _HEADER.unpack_from(raw)
    if magic != MVOX_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    n = nx * ny * nz
    body = raw[_HEADER.size :]
    if len(body) != 4 * n:
        raise InvalidGeometry(f"{path}: expected {4 * n} record bytes, found {len(body)}")
    records = np.frombuffer(body, dtype="<u2").reshape(n, 2)
    dims = (nx, ny, nz)
    grid = VoxelGrid(
        dims,
        float(voxel_size),
        np.array([ox, oy, oz], dtype=np.float32),
        records[:, 0].reshape(dims, order="F"),
        records[:, 1].reshape(dims, order="F"),
    )
    return grid, int(num_classes)


# -- PLY ----------------------------------------------------------------------

_PLY_DTYPES = {
    "float": float,
    "float32": float,
    "double": float,
    "uchar": int,
    "uint8": int,
    "ushort": int,
    "uint16": int,
    "short": int,
    "int": int,
    "uint": int,
    "int32": int,
}


def write_ply(cloud, path):
    """Ascii PLY with per-vertex color and label/instance scalars."""
    n = len(cloud)
    color = cloud.color if cloud.color is not None else np.full((n, 3), 127, dtype=np.uint8)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property ushort label",
        "property ushort instance",
        "end_header",
    ]
    rows = [
        f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g} {c[0]} {c[1]} {c[2]} {s} {i}"
        for p, c, s, i in zip(cloud.points, color, cloud.semantic, cloud.instance)
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines + rows) + "\n")


def read_ply(path):
    """Parse an ascii PLY vertex element into a PointCloud. Property order
    is taken from the header; missing color/label columns default."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise BadMagic(f"{path}: not a PLY file")
        fmt = f.readline().strip()
        if not fmt.startswith("format ascii"):
            raise InvalidGeometry(f"{path}: only ascii PLY is supported, got '{fmt}'")
        n = None
        props = []
        in_vertex = False
        for line in f:
            tok = line.split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise InvalidGeometry(f"{path}: list properties unsupported")
                if tok[1] not in _PLY_DTYPES:
                    raise InvalidGeometry(f"{path}: unknown property type '{tok[1]}'")
                props.append((tok[2], _PLY_DTYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if n is None:
            raise InvalidGeometry(f"{path}: no vertex element")
        names = [p[0] for p in props]
        for required in ("x", "y", "z"):
            if required not in names:
                raise InvalidGeometry(f"{path}: missing '{required}' property")
        cols = {name: np.empty(n, dtype=np.float64) for name in names}
        for row in range(n):
            tok = f.readline().split()
            if len(tok) != len(props):
                raise InvalidGeometry(f"{path}: vertex row {row} has {len(tok)} fields, expected {len(props)}")
            for (name, cast), value in zip(props, tok):
                cols[name][row] = cast(value)
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    color = None
    if all(c in cols for c in ("red", "green", "blue")):
        color = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.uint8)
    semantic = cols.get("label", np.zeros(n)).astype(np.uint16)
    instance = cols.get("instance", np.zeros(n)).astype(np.uint16)
    return PointCloud(points, semantic, instance, color)


# -- prediction JSON ----------------------------------------------------------


def encode_rle(indices):
    """Sorted linear indices -> flat [start, run, start, run, ...] list."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(indices) != 1) + 1
    out = []
    for run in np.split(indices, breaks):
        out.extend((int(run[0]), int(run.size)))
    return out


def decode_rle(rle):
    parts = [np.arange(rle[i], rle[i] + rle[i + 1], dtype=np.int64) for i in range(0, len(rle), 2)]
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def write_predictions(path, scene_id, dims, proposals):
    """Serialize scored proposals for one scene."""
    payload = {
        "scene_id": scene_id,
        "dims": list(dims),
        "predictions": [
            {
                "semantic_id": int(p.semantic),
                "final_score": float(p.final_score),
                "voxels_rle": encode_rle(p.voxels),
            }
            for p in proposals
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")


def read_predictions(path):
    """-> (scene_id, dims, list of (semantic_id, final_score, voxel indices))."""
    with open(path) as f:
        payload = json.load(f)
    preds = [
        (int(p["semantic_id"]), float(p["final_score"]), decode_rle(p["voxels_rle"]))
        for p in payload["predictions"]
    ]
    return payload["scene_id"], tuple(payload["dims"]), preds

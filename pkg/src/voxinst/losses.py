"""Training objectives, built as autodiff graphs over the network outputs:
a three-part discriminative embedding loss (intra-cluster pull with margin
delta_var, inter-cluster push with margin 2*delta_dist, center-norm
regularizer) plus a center-direction cosine loss, combined as a weighted
joint loss. All sums run over labeled, non-ignored object voxels only.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateBatch
from .grid import voxel_centers
from .util import to_c_flat


@dataclass
class LossParams:
    delta_var: float = 0.5
    delta_dist: float = 1.5
    gamma_var: float = 1.0
    gamma_dist: float = 1.0
    gamma_reg: float = 0.001
    alpha_fe: float = 0.5
    alpha_dir: float = 1.0
    ignore_classes: tuple = (1,)  # ground plane by default

    def __post_init__(self):
        self.ignore_classes = tuple(int(c) for c in self.ignore_classes)
        if not (self.delta_dist > self.delta_var > 0):
            raise ValueError(f"need delta_dist > delta_var > 0, got {self.delta_dist}, {self.delta_var}")


@dataclass
class ClusterStats:
    """Per-instance gather tables for one scene: member voxels (x-fastest
    linear), flat positions into [C, N]-reshaped field tensors, world
    centers, and semantic ids. Instances of ignored classes are dropped."""

    instance_ids: list
    members: list  # list of int64 arrays, x-fastest linear voxel indices
    flat_members: list  # same voxels as C-order flat positions
    centers: list  # world-space GT centers of mass (f64 [3])
    semantics: list
    dims: tuple

    @property
    def num_clusters(self):
        return len(self.instance_ids)


def compute_cluster_stats(sample, params):
    ids, members, flat, centers, sems = [], [], [], [], []
    dims = sample.grid.dims
    for iid, rec in sorted(sample.gt.items()):
        if rec.semantic in params.ignore_classes:
            continue
        ids.append(iid)
        members.append(rec.voxels)
        flat.append(to_c_flat(rec.voxels, dims))
        centers.append(rec.center)
        sems.append(rec.semantic)
    return ClusterStats(ids, members, flat, centers, sems, dims)


def _flatten_field(tensor):
    """[C, X, Y, Z] -> [C, X*Y*Z] (C-order flat positions)."""
    c = tensor.shape[0]
    return ad.reshape(tensor, (c, -1))


def cluster_means(embedding_flat, stats):
    """Per-cluster embedding means -> Tensor [D, C]."""
    cols = []
    for flat_idx in stats.flat_members:
        member_embed = ad.gather_cols(embedding_flat, flat_idx)
        cols.append(ad.tensor_mean(member_embed, axis=1, keepdims=True))
    return ad.concat(cols, axis=1)


def l_var(embedding, stats, params):
    """Mean over clusters of mean over members of the squared hinge
    [||mu_c - x_i|| - delta_var]+^2."""
    if stats.num_clusters == 0:
        warnings.warn("no clusters in batch: intra-cluster loss is 0", DegenerateBatch)
        return Tensor(np.zeros((), dtype=embedding.dtype))
    flat = _flatten_field(embedding)
    mu = cluster_means(flat, stats)
    per_cluster = []
    for ci, flat_idx in enumerate(stats.flat_members):
        members = ad.gather_cols(flat, flat_idx)
        mu_c = ad.gather_cols(mu, np.array([ci]))
        dist = ad.l2norm(ad.add(mu_c, ad.scale(members, -1.0)), axis=0)
        hinge = ad.relu(ad.add(dist, -params.delta_var))
        per_cluster.append(ad.tensor_mean(ad.mul(hinge, hinge)))
    stacked = ad.concat([ad.reshape(t, (1,)) for t in per_cluster], axis=0)
    return ad.tensor_mean(stacked)


def l_dist(embedding, stats, params):
    """Mean over ordered center pairs of [2*delta_dist - ||mu_a - mu_b||]+^2;
    zero when fewer than two clusters."""
    c = stats.num_clusters
    if c <= 1:
        return Tensor(np.zeros((), dtype=embedding.dtype))
    flat = _flatten_field(embedding)
    mu = cluster_means(flat, stats)
    idx_a, idx_b = zip(*[(a, b) for a in range(c) for b in range(c) if a != b])
    mu_a = ad.gather_cols(mu, np.array(idx_a))
    mu_b = ad.gather_cols(mu, np.array(idx_b))
    dist = ad.l2norm(ad.add(mu_a, ad.scale(mu_b, -1.0)), axis=0)
    hinge = ad.relu(ad.add(ad.scale(dist, -1.0), 2.0 * params.delta_dist))
    return ad.tensor_mean(ad.mul(hinge, hinge))


def l_reg(embedding, stats):
    """Mean cluster-center norm; pulls the embedding toward the origin."""
    if stats.num_clusters == 0:
        return Tensor(np.zeros((), dtype=embedding.dtype))
    flat = _flatten_field(embedding)
    mu = cluster_means(flat, stats)
    return ad.tensor_mean(ad.l2norm(mu, axis=0))


def l_fe(embedding, stats, params):
    total = ad.scale(l_var(embedding, stats, params), params.gamma_var)
    total = ad.add(total, ad.scale(l_dist(embedding, stats, params), params.gamma_dist))
    return ad.add(total, ad.scale(l_reg(embedding, stats), params.gamma_reg))


def gt_directions(stats, grid):
    """Per-cluster unit vectors pointing from each member voxel toward the
    instance's center of mass; a member exactly at the center gets the zero
    vector (callers must exclude it from averages).

    Returns a list of f64 arrays [3, N_c] aligned with stats.members."""
    out = []
    # Genuine off-center offsets are >= voxel_size / N_c per axis, so a
    # threshold far below that only filters floating-point residue in the
    # center-of-mass average.
    tol = 1e-6 * grid.voxel_size
    for members, center in zip(stats.members, stats.centers):
        delta = center[None, :] - voxel_centers(grid, members)  # toward center
        norms = np.linalg.norm(delta, axis=1)
        vecs = np.zeros_like(delta)
        nonzero = norms > tol
        vecs[nonzero] = delta[nonzero] / norms[nonzero, None]
        out.append(vecs.T)
    return out


def l_dir(direction, stats, grid, params=None):
    """Negative mean cosine between predicted directions and ground-truth
    center directions: -(1/C) sum_c (1/N_c) sum_i v_i . v_i_gt, skipping
    members that sit exactly at their cluster center."""
    if stats.num_clusters == 0:
        warnings.warn("no clusters in batch: direction loss is 0", DegenerateBatch)
        return Tensor(np.zeros((), dtype=direction.dtype))
    flat = _flatten_field(direction)
    targets = gt_directions(stats, grid)
    per_cluster = []
    for flat_idx, vgt in zip(stats.flat_members, targets):
        valid = np.linalg.norm(vgt, axis=0) > 0
        if not valid.any():
            continue
        pred = ad.gather_cols(flat, flat_idx[valid])
        target = Tensor(vgt[:, valid].astype(direction.dtype))
        cos = ad.tensor_sum(ad.mul(pred, target), axis=0)
        per_cluster.append(ad.tensor_mean(cos))
    if not per_cluster:
        warnings.warn("all cluster members sit at their centers: direction loss is 0", DegenerateBatch)
        return Tensor(np.zeros((), dtype=direction.dtype))
    stacked = ad.concat([ad.reshape(t, (1,)) for t in per_cluster], axis=0)
    return ad.scale(ad.tensor_mean(stacked), -1.0)


def l_joint(fields, sample, params):
    """alpha_fe * L_FE + alpha_dir * L_dir for one scene.

    Returns (loss Tensor, dict of component floats)."""
    stats = compute_cluster_stats(sample, params)
    lv = l_var(fields.embedding, stats, params)
    ld = l_dist(fields.embedding, stats, params)
    lr = l_reg(fields.embedding, stats)
    fe = ad.add(
        ad.add(ad.scale(lv, params.gamma_var), ad.scale(ld, params.gamma_dist)),
        ad.scale(lr, params.gamma_reg),
    )
    ldir = l_dir(fields.direction, stats, sample.grid, params)
    total = ad.add(ad.scale(fe, params.alpha_fe), ad.scale(ldir, params.alpha_dir))
    components = {
        "l_var": lv.item(),
        "l_dist": ld.item(),
        "l_reg": lr.item(),
        "l_fe": fe.item(),
        "l_dir": ldir.item(),
        "l_joint": total.item(),
    }
    return total, components

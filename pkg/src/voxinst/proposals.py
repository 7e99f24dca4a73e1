"""Inference-time post-processing: turn the per-voxel embedding and
direction fields into scored instance proposals.

Pipeline: mean-shift the embeddings of labeled voxels at several
bandwidths (one proposal per cluster, overlaps allowed), append 6-connected
component splits of multi-component proposals, score each proposal by
embedding coherency + direction coherency + a per-class size prior, assign
its majority semantic label, and greedily suppress overlaps (NMS).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput
from .evaluation import mask_iou
from .grid import connected_components, voxel_centers
from .meanshift import mean_shift
from .util import to_c_flat


@dataclass
class InstanceProposal:
    voxels: np.ndarray  # sorted x-fastest linear indices
    provenance: str = ""
    fe_coherency: float = 0.0
    dir_coherency: float = 0.0
    size_score: float = 0.0
    final_score: float = 0.0
    semantic: int = 0

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int64)
        if self.voxels.size == 0:
            raise EmptyInput("proposal with empty voxel set")


@dataclass
class ScoreWeights:
    w_fe: float = 1.0
    w_dir: float = 1.0
    w_size: float = 0.5
    size_bands: dict = field(default_factory=dict)  # class id -> (n_min, n_max)


def generate_proposals(fields, grid, mask, ms_params):
    """Cluster the embeddings of `mask` voxels (x-fastest linear indices)
    at every bandwidth; each cluster is a proposal, and every proposal with
    more than one 6-connected component also contributes its components as
    split proposals. Returns unscored InstanceProposals."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        return []
    emb = fields.embedding.data.reshape(fields.embedding.shape[0], -1)
    points = emb[:, to_c_flat(mask, grid.dims)].T.astype(np.float64)
    out = []
    for bi, bw in enumerate(ms_params.bandwidths):
        _, assign = mean_shift(points, bw, eps=ms_params.eps, max_iter=ms_params.max_iter)
        for mode in np.unique(assign):
            voxels = mask[assign == mode]
            proposal = InstanceProposal(voxels, provenance=f"bw{bi}")
            out.append(proposal)
            comps = connected_components(grid, voxels)
            if len(comps) > 1:
                out.extend(
                    InstanceProposal(c, provenance=f"bw{bi}-split{s}") for s, c in enumerate(comps)
                )
    return out


def fe_coherency(proposal, embedding, grid, delta_var):
    """Fraction of member voxels whose embedding lies within delta_var of
    the proposal's mean embedding (inclusive, so singletons score 1)."""
    emb = embedding.data.reshape(embedding.shape[0], -1).astype(np.float64)
    members = emb[:, to_c_flat(proposal.voxels, grid.dims)]
    mu = members.mean(axis=1, keepdims=True)
    within = np.linalg.norm(members - mu, axis=0) <= delta_var
    return float(within.mean())


def dir_coherency(proposal, direction, grid):
    """Mean cosine between each member's predicted direction and the unit
    vector from the member to the proposal centroid. Members at the
    centroid are excluded; with no usable member the score is 0."""
    dirs = direction.data.reshape(3, -1).astype(np.float64)
    flat = to_c_flat(proposal.voxels, grid.dims)
    centers = voxel_centers(grid, proposal.voxels)
    centroid = centers.mean(axis=0)
    delta = centroid[None, :] - centers
    norms = np.linalg.norm(delta, axis=1)
    valid = norms > 1e-6 * grid.voxel_size
    if not valid.any():
        return 0.0
    targets = delta[valid] / norms[valid, None]
    cos = (dirs[:, flat[valid]].T * targets).sum(axis=1)
    return float(cos.mean())


def size_score(n, semantic, weights):
    """1 inside the class's regular-size band, decaying as
    exp(-(ln(n/bound))^2 / (ln 2)^2) outside (halved per octave)."""
    band = weights.size_bands.get(int(semantic))
    if band is None:
        return 1.0
    n_min, n_max = band
    if n_min <= n <= n_max:
        return 1.0
    bound = n_min if n < n_min else n_max
    return math.exp(-((math.log(n / bound)) ** 2) / (math.log(2.0) ** 2))


def assign_semantic(proposal, grid, ignore_classes=(1,)):
    """Most occurring semantic label over member voxels (ties -> smallest
    id); empty and ignored labels don't vote."""
    labels = grid.linear_semantic()[proposal.voxels].astype(np.int64)
    labels = labels[(labels != 0) & ~np.isin(labels, list(ignore_classes))]
    if labels.size == 0:
        return 0
    return int(np.bincount(labels).argmax())


def score_proposals(proposals, fields, grid, weights, delta_var, ignore_classes=(1,)):
    """Fill fe/dir/size component scores, the semantic label, and the
    weighted final score, in place. Returns the proposals."""
    for p in proposals:
        p.fe_coherency = fe_coherency(p, fields.embedding, grid, delta_var)
        p.dir_coherency = dir_coherency(p, fields.direction, grid)
        p.semantic = assign_semantic(p, grid, ignore_classes)
        p.size_score = size_score(p.voxels.size, p.semantic, weights)
        p.final_score = (
            weights.w_fe * p.fe_coherency
            + weights.w_dir * p.dir_coherency
            + weights.w_size * p.size_score
        )
    return proposals


def nms(proposals, overlap_threshold=0.3):
    """Greedy non-maximum suppression: process by descending final_score
    (ties -> smaller first voxel index), keep a proposal iff its IoU with
    every kept one is <= the threshold."""
    order = sorted(
        range(len(proposals)),
        key=lambda i: (-proposals[i].final_score, int(proposals[i].voxels[0])),
    )
    kept = []
    for i in order:
        p = proposals[i]
        if all(mask_iou(p.voxels, q.voxels) <= overlap_threshold for q in kept):
            kept.append(p)
    return kept


def segment(fields, grid, mask, ms_params, weights, delta_var, ignore_classes=(1,), nms_threshold=0.3):
    """Full post-processing pass: propose, score, suppress."""
    proposals = generate_proposals(fields, grid, mask, ms_params)
    score_proposals(proposals, fields, grid, weights, delta_var, ignore_classes)
    return nms(proposals, nms_threshold)

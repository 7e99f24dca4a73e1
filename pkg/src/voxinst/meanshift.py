"""Flat-kernel mean-shift clustering in embedding space.

The procedure is pinned down exactly (so independent implementations can
agree bit for bit):
  * seeds are per-cell means of the points binned on a grid of cell size
    = bandwidth, visited in lexicographic cell order;
  * each seed moves to the mean of all points within `bandwidth`
    (euclidean, inclusive) until the shift is < eps or max_iter passes;
    an empty neighborhood stops the seed where it is;
  * converged modes are merged first-wins: a mode landing strictly within
    bandwidth/2 of an earlier accepted mode is dropped;
  * every point is assigned to the nearest surviving mode (ties -> lower
    mode index).
Means are taken with np.mean over members in original point order.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyInput


@dataclass
class MeanShiftParams:
    bandwidths: tuple = (0.5, 0.75, 1.0)
    eps: float = 1e-4
    max_iter: int = 300

    def __post_init__(self):
        self.bandwidths = tuple(float(b) for b in self.bandwidths)
        if not self.bandwidths or min(self.bandwidths) <= 0:
            raise ConfigError(f"bandwidths must be positive, got {self.bandwidths}")
        if list(self.bandwidths) != sorted(self.bandwidths):
            raise ConfigError(f"bandwidths must be sorted ascending, got {self.bandwidths}")

    @classmethod
    def from_delta_var(cls, delta_var, eps=1e-4, max_iter=300):
        """Default multi-threshold set tied to the embedding margin."""
        return cls((delta_var, 1.5 * delta_var, 2.0 * delta_var), eps, max_iter)


def _bin_seeds(pts, bandwidth):
    cells = {}
    for i in range(len(pts)):
        key = tuple(int(math.floor(c / bandwidth)) for c in pts[i])
        cells.setdefault(key, []).append(i)
    return [np.mean(pts[idx], axis=0) for _, idx in sorted(cells.items())]


def mean_shift(points, bandwidth, eps=1e-4, max_iter=300):
    """-> (modes [M, D] f64, assignment [N] int64)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise EmptyInput("mean_shift: empty point list")
    if bandwidth <= 0:
        raise ConfigError(f"bandwidth must be > 0, got {bandwidth}")
    bw2 = bandwidth * bandwidth

    modes = []
    for seed in _bin_seeds(pts, bandwidth):
        pos = seed.copy()
        for _ in range(max_iter):
            d2 = ((pts - pos) ** 2).sum(axis=1)
            members = d2 <= bw2
            if not members.any():
                break
            new = np.mean(pts[members], axis=0)
            shift = math.sqrt(float(((new - pos) ** 2).sum()))
            pos = new
            if shift < eps:
                break
        modes.append(pos)

    kept = []
    for m in modes:
        if not any(math.sqrt(float(((m - km) ** 2).sum())) < bandwidth / 2.0 for km in kept):
            kept.append(m)
    kept = np.asarray(kept)

    d2_to_modes = ((pts[:, None, :] - kept[None, :, :]) ** 2).sum(axis=2)
    assignment = d2_to_modes.argmin(axis=1).astype(np.int64)  # first min -> lower index
    return kept, assignment

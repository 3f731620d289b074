"""Multi-resolution support structure for the convolutional pipeline.

For one input cloud (already subsampled at the level-0 cell size) this builds
the per-level point sets plus every index table the encoder/decoder needs:

  - ``neighbor_idx[l]``: within-level radius neighbours of ``points[l]``,
  - ``pool_idx[l]``: neighbours of level-(l+1) points among level-l points,
    used by strided convolutions,
  - ``upsample_idx[l]``: for each level-l point, its nearest level-(l+1)
    point, used by nearest upsampling in the decoder.

Cell size doubles per level; the search radius at level l is
``radius_ratio * cell_l``. Tables are fixed width with the sentinel index
``len(points[l])`` padding short rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameter, ShapeError
from .geometry import RgbPointCloud, grid_subsample, radius_neighbors


@dataclass
class LayerGraph:
    points: List[np.ndarray]        # per level, (N_l, 3)
    neighbor_idx: List[np.ndarray]  # per level, (N_l, H_l)
    pool_idx: List[np.ndarray]      # level l -> l+1, (N_{l+1}, H_l)
    upsample_idx: List[np.ndarray]  # per level l < L-1, (N_l,)
    cells: List[float]
    radii: List[float]

    @property
    def num_levels(self) -> int:
        return len(self.points)

    def validate(self) -> None:
        """Check the structural invariants; raises ShapeError on violation."""
        L = self.num_levels
        for l in range(1, L):
            if len(self.points[l]) > len(self.points[l - 1]):
                raise ShapeError(f"level {l} larger than level {l - 1}")
        for l in range(L):
            n = len(self.points[l])
            if self.neighbor_idx[l].min() < 0 or self.neighbor_idx[l].max() > n:
                raise ShapeError(f"neighbor_idx[{l}] out of range")
        for l in range(L - 1):
            n = len(self.points[l])
            if self.pool_idx[l].min() < 0 or self.pool_idx[l].max() > n:
                raise ShapeError(f"pool_idx[{l}] out of range")
            n_up = len(self.points[l + 1])
            if self.upsample_idx[l].min() < 0 or self.upsample_idx[l].max() >= n_up:
                raise ShapeError(f"upsample_idx[{l}] out of range")


def build_layer_graph(points0: np.ndarray,
                      num_levels: int,
                      first_cell: float,
                      radius_ratio: float = 2.5,
                      neighbor_limits: Optional[Sequence[int]] = None) -> LayerGraph:
    """Build the full pyramid from level-0 points.

    Args:
        points0: (N, 3) level-0 positions, assumed grid-subsampled at
            ``first_cell`` already.
        num_levels: number of resolution levels (5 for the default network).
        first_cell: level-0 grid cell in metres.
        radius_ratio: search radius in units of the level cell size.
        neighbor_limits: per-level table widths; when omitted, each width is
            the 90th percentile of the exact neighbour counts of this cloud
            (calibrate once per dataset for stable widths across clouds).
    """
    if num_levels < 1:
        raise InvalidParameter("num_levels must be >= 1")
    points0 = np.asarray(points0)
    if points0.ndim != 2 or points0.shape[1] != 3 or len(points0) == 0:
        raise InvalidParameter("points0 must be a non-empty (N, 3) array")

    pts = [points0]
    cells = [first_cell]
    for l in range(1, num_levels):
        cell = first_cell * (2.0 ** l)
        sub = grid_subsample(RgbPointCloud(pts[-1]), cell)
        pts.append(sub.points)
        cells.append(cell)
    radii = [radius_ratio * c for c in cells]

    if neighbor_limits is None:
        neighbor_limits = [_percentile_limit(pts, l, radii[l]) for l in range(num_levels)]

    neighbor_idx = []
    pool_idx = []
    upsample_idx = []
    for l in range(num_levels):
        neighbor_idx.append(
            radius_neighbors(pts[l], pts[l], radii[l], neighbor_limits[l]))
        if l < num_levels - 1:
            pool_idx.append(
                radius_neighbors(pts[l + 1], pts[l], radii[l], neighbor_limits[l]))
            _, nearest = cKDTree(pts[l + 1]).query(pts[l], k=1)
            upsample_idx.append(np.asarray(nearest, dtype=np.int64))

    return LayerGraph(pts, neighbor_idx, pool_idx, upsample_idx, cells, radii)


def _percentile_limit(pts, l, radius) -> int:
    """90th-percentile neighbour count over the level-l queries of one cloud."""
    tree = cKDTree(pts[l])
    counts = [len(x) for x in tree.query_ball_point(pts[l], r=radius)]
    if l + 1 < len(pts):
        counts += [len(x) for x in cKDTree(pts[l]).query_ball_point(pts[l + 1], r=radius)]
    return max(1, int(np.ceil(np.quantile(counts, 0.9))))


def calibrate_neighbor_limits(clouds0: Sequence[np.ndarray],
                              num_levels: int,
                              first_cell: float,
                              radius_ratio: float = 2.5) -> List[int]:
    """Dataset-level table widths: 90th percentile of neighbour counts
    pooled over a sample of clouds, per level."""
    per_level: List[list] = [[] for _ in range(num_levels)]
    for points0 in clouds0:
        pts = [np.asarray(points0)]
        for l in range(1, num_levels):
            pts.append(grid_subsample(RgbPointCloud(pts[-1]), first_cell * 2.0 ** l).points)
        for l in range(num_levels):
            radius = radius_ratio * first_cell * (2.0 ** l)
            tree = cKDTree(pts[l])
            per_level[l] += [len(x) for x in tree.query_ball_point(pts[l], r=radius)]
            if l + 1 < num_levels:
                per_level[l] += [len(x) for x in tree.query_ball_point(pts[l + 1], r=radius)]
    return [max(1, int(np.ceil(np.quantile(c, 0.9)))) for c in per_level]

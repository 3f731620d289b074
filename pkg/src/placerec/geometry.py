"""Point-cloud containers and the spatial preprocessing used everywhere else.

Conventions:
  - Positions are metres, arrays of shape (N, 3).
  - Colours are RGB in [0, 1], shape (N, 3); labels are integer class IDs, shape (N,).
  - Neighbour tables are fixed width, padded with the sentinel index
    ``len(support)`` (one past the last valid support index).
  - Camera poses are camera-to-world: ``x_world = R @ x_cam + t``. Camera frame
    is the pinhole convention (x right, y down, z forward).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCrop, EmptyInput, InvalidParameter


@dataclass
class RgbPointCloud:
    """A point cloud with optional per-point colour and semantic label.

    The universal sample unit: full room reconstructions, keyframe crops and
    network inputs are all instances of this type.
    """

    points: np.ndarray                      # (N, 3) float
    colours: Optional[np.ndarray] = None    # (N, 3) float in [0, 1]
    labels: Optional[np.ndarray] = None     # (N,) int
    scene_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.dtype.kind != "f":
            self.points = self.points.astype(np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InvalidParameter(f"points must be (N, 3), got {self.points.shape}")
        if self.colours is not None:
            self.colours = np.asarray(self.colours)
            if self.colours.shape != self.points.shape:
                raise InvalidParameter("colours must match points shape")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (len(self.points),):
                raise InvalidParameter("labels must have one entry per point")
        if len(self.points) and not np.isfinite(self.points).all():
            raise InvalidParameter("points contain NaN/inf coordinates")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        """Arithmetic mean of the points, recomputed on every access."""
        if len(self.points) == 0:
            raise EmptyInput("centroid of empty cloud")
        return self.points.mean(axis=0)

    def select(self, idx) -> "RgbPointCloud":
        """Sub-cloud at the given indices; colours/labels carried through."""
        return RgbPointCloud(
            points=self.points[idx],
            colours=None if self.colours is None else self.colours[idx],
            labels=None if self.labels is None else self.labels[idx],
            scene_id=self.scene_id,
        )

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "RgbPointCloud":
        """Rigidly transformed copy: p -> R p + t."""
        pts = self.points @ np.asarray(rotation).T + np.asarray(translation)
        return RgbPointCloud(pts, self.colours, self.labels, self.scene_id)

    def astype(self, dtype) -> "RgbPointCloud":
        return RgbPointCloud(
            self.points.astype(dtype),
            None if self.colours is None else self.colours.astype(dtype),
            self.labels,
            self.scene_id,
        )


@dataclass
class CameraPose:
    """Camera-to-world pose plus pinhole intrinsics and a usable depth range."""

    rotation: np.ndarray       # (3, 3) orthonormal
    translation: np.ndarray    # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise InvalidParameter(f"rotation not orthonormal (max |R R^T - I| = {err:.3g})")
        if not (0.0 < self.near < self.far):
            raise InvalidParameter("need 0 < near < far")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation


def grid_subsample(cloud: RgbPointCloud, cell: float,
                   origin: Optional[np.ndarray] = None) -> RgbPointCloud:
    """Subsample a cloud on a regular grid, one point per non-empty cell.

    The output point for a cell is the barycentre of the cell's points; colour
    is averaged, label decided by majority vote (ties go to the smallest class
    ID). The grid origin defaults to the cloud's axis-aligned bounding-box
    minimum, which makes the operation translation-reproducible: translating
    the cloud translates the result.

    Args:
        cloud: non-empty input cloud.
        cell: grid cell edge length in metres, > 0.
        origin: optional explicit grid origin (3,); pass the origin of a
            previous pass to get idempotent re-subsampling.
    """
    if len(cloud) == 0:
        raise EmptyInput("grid_subsample of empty cloud")
    if not cell > 0:
        raise InvalidParameter(f"cell must be > 0, got {cell}")

    pts = cloud.points
    if origin is None:
        origin = pts.min(axis=0)
    cells = np.floor((pts - origin) / cell).astype(np.int64)  # (N, 3)

    # Group points by cell; np.unique sorts cells lexicographically, which
    # fixes a deterministic output order.
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_cells = len(uniq)
    counts = np.bincount(inverse, minlength=n_cells).astype(pts.dtype)

    sub_pts = np.zeros((n_cells, 3), dtype=pts.dtype)
    for d in range(3):
        sub_pts[:, d] = np.bincount(inverse, weights=pts[:, d], minlength=n_cells)
    sub_pts /= counts[:, None]

    sub_cols = None
    if cloud.colours is not None:
        sub_cols = np.zeros((n_cells, 3), dtype=cloud.colours.dtype)
        for d in range(3):
            sub_cols[:, d] = np.bincount(inverse, weights=cloud.colours[:, d],
                                         minlength=n_cells)
        sub_cols /= counts[:, None]

    sub_labels = None
    if cloud.labels is not None:
        labels = cloud.labels.astype(np.int64)
        n_classes = int(labels.max()) + 1
        votes = np.zeros((n_cells, n_classes), dtype=np.int64)
        np.add.at(votes, (inverse, labels), 1)
        # argmax returns the first maximum, i.e. the smallest class ID on ties
        sub_labels = votes.argmax(axis=1).astype(cloud.labels.dtype)

    return RgbPointCloud(sub_pts, sub_cols, sub_labels, cloud.scene_id)


def radius_neighbors(query_pts: np.ndarray, support_pts: np.ndarray,
                     radius: float, max_neighbors: int) -> np.ndarray:
    """Exact radius search, returned as a fixed-width index table.

    Row i lists the indices of support points within ``radius`` of query i,
    sorted by ascending distance (ties by ascending index), truncated to
    ``max_neighbors`` and padded with the sentinel ``len(support_pts)``.
    """
    if not radius > 0:
        raise InvalidParameter(f"radius must be > 0, got {radius}")
    if max_neighbors < 1:
        raise InvalidParameter(f"max_neighbors must be >= 1, got {max_neighbors}")
    support_pts = np.asarray(support_pts)
    query_pts = np.asarray(query_pts)
    if len(support_pts) == 0:
        raise EmptyInput("radius_neighbors with empty support")

    n_support = len(support_pts)
    tree = cKDTree(support_pts)
    lists = tree.query_ball_point(query_pts, r=radius)

    table = np.full((len(query_pts), max_neighbors), n_support, dtype=np.int64)
    for i, neigh in enumerate(lists):
        if not neigh:
            continue
        neigh = np.asarray(neigh, dtype=np.int64)
        d = np.linalg.norm(support_pts[neigh] - query_pts[i], axis=1)
        # re-check the radius exactly: the tree uses its own tolerance at the rim
        keep = d <= radius
        neigh, d = neigh[keep], d[keep]
        order = np.lexsort((neigh, d))[:max_neighbors]
        table[i, :len(order)] = neigh[order]
    return table


def frustum_crop(reconstruction: RgbPointCloud, pose: CameraPose) -> RgbPointCloud:
    """Keep exactly the points visible in the camera's viewing frustum.

    A point survives iff its camera-space depth lies in [near, far] and its
    pixel projection lands in [0, width) x [0, height).
    """
    if len(reconstruction) == 0:
        raise EmptyInput("frustum_crop of empty cloud")

    cam = pose.world_to_camera(reconstruction.points)  # (N, 3)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pose.fx * cam[:, 0] / z + pose.cx
        v = pose.fy * cam[:, 1] / z + pose.cy
    keep = (
        (z >= pose.near) & (z <= pose.far)
        & (u >= 0.0) & (u < pose.width)
        & (v >= 0.0) & (v < pose.height)
    )
    if not keep.any():
        raise EmptyCrop(f"frustum crop of scene '{reconstruction.scene_id}' is empty")
    return reconstruction.select(keep)


def centroid_distance(a: RgbPointCloud, b: RgbPointCloud) -> float:
    """Euclidean distance between the two cloud centroids."""
    if len(a) == 0 or len(b) == 0:
        raise EmptyInput("centroid_distance with empty cloud")
    return float(np.linalg.norm(a.centroid - b.centroid))


def rotation_angle(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle (radians) between two rotation matrices."""
    cos = (np.trace(r_a.T @ r_b) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))

"""Geometry kernels against brute-force oracles.

Each oracle is an independent reimplementation with plain Python loops; the
vectorised library code must reproduce it exactly (indices, labels) or to
double-precision rounding (barycentres, means).
"""
import numpy as np
import pytest

from placerec.errors import EmptyCrop, EmptyInput, InvalidParameter
from placerec.geometry import (CameraPose, RgbPointCloud, centroid_distance,
                               frustum_crop, grid_subsample, radius_neighbors,
                               rotation_angle)

from conftest import random_cloud


# ---------------------------------------------------------------------------
# oracles

def oracle_grid(cloud, cell, origin=None):
    """Dict-of-cells reimplementation of grid subsampling."""
    pts = np.asarray(cloud.points, dtype=np.float64)
    if origin is None:
        origin = pts.min(axis=0)
    cells = {}
    for i in range(len(pts)):
        key = tuple(int(np.floor((pts[i, d] - origin[d]) / cell))
                    for d in range(3))
        cells.setdefault(key, []).append(i)
    out_p, out_c, out_l = [], [], []
    for key in sorted(cells):                      # lexicographic (x, y, z)
        idx = cells[key]
        out_p.append(pts[idx].mean(axis=0))
        if cloud.colours is not None:
            out_c.append(np.asarray(cloud.colours, np.float64)[idx].mean(axis=0))
        if cloud.labels is not None:
            votes = np.bincount(cloud.labels[idx])
            out_l.append(int(np.argmax(votes)))    # ties: smallest class ID
    return (np.array(out_p),
            np.array(out_c) if out_c else None,
            np.array(out_l) if out_l else None)


def oracle_neighbors(queries, support, radius, max_neighbors):
    """O(N^2) scan; rows sorted by (distance, index), sentinel len(support)."""
    n_s = len(support)
    table = np.full((len(queries), max_neighbors), n_s, dtype=np.int64)
    for qi in range(len(queries)):
        d = np.sqrt(((support - queries[qi]) ** 2).sum(axis=1))
        cand = [(d[i], i) for i in range(n_s) if d[i] <= radius]
        cand.sort()
        for col, (_, i) in enumerate(cand[:max_neighbors]):
            table[qi, col] = i
    return table


def oracle_frustum_mask(points, pose):
    keep = np.zeros(len(points), dtype=bool)
    for i, p in enumerate(points):
        c = pose.rotation.T @ (p - pose.translation)
        if not (pose.near <= c[2] <= pose.far):
            continue
        u = pose.fx * c[0] / c[2] + pose.cx
        v = pose.fy * c[1] / c[2] + pose.cy
        keep[i] = (0.0 <= u < pose.width) and (0.0 <= v < pose.height)
    return keep


def random_pose(rng):
    # random rotation via QR, det fixed to +1
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return CameraPose(rotation=q, translation=rng.normal(scale=0.5, size=3),
                      fx=40.0, fy=40.0, cx=32.0, cy=24.0, width=64, height=48,
                      near=0.1, far=5.0)


# ---------------------------------------------------------------------------
# RgbPointCloud / CameraPose

class TestCloud:
    def test_validation(self, rng):
        with pytest.raises(InvalidParameter):
            RgbPointCloud(points=np.zeros((4, 2)), scene_id="s")
        with pytest.raises(InvalidParameter):
            RgbPointCloud(points=np.zeros((4, 3)), colours=np.zeros((3, 3)),
                          scene_id="s")
        with pytest.raises(InvalidParameter):
            RgbPointCloud(points=np.zeros((2, 3)), labels=np.zeros(3, np.uint16),
                          scene_id="s")
        with pytest.raises(InvalidParameter):
            RgbPointCloud(points=np.array([[0.0, 0.0, np.nan]]), scene_id="s")

    def test_centroid_and_select(self, rng):
        cloud = random_cloud(rng, n=20)
        assert np.allclose(cloud.centroid, cloud.points.mean(axis=0))
        sub = cloud.select(np.array([3, 1, 7]))
        assert np.array_equal(sub.points, cloud.points[[3, 1, 7]])
        assert np.array_equal(sub.labels, cloud.labels[[3, 1, 7]])
        assert sub.scene_id == cloud.scene_id

    def test_world_to_camera_matches_per_point(self, rng):
        pose = random_pose(rng)
        pts = rng.normal(size=(15, 3))
        got = pose.world_to_camera(pts)
        for i in range(len(pts)):
            ref = pose.rotation.T @ (pts[i] - pose.translation)
            assert np.allclose(got[i], ref, atol=1e-12)

    def test_pose_rejects_non_orthonormal(self):
        with pytest.raises(InvalidParameter):
            CameraPose(rotation=np.eye(3) * 1.01, translation=np.zeros(3),
                       fx=1, fy=1, cx=0, cy=0, width=2, height=2,
                       near=0.1, far=1.0)

    def test_rotation_angle(self):
        th = 0.7
        r = np.array([[np.cos(th), -np.sin(th), 0],
                      [np.sin(th), np.cos(th), 0],
                      [0, 0, 1.0]])
        assert abs(rotation_angle(np.eye(3), r) - th) < 1e-12
        assert rotation_angle(r, r) == 0.0


# ---------------------------------------------------------------------------
# grid_subsample

class TestGridSubsample:
    def test_matches_oracle(self, rng):
        for _ in range(30):
            cloud = random_cloud(rng, n=int(rng.integers(1, 120)))
            cell = float(rng.uniform(0.2, 0.8))
            got = grid_subsample(cloud, cell)
            ref_p, ref_c, ref_l = oracle_grid(cloud, cell)
            assert got.points.shape == ref_p.shape
            assert np.allclose(got.points, ref_p, atol=1e-10)
            assert np.allclose(got.colours, ref_c, atol=1e-10)
            assert np.array_equal(got.labels, ref_l)

    def test_explicit_origin(self, rng):
        cloud = random_cloud(rng, n=40)
        origin = np.array([-5.0, -5.0, -5.0])
        got = grid_subsample(cloud, 0.5, origin=origin)
        ref_p, _, _ = oracle_grid(cloud, 0.5, origin=origin)
        assert np.allclose(got.points, ref_p, atol=1e-10)

    def test_majority_tie_takes_smallest_label(self):
        # one cell, labels {2, 2, 5, 5}: tie must resolve to 2
        pts = np.zeros((4, 3)) + [[0.0, 0, 0], [0.1, 0, 0],
                                  [0.0, 0.1, 0], [0.1, 0.1, 0]]
        cloud = RgbPointCloud(points=pts,
                              labels=np.array([5, 2, 5, 2], dtype=np.uint16),
                              scene_id="s")
        out = grid_subsample(cloud, 1.0)
        assert len(out) == 1
        assert out.labels[0] == 2

    def test_translation_moves_result(self, rng):
        cloud = random_cloud(rng, n=50)
        t = np.array([3.25, -1.5, 0.75])
        moved = RgbPointCloud(points=cloud.points + t, colours=cloud.colours,
                              labels=cloud.labels, scene_id="s")
        a = grid_subsample(cloud, 0.3)
        b = grid_subsample(moved, 0.3)
        assert len(a) == len(b)
        assert np.allclose(b.points - a.points, t, atol=1e-9)

    def test_empty_and_bad_cell(self, rng):
        cloud = random_cloud(rng, n=5)
        with pytest.raises(InvalidParameter):
            grid_subsample(cloud, 0.0)
        empty = cloud.select(np.zeros(0, dtype=np.int64))
        with pytest.raises(EmptyInput):
            grid_subsample(empty, 0.5)


# ---------------------------------------------------------------------------
# radius_neighbors

class TestRadiusNeighbors:
    def test_matches_oracle(self, rng):
        for _ in range(30):
            n_s = int(rng.integers(1, 90))
            n_q = int(rng.integers(1, 40))
            support = rng.uniform(-1, 1, size=(n_s, 3))
            queries = rng.uniform(-1, 1, size=(n_q, 3))
            radius = float(rng.uniform(0.2, 1.0))
            cap = int(rng.integers(1, 25))
            got = radius_neighbors(queries, support, radius, cap)
            ref = oracle_neighbors(queries, support, radius, cap)
            assert np.array_equal(got, ref)

    def test_self_is_first_neighbor(self, rng):
        pts = rng.uniform(-1, 1, size=(30, 3))
        table = radius_neighbors(pts, pts, 0.5, 10)
        assert np.array_equal(table[:, 0], np.arange(30))

    def test_point_on_radius_boundary_included(self):
        support = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        table = radius_neighbors(np.zeros((1, 3)), support, 1.0, 4)
        assert list(table[0]) == [0, 1, 2, 2]   # sentinel = len(support)


# ---------------------------------------------------------------------------
# frustum_crop

class TestFrustumCrop:
    def test_matches_oracle(self, rng):
        hits = 0
        for _ in range(40):
            cloud = random_cloud(rng, n=200, extent=6.0)
            pose = random_pose(rng)
            ref = oracle_frustum_mask(cloud.points, pose)
            if not ref.any():
                with pytest.raises(EmptyCrop):
                    frustum_crop(cloud, pose)
                continue
            got = frustum_crop(cloud, pose)
            assert np.array_equal(got.points, cloud.points[ref])
            assert np.array_equal(got.labels, cloud.labels[ref])
            hits += 1
        assert hits >= 10        # the sweep must actually exercise crops

    def test_depth_limits(self):
        pose = CameraPose(rotation=np.eye(3), translation=np.zeros(3),
                          fx=10.0, fy=10.0, cx=16.0, cy=12.0,
                          width=32, height=24, near=1.0, far=3.0)
        pts = np.array([[0, 0, 0.5], [0, 0, 1.0], [0, 0, 2.0],
                        [0, 0, 3.0], [0, 0, 3.5]])
        cloud = RgbPointCloud(points=pts, scene_id="s")
        kept = frustum_crop(cloud, pose)
        assert np.array_equal(kept.points[:, 2], [1.0, 2.0, 3.0])


def test_centroid_distance(rng):
    a = random_cloud(rng, n=10)
    b = random_cloud(rng, n=12)
    ref = np.linalg.norm(a.points.mean(0) - b.points.mean(0))
    assert abs(centroid_distance(a, b) - ref) < 1e-12

"""Synthetic world generation: scene structure, keyframe selection, pose IO,
and the on-disk world layout."""
import json

import numpy as np
import pytest

from placerec.dataset import (NUM_CLASSES, PALETTE, KeyframeEntry, WorldSpec,
                              generate_scene, generate_world, load_keyframe,
                              load_keyframe_index, load_poses, save_poses,
                              select_keyframes, world_scenes)
from placerec.errors import ConfigError
from placerec.geometry import CameraPose, centroid_distance


@pytest.fixture(scope="module")
def scene():
    spec = WorldSpec(num_scenes=1, points_per_scene=8000, frames_per_scene=12)
    return generate_scene("sceneT", spec, np.random.default_rng(3)), spec


class TestGenerateScene:
    def test_labels_cover_structure_and_objects(self, scene):
        (recon, _), _ = scene
        hist = np.bincount(recon.labels, minlength=NUM_CLASSES)
        assert len(recon) == pytest.approx(8000, rel=0.05)
        assert all(hist[:3] > 0)            # floor, ceiling, walls
        assert (hist[3:] > 0).sum() >= 4    # at least one box per most classes
        assert recon.labels.max() < NUM_CLASSES

    def test_floor_and_ceiling_heights(self, scene):
        (recon, _), spec = scene
        z = recon.points[:, 2]
        assert np.allclose(z[recon.labels == 0], 0.0, atol=1e-9)
        assert np.allclose(z[recon.labels == 1], spec.room_height, atol=1e-9)

    def test_colours_track_the_palette(self, scene):
        (recon, _), spec = scene
        for cls in range(NUM_CLASSES):
            rows = recon.colours[recon.labels == cls]
            if len(rows) < 50:
                continue
            # mean colour within a few noise standard errors of the palette,
            # allowing bias where clipping at [0, 1] cuts one tail
            err = np.abs(rows.mean(axis=0) - PALETTE[cls])
            assert err.max() < 4 * spec.colour_noise

    def test_trajectory_inside_room_looking_level(self, scene):
        (recon, poses), spec = scene
        hi = recon.points.max(axis=0)
        for pose in poses:
            assert np.all(pose.translation[:2] > 0)
            assert np.all(pose.translation[:2] < hi[:2])
            assert abs(pose.translation[2] - spec.camera_height) < 0.1
            fwd = pose.rotation[:, 2]
            assert abs(fwd[2]) < 1e-9          # forward axis is horizontal
            assert np.allclose(pose.rotation @ pose.rotation.T, np.eye(3),
                               atol=1e-9)

    def test_deterministic_per_seed(self):
        spec = WorldSpec(num_scenes=1, points_per_scene=3000,
                         frames_per_scene=4)
        a, _ = generate_scene("s", spec, np.random.default_rng(7))
        b, _ = generate_scene("s", spec, np.random.default_rng(7))
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.labels, b.labels)


class TestSelectKeyframes:
    def _pose(self, x=0.0, yaw=0.0):
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        return CameraPose(rot, np.array([x, 0.0, 0.0]), 1, 1, 0, 0, 2, 2,
                          0.1, 5.0)

    def test_translation_threshold(self):
        # 0.2 m steps with a 0.3 m threshold: every second frame survives
        poses = [self._pose(x=0.2 * i) for i in range(7)]
        assert select_keyframes(poses, 0.3, 15.0) == [0, 2, 4, 6]

    def test_rotation_threshold(self):
        poses = [self._pose(yaw=np.radians(10.0 * i)) for i in range(5)]
        assert select_keyframes(poses, 0.3, 15.0) == [0, 2, 4]

    def test_first_frame_always_kept(self):
        poses = [self._pose(x=0.0)] * 4
        assert select_keyframes(poses, 0.3, 15.0) == [0]

    def test_empty(self):
        assert select_keyframes([], 0.3, 15.0) == []


class TestPoseIO:
    def test_roundtrip_exact(self, tmp_path, scene):
        (_, poses), _ = scene
        path = tmp_path / "poses.txt"
        save_poses(path, poses)
        back = load_poses(path)
        assert len(back) == len(poses)
        for a, b in zip(poses, back):
            assert np.array_equal(a.rotation, b.rotation)   # %.17g is exact
            assert np.array_equal(a.translation, b.translation)
            assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)
            assert (a.width, a.height, a.near, a.far) == \
                (b.width, b.height, b.near, b.far)


class TestWorldLayout:
    def test_structure_and_index(self, mini_world):
        scenes = world_scenes(mini_world)
        assert scenes == ["sceneA", "sceneB"]
        manifest = json.loads((mini_world / "manifest.json").read_text())
        assert manifest["format"] == "synthetic-world-v1"
        for s in scenes:
            assert (mini_world / "scenes" / s / "recon.cgpc").exists()
            assert (mini_world / "scenes" / s / "poses.txt").exists()

        entries = load_keyframe_index(mini_world)
        assert len(entries) > 0
        per_scene = {e.scene_id for e in entries}
        assert per_scene == {"sceneA", "sceneB"}
        index = json.loads((mini_world / "keyframes" / "index.json").read_text())
        assert index["format"] == "keyframe-index-v1"

    def test_keyframe_cloud_matches_entry(self, mini_world):
        entries = load_keyframe_index(mini_world)
        e = entries[0]
        cloud = load_keyframe(mini_world, e)
        assert len(cloud) == e.count
        assert cloud.scene_id == e.scene_id
        assert np.allclose(cloud.centroid, e.centroid, atol=1e-5)
        assert cloud.colours is not None and cloud.labels is not None

    def test_keyframes_spatially_distinct(self, mini_world):
        entries = load_keyframe_index(mini_world)
        by_scene = {}
        for e in entries:
            by_scene.setdefault(e.scene_id, []).append(np.asarray(e.centroid))
        for cents in by_scene.values():
            assert len(cents) >= 3
            spread = np.linalg.norm(np.max(cents, 0) - np.min(cents, 0))
            assert spread > 0.5           # the trajectory actually moves

    def test_world_regeneration_is_deterministic(self, tmp_path):
        spec = WorldSpec(num_scenes=1, points_per_scene=2000,
                         frames_per_scene=4)
        a_root, b_root = tmp_path / "a", tmp_path / "b"
        generate_world(a_root, spec, seed=5)
        generate_world(b_root, spec, seed=5)
        a = (a_root / "scenes" / "sceneA" / "recon.cgpc").read_bytes()
        b = (b_root / "scenes" / "sceneA" / "recon.cgpc").read_bytes()
        assert a == b

    def test_missing_index_raises_file_not_found(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_keyframe_index(tmp_path)


def test_world_spec_validation():
    with pytest.raises(ConfigError):
        WorldSpec(num_scenes=0).validate()
    with pytest.raises(ConfigError):
        WorldSpec(points_per_scene=10).validate()
    with pytest.raises(ConfigError):
        WorldSpec(frames_per_scene=1).validate()
    WorldSpec().validate()

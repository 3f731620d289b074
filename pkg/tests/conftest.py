"""Shared fixtures: random clouds, a miniature world on disk, a tiny model.

The world and model fixtures are session-scoped because generating data and
training even a toy network dominates test runtime; tests must treat them as
read-only.
"""
import numpy as np
import pytest

from placerec.dataset import WorldSpec, generate_world, derive_keyframes
from placerec.geometry import RgbPointCloud
from placerec.pipeline import ModelConfig, PlaceRecognitionModel


def random_cloud(rng, n=60, extent=2.0, scene_id="scene", dtype=np.float64,
                 num_classes=8):
    """A cloud with uniform positions, colours and labels, for oracle tests."""
    points = rng.uniform(-extent / 2.0, extent / 2.0, size=(n, 3)).astype(dtype)
    colours = rng.uniform(0.0, 1.0, size=(n, 3)).astype(dtype)
    labels = rng.integers(0, num_classes, size=n).astype(np.uint16)
    return RgbPointCloud(points=points, colours=colours, labels=labels,
                         scene_id=scene_id)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def mini_world(tmp_path_factory):
    """Two small scenes with a handful of keyframes each, on disk."""
    root = tmp_path_factory.mktemp("mini_world") / "world"
    spec = WorldSpec(num_scenes=2, points_per_scene=6000, frames_per_scene=8)
    generate_world(root, spec, seed=11)
    derive_keyframes(root)
    return root


@pytest.fixture(scope="session")
def toy_model_cfg():
    """Small double-precision model; cheap enough for per-test forward passes."""
    return ModelConfig(num_classes=8, channels=(4, 5, 6, 7, 8), stretch_dim=6,
                       vlad_clusters=4, descriptor_dim=8, dtype="float64",
                       first_subsampling_dl=0.09, seed=5)


@pytest.fixture
def toy_model(toy_model_cfg):
    return PlaceRecognitionModel(toy_model_cfg)

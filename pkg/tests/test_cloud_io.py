"""Cloud container round-trips and format error handling."""
import numpy as np
import pytest

from placerec.cloud_io import (load_cloud, load_cloud_text, save_cloud,
                               save_cloud_text)
from placerec.errors import InvalidParameter
from placerec.geometry import RgbPointCloud

from conftest import random_cloud


def test_binary_roundtrip_full(tmp_path, rng):
    cloud = random_cloud(rng, n=37, scene_id="sceneX", dtype=np.float32)
    path = tmp_path / "c.cgpc"
    save_cloud(path, cloud)
    back = load_cloud(path, dtype=np.float32)
    # storage is f32, so an f32 cloud must survive bitwise
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.colours, cloud.colours)
    assert np.array_equal(back.labels, cloud.labels)
    assert back.scene_id == "sceneX"


@pytest.mark.parametrize("with_colours,with_labels",
                         [(False, False), (True, False), (False, True)])
def test_binary_roundtrip_optional_channels(tmp_path, rng, with_colours,
                                            with_labels):
    base = random_cloud(rng, n=9, dtype=np.float32)
    cloud = RgbPointCloud(points=base.points,
                          colours=base.colours if with_colours else None,
                          labels=base.labels if with_labels else None,
                          scene_id="v")
    path = tmp_path / "c.cgpc"
    save_cloud(path, cloud)
    back = load_cloud(path, dtype=np.float32)
    assert (back.colours is None) == (not with_colours)
    assert (back.labels is None) == (not with_labels)
    assert np.array_equal(back.points, cloud.points)


def test_binary_bad_magic(tmp_path):
    path = tmp_path / "junk.cgpc"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(InvalidParameter):
        load_cloud(path)


def test_text_roundtrip_and_column_variants(tmp_path, rng):
    cloud = random_cloud(rng, n=11, scene_id="roomA")
    path = tmp_path / "c.txt"
    save_cloud_text(path, cloud)
    back = load_cloud_text(path)
    assert back.scene_id == "roomA"
    assert np.allclose(back.points, cloud.points, atol=1e-7)
    assert np.allclose(back.colours, cloud.colours, atol=1e-7)
    assert np.array_equal(back.labels, cloud.labels)

    # positions only (3 columns)
    bare = RgbPointCloud(points=cloud.points, scene_id="")
    save_cloud_text(path, bare)
    back = load_cloud_text(path)
    assert back.colours is None and back.labels is None

    # positions + label (4 columns)
    lab = RgbPointCloud(points=cloud.points, labels=cloud.labels, scene_id="")
    save_cloud_text(path, lab)
    back = load_cloud_text(path)
    assert back.colours is None
    assert np.array_equal(back.labels, cloud.labels)


def test_text_rejects_ragged_rows(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 2 3\n4 5\n")
    with pytest.raises(InvalidParameter):
        load_cloud_text(path)


def test_text_comments_and_blank_lines(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# scene lab\n\n# a comment\n0 0 0\n1 1 1\n")
    cloud = load_cloud_text(path)
    assert cloud.scene_id == "lab"
    assert len(cloud) == 2

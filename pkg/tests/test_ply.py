import numpy as np
import pytest

from pcjoint.errors import DomainError, FormatError
from pcjoint.ply_io import load_ply, round_half_away, write_ply
from pcjoint.voxels import VoxelCloud

from conftest import random_cloud


def test_round_half_away():
    np.testing.assert_array_equal(
        round_half_away(np.array([2.4, 2.5, -2.5, -2.4, 0.5])),
        [2, 3, -3, -2, 1],
    )


def test_single_vertex(tmp_path):
    path = tmp_path / "one.ply"
    write_ply(VoxelCloud(np.array([[0, 0, 0]]), np.array([[1.0, 0.0, 0.0]]), 1), path)
    cloud = load_ply(path)
    assert len(cloud) == 1
    assert cloud.resolution == 1
    np.testing.assert_allclose(cloud.attrs, [[1.0, 0.0, 0.0]])


def test_write_read_roundtrip(tmp_path, rng):
    cloud = random_cloud(rng, 500, 32)
    # quantize attrs to 8 bits so the roundtrip is exact
    cloud = VoxelCloud(cloud.coords, np.round(cloud.attrs * 255) / 255.0, 32)
    path = tmp_path / "c.ply"
    write_ply(cloud, path)
    again = load_ply(path)
    np.testing.assert_array_equal(again.coords, cloud.coords)
    np.testing.assert_allclose(again.attrs, cloud.attrs, atol=1e-12)
    path2 = tmp_path / "c2.ply"
    write_ply(again, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_empty_cloud_roundtrip(tmp_path):
    path = tmp_path / "empty.ply"
    write_ply(VoxelCloud(np.zeros((0, 3)), np.zeros((0, 3)), 1), path)
    cloud = load_ply(path)
    assert len(cloud) == 0


def test_attr_requantization_endpoints(tmp_path):
    path = tmp_path / "ends.ply"
    cloud = VoxelCloud(
        np.array([[0, 0, 0], [0, 0, 1]]), np.array([[1.0, 0.5, 0.0]] * 2), 2
    )
    write_ply(cloud, path)
    raw = path.read_bytes()
    body = raw.split(b"end_header\n", 1)[1]
    # 12 coord bytes then r,g,b
    assert body[12] == 255 and body[13] == 128 and body[14] == 0


def test_ascii_reading(tmp_path):
    path = tmp_path / "a.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
        "0.4 0 0 255 0 0\n"
        "1.6 2 3 0 128 255\n"
    )
    cloud = load_ply(path)
    np.testing.assert_array_equal(cloud.coords, [[0, 0, 0], [2, 2, 3]])
    np.testing.assert_allclose(cloud.attrs[1], [0.0, 128 / 255, 1.0])
    assert cloud.resolution == 4


def test_duplicates_keep_first(tmp_path):
    path = tmp_path / "dup.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
        "1 1 1 10 10 10\n"
        "1.2 0.8 1.4 200 200 200\n"
    )
    cloud = load_ply(path)
    assert len(cloud) == 1
    np.testing.assert_allclose(cloud.attrs[0], [10 / 255] * 3)


def test_missing_property_is_format_error(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\n"
        "end_header\n0 0 0 1 2\n"
    )
    with pytest.raises(FormatError):
        load_ply(path)


def test_negative_coordinate_is_domain_error(tmp_path):
    path = tmp_path / "neg.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n-1 0 0 1 2 3\n"
    )
    with pytest.raises(DomainError):
        load_ply(path)


def test_not_a_ply(tmp_path):
    path = tmp_path / "x.ply"
    path.write_bytes(b"hello world")
    with pytest.raises(FormatError):
        load_ply(path)


def test_extra_properties_ignored(tmp_path):
    path = tmp_path / "alpha.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property uchar alpha\n"
        "end_header\n1 2 3 9 9 9 120\n"
    )
    cloud = load_ply(path)
    np.testing.assert_array_equal(cloud.coords, [[1, 2, 3]])

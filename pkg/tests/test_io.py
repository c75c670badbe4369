import numpy as np
import pytest

from buildabs.errors import FormatError
from buildabs.geometry import PointCloud, PolyMesh
from buildabs.io import read_cloud, read_obj, read_ply, write_obj, write_ply, write_xyz
from buildabs.toy import toy_buildings


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, rng, binary):
    cloud = PointCloud(rng.normal(size=(50, 3)), rng.normal(size=(50, 3)))
    write_ply(tmp_path / "c.ply", cloud, binary=binary)
    back = read_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(back.positions, cloud.positions)
    np.testing.assert_array_equal(back.normals, cloud.normals)


def test_ply_float_properties_and_extra_elements(tmp_path):
    head = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n"
    (tmp_path / "a.ply").write_text(head + "0 1 2 255\n3 4 5 0\n")
    np.testing.assert_array_equal(read_ply(tmp_path / "a.ply").positions, [[0, 1, 2], [3, 4, 5]])


def test_xyz_round_trip(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(20, 3)))
    write_xyz(tmp_path / "c.xyz", cloud)
    np.testing.assert_array_equal(read_cloud(tmp_path / "c.xyz").positions, cloud.positions)


def test_obj_round_trip_with_polygons(tmp_path):
    mesh = toy_buildings(2, seed=0)[1][1]
    write_obj(tmp_path / "m.obj", mesh)
    back = read_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    assert back.faces == mesh.faces


def test_obj_slash_and_negative_indices(tmp_path):
    (tmp_path / "m.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 -1//1\n")
    assert read_obj(tmp_path / "m.obj").faces == ((0, 1, 2),)


def test_bad_files(tmp_path):
    (tmp_path / "x.ply").write_text("nonsense")
    with pytest.raises(FormatError):
        read_ply(tmp_path / "x.ply")
    with pytest.raises(FormatError):
        read_cloud(tmp_path / "x.bin")


def test_empty_mesh_writes(tmp_path):
    write_obj(tmp_path / "e.obj", PolyMesh([], []))
    assert read_obj(tmp_path / "e.obj").n_vertices == 0

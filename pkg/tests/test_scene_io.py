"""Sparse-model parsing, image loading and binary round trips."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from planemvs.depthmap import DepthNormalMap
from planemvs.errors import (
    DecodeError,
    DomainError,
    FileMissing,
    FormatError,
    IoError,
    LinkError,
    ParseError,
)
from planemvs.geometry import project
from planemvs.scene_io import (
    DEPTH_MAGIC,
    PointCloud,
    load_gray,
    parse_sparse_model,
    qvec_to_rotation,
    read_depth_map,
    read_ply,
    rotation_to_qvec,
    write_depth_map,
    write_ply,
    write_sparse_model,
)

FIXTURES = Path(__file__).parent / "fixtures"

# name -> (expected error, file, 1-based line or None)
MALFORMED = {
    "camera_model": (ParseError, "cameras.txt", 3),
    "camera_params": (ParseError, "cameras.txt", 3),
    "camera_token": (ParseError, "cameras.txt", 3),
    "camera_duplicate": (ParseError, "cameras.txt", 4),
    "image_header": (ParseError, "images.txt", 4),
    "image_quaternion": (ParseError, "images.txt", 6),
    "image_observations": (ParseError, "images.txt", 5),
    "point_float": (ParseError, "points3D.txt", 4),
    "point_track": (ParseError, "points3D.txt", 5),
    "point_error": (ParseError, "points3D.txt", 5),
    "dangling_camera": (LinkError, None, None),
    "dangling_point": (LinkError, None, None),
    "dangling_track": (LinkError, None, None),
}


# ---------------------------------------------------------------------------
# sparse model
# ---------------------------------------------------------------------------


def test_good_fixture_counts_and_links():
    model = parse_sparse_model(FIXTURES / "sparse_good")
    assert (len(model.cameras), len(model.images), len(model.points3d)) == (1, 2, 3)
    cam = model.cameras[1]
    assert (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height) == (100, 100, 50, 40, 100, 80)
    assert model.images[1].name == "left.png"
    assert len(model.images[1].observations) == 4
    assert model.images[1].observations[3].point3d_id == -1
    # the track of point 2 is (image 1, obs 1) and (image 2, obs 1)
    p2 = model.points3d[2]
    assert [(t.image_id, t.point2d_idx) for t in p2.track] == [(1, 1), (2, 1)]
    np.testing.assert_array_equal(p2.track[1].xy, [60, 50])
    assert p2.reproj_error == 0.8
    assert p2.color == (0, 255, 0)


def test_good_fixture_is_geometrically_consistent():
    # the observations were written by hand from the pinhole equations
    model = parse_sparse_model(FIXTURES / "sparse_good")
    for p in model.points3d.values():
        for el in p.track:
            x, _ = project(model.camera(el.image_id), p.position)
            np.testing.assert_allclose(x, el.xy, atol=1e-12)


def test_round_trip_is_fixed_point(tmp_path):
    model = parse_sparse_model(FIXTURES / "sparse_good")
    write_sparse_model(model, tmp_path / "a")
    again = parse_sparse_model(tmp_path / "a")
    write_sparse_model(again, tmp_path / "b")
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        assert (tmp_path / "a" / name).read_text() == (tmp_path / "b" / name).read_text()
    assert again.cameras == model.cameras
    for iid, im in model.images.items():
        other = again.images[iid]
        np.testing.assert_array_equal(other.qvec, im.qvec)
        np.testing.assert_array_equal(other.tvec, im.tvec)
        assert [o.point3d_id for o in other.observations] == [
            o.point3d_id for o in im.observations
        ]
    for pid, p in model.points3d.items():
        np.testing.assert_array_equal(again.points3d[pid].position, p.position)


def test_synthetic_model_round_trip(small_scene, tmp_path):
    write_sparse_model(small_scene.model, tmp_path)
    again = parse_sparse_model(tmp_path)
    assert set(again.points3d) == set(small_scene.model.points3d)
    for iid in small_scene.model.images:
        np.testing.assert_array_equal(again.camera(iid).R, small_scene.model.camera(iid).R)


def test_empty_points_body():
    model = parse_sparse_model(FIXTURES / "sparse_no_points")
    assert len(model.points3d) == 0
    assert len(model.images) == 2


@pytest.mark.parametrize("name", sorted(MALFORMED))
def test_malformed_fixture(name):
    err, fname, line = MALFORMED[name]
    with pytest.raises(err) as info:
        parse_sparse_model(FIXTURES / "malformed" / name)
    if err is ParseError:
        assert info.value.line == line
        assert info.value.path.endswith(fname)
        assert f"{fname}:{line}:" in str(info.value)


def test_dangling_camera_message():
    with pytest.raises(LinkError, match="camera 99"):
        parse_sparse_model(FIXTURES / "malformed" / "dangling_camera")


def test_missing_file(tmp_path):
    for name in ("cameras.txt", "images.txt"):
        (tmp_path / name).write_text((FIXTURES / "sparse_good" / name).read_text())
    with pytest.raises(FileMissing):
        parse_sparse_model(tmp_path)


def test_quaternion_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        R = qvec_to_rotation(q)
        np.testing.assert_allclose(qvec_to_rotation(rotation_to_qvec(R)), R, atol=1e-12)


def test_quaternion_convention():
    # 90 degrees about +z maps x to y
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    h = np.sqrt(0.5)
    np.testing.assert_allclose(rotation_to_qvec(R), [h, 0, 0, h], atol=1e-15)
    np.testing.assert_allclose(qvec_to_rotation([h, 0, 0, h]), R, atol=1e-15)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def _save(tmp_path, array, mode):
    path = tmp_path / f"img_{mode}.png"
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode=mode).save(path)
    return path


def test_white_rgb(tmp_path):
    path = _save(tmp_path, np.full((4, 4, 3), 255), "RGB")
    img = load_gray(path)
    assert (img.width, img.height) == (4, 4)
    np.testing.assert_allclose(img.data, 1.0, atol=1e-12)
    half = load_gray(path, half_scale=True)
    assert half.data.shape == (2, 2)
    np.testing.assert_allclose(half.data, 1.0, atol=1e-12)


def test_checkerboard_half_scale(tmp_path):
    path = _save(tmp_path, [[0, 255], [255, 0]], "L")
    img = load_gray(path, half_scale=True)
    assert img.data.shape == (1, 1)
    assert abs(img.data[0, 0] - 0.5) < 1e-6


def test_odd_size_half_scale(tmp_path):
    path = _save(tmp_path, np.full((5, 7), 90), "L")
    img = load_gray(path, half_scale=True)
    assert img.data.shape == (3, 4)
    np.testing.assert_allclose(img.data, 90 / 255, atol=1e-12)


def test_luma_weights(tmp_path):
    path = _save(tmp_path, [[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], "RGB")
    np.testing.assert_allclose(load_gray(path).data[0], [0.299, 0.587, 0.114], atol=1e-12)


def test_unreadable_image(tmp_path):
    path = tmp_path / "junk.png"
    path.write_bytes(b"not an image")
    with pytest.raises(DecodeError):
        load_gray(path)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def test_empty_ply(tmp_path):
    write_ply([], tmp_path / "e.ply")
    assert b"element vertex 0\n" in (tmp_path / "e.ply").read_bytes()
    assert len(read_ply(tmp_path / "e.ply")) == 0


def test_single_point_ply(tmp_path):
    write_ply([((0, 0, 0), (0, 0, 1), (1, 2, 3))], tmp_path / "p.ply")
    cloud = read_ply(tmp_path / "p.ply")
    np.testing.assert_array_equal(cloud.positions, [[0, 0, 0]])
    np.testing.assert_array_equal(cloud.normals, [[0, 0, 1]])
    np.testing.assert_array_equal(cloud.colors, [[1, 2, 3]])


def test_random_ply_bit_identical(tmp_path):
    rng = np.random.default_rng(9)
    n = rng.normal(size=(10_000, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    cloud = PointCloud(rng.normal(size=(10_000, 3)) * 100, n,
                       rng.integers(0, 256, (10_000, 3)))
    write_ply(cloud, tmp_path / "r.ply")
    back = read_ply(tmp_path / "r.ply")
    assert back.positions.tobytes() == cloud.positions.tobytes()
    assert back.normals.tobytes() == cloud.normals.tobytes()
    assert back.colors.tobytes() == cloud.colors.tobytes()
    header = (tmp_path / "r.ply").read_bytes().split(b"end_header")[0].decode()
    assert "format binary_little_endian 1.0" in header
    for prop in ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue"):
        assert f" {prop}\n" in header


def test_ply_rejects_non_unit_normals(tmp_path):
    with pytest.raises(DomainError):
        write_ply([((0, 0, 0), (0, 0, 2), (0, 0, 0))], tmp_path / "bad.ply")


def test_ply_unwritable(tmp_path):
    with pytest.raises(IoError):
        write_ply([], tmp_path / "missing_dir" / "x.ply")


# ---------------------------------------------------------------------------
# depth maps
# ---------------------------------------------------------------------------


def _random_map(rng, w=13, h=7):
    n = rng.normal(size=(h, w, 3))
    return DepthNormalMap(rng.uniform(1, 9, (h, w)), n / np.linalg.norm(n, axis=2, keepdims=True),
                          rng.uniform(0, 2, (h, w)), rng.random((h, w)) < 0.6)


def test_depth_map_round_trip(tmp_path):
    m = _random_map(np.random.default_rng(2))
    m.cost[0, 0] = np.nan
    write_depth_map(m, tmp_path / "m.phim")
    assert read_depth_map(tmp_path / "m.phim").equals(m)
    assert (tmp_path / "m.phim").read_bytes()[:4] == DEPTH_MAGIC


def test_all_invalid_map_round_trip(tmp_path):
    m = DepthNormalMap.empty(5, 4, cost=2.0)
    write_depth_map(m, tmp_path / "m.phim")
    back = read_depth_map(tmp_path / "m.phim")
    assert back.equals(m)
    assert not back.valid.any()


def test_truncated_depth_map(tmp_path):
    write_depth_map(_random_map(np.random.default_rng(3)), tmp_path / "m.phim")
    blob = (tmp_path / "m.phim").read_bytes()
    for cut in (3, 20, len(blob) - 1):
        (tmp_path / "t.phim").write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            read_depth_map(tmp_path / "t.phim")


def test_depth_map_bad_magic_and_version(tmp_path):
    write_depth_map(DepthNormalMap.empty(2, 2), tmp_path / "m.phim")
    blob = bytearray((tmp_path / "m.phim").read_bytes())
    bad = bytes(b"XXXX" + blob[4:])
    (tmp_path / "a.phim").write_bytes(bad)
    with pytest.raises(FormatError, match="magic"):
        read_depth_map(tmp_path / "a.phim")
    blob[4] = 7
    (tmp_path / "b.phim").write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        read_depth_map(tmp_path / "b.phim")

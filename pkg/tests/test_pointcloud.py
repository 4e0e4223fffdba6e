"""Geometry op and file format tests."""

import numpy as np
import pytest

from cpcad import pointcloud as pc
from cpcad.errors import ContractError, ParseError


def random_cloud(rng, n=50):
    return pc.PointCloud(rng.normal(size=(n, 3)))


def test_normalize_two_point_example():
    cloud = np.array([[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]])
    out = pc.normalize(cloud)
    np.testing.assert_array_equal(out.points, [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])


def test_normalize_idempotent():
    rng = np.random.default_rng(3)
    for _ in range(20):
        cloud = random_cloud(rng, n=int(rng.integers(4, 200)))
        once = pc.normalize(cloud)
        twice = pc.normalize(once)
        assert np.abs(once.points - twice.points).max() < 1e-12


def test_normalize_bounds_and_centroid():
    rng = np.random.default_rng(4)
    out = pc.normalize(random_cloud(rng, 123))
    assert np.abs(out.points).max() <= 1.0 + 1e-15
    assert np.abs(out.points.mean(axis=0)).max() < 1e-12


def test_normalize_degenerate_cloud_is_zeros():
    cloud = np.tile([[2.5, -1.0, 7.0]], (6, 1))
    out = pc.normalize(cloud)
    np.testing.assert_array_equal(out.points, np.zeros((6, 3)))


def test_subsample_deterministic():
    cloud = pc.PointCloud(np.arange(12.0).reshape(4, 3))
    a = pc.subsample_uniform(cloud, 1, np.random.default_rng(9))
    b = pc.subsample_uniform(cloud, 1, np.random.default_rng(9))
    np.testing.assert_array_equal(a.points, b.points)


def test_subsample_full_size_is_permutation():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 30)
    out = pc.subsample_uniform(cloud, 30, rng)
    # same multiset of rows
    key = lambda arr: np.lexsort(arr.T)
    np.testing.assert_array_equal(out.points[key(out.points)], cloud.points[key(cloud.points)])


def test_subsample_bounds():
    cloud = pc.PointCloud(np.zeros((4, 3)))
    with pytest.raises(ContractError):
        pc.subsample_uniform(cloud, 5, np.random.default_rng(0))
    with pytest.raises(ContractError):
        pc.subsample_uniform(cloud, 0, np.random.default_rng(0))


def test_chamfer_identical_zero():
    rng = np.random.default_rng(6)
    cloud = random_cloud(rng)
    assert pc.chamfer(cloud, cloud) == 0.0


def test_chamfer_single_point_pair():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert pc.chamfer(a, b) == 2.0


def test_chamfer_symmetric():
    rng = np.random.default_rng(7)
    a, b = random_cloud(rng, 40), random_cloud(rng, 60)
    assert pc.chamfer(a, b) == pc.chamfer(b, a)


def _chamfer_linear_scan(a, b):
    d_ab = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(d_ab.min(axis=1)) + np.mean(d_ab.min(axis=0).T))


def test_chamfer_matches_linear_scan_exactly():
    rng = np.random.default_rng(8)
    for _ in range(50):
        na, nb = rng.integers(1, 400, size=2)
        a = rng.normal(size=(na, 3))
        b = rng.normal(size=(nb, 3))
        assert pc.chamfer(a, b) == _chamfer_linear_scan(a, b)


def test_neighbor_index_tree_and_brute_agree():
    rng = np.random.default_rng(9)
    ref = rng.normal(size=(500, 3))  # above the brute-force cutoff
    q = rng.normal(size=(64, 3))
    tree_sqd, tree_idx = pc.NeighborIndex(ref).query(q)
    full = ((q[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
    np.testing.assert_array_equal(tree_sqd, full.min(axis=1))
    np.testing.assert_array_equal(tree_idx, full.argmin(axis=1))


def test_neighbor_index_knn_sorted():
    rng = np.random.default_rng(10)
    ref = rng.normal(size=(100, 3))
    sqd, idx = pc.NeighborIndex(ref).query_k(ref, 5)
    assert sqd.shape == idx.shape == (100, 5)
    assert (np.diff(sqd, axis=1) >= 0).all()
    # self is always the nearest neighbor of itself
    np.testing.assert_array_equal(idx[:, 0], np.arange(100))


def test_text_round_trip_three_points(tmp_path):
    pts = np.array([[0.1, -2.25, 3.0], [1e-7, 5.5, -0.125], [9.0, 8.0, 7.0]])
    path = tmp_path / "tiny.xyz"
    pc.save_xyz_text(pts, path)
    back = pc.load_xyz_text(path)
    np.testing.assert_allclose(back.points, pts, rtol=1e-9, atol=0)


def test_text_comments_and_errors(tmp_path):
    path = tmp_path / "c.xyz"
    path.write_text("# header\n1 2 3\n# trailing\n4 5 6\n")
    assert len(pc.load_xyz_text(path)) == 2

    bad = tmp_path / "bad.xyz"
    bad.write_text("1 2 3\n4 5\n")
    with pytest.raises(ParseError) as err:
        pc.load_xyz_text(bad)
    assert "line 2" in str(err.value)

    empty = tmp_path / "empty.xyz"
    empty.write_text("# nothing\n")
    with pytest.raises(ParseError):
        pc.load_xyz_text(empty)


def test_binary_round_trip_exact(tmp_path):
    rng = np.random.default_rng(11)
    cloud = random_cloud(rng, 77)
    p1 = tmp_path / "a.xyzb"
    p2 = tmp_path / "b.xyzb"
    pc.save_xyz_bin(cloud, p1)
    once = pc.load_xyz_bin(p1)
    pc.save_xyz_bin(once, p2)
    # after the one-time f32 quantization the round trip is exact
    np.testing.assert_array_equal(pc.load_xyz_bin(p2).points, once.points)
    assert p1.read_bytes() == p2.read_bytes()


def test_binary_error_cases(tmp_path):
    bad_magic = tmp_path / "m.xyzb"
    bad_magic.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(ParseError):
        pc.load_xyz_bin(bad_magic)

    truncated = tmp_path / "t.xyzb"
    truncated.write_bytes(b"PCXZ" + np.uint32(10).tobytes() + b"\x00" * 12)
    with pytest.raises(ParseError) as err:
        pc.load_xyz_bin(truncated)
    assert "10 points" in str(err.value)


def test_cloud_validation():
    with pytest.raises(ContractError):
        pc.PointCloud(np.zeros((0, 3)))
    with pytest.raises(ContractError):
        pc.PointCloud(np.zeros((3, 2)))
    with pytest.raises(ContractError):
        pc.PointCloud(np.array([[np.nan, 0, 0]]))
    with pytest.raises(ContractError):
        pc.PointCloud(np.zeros((3, 3)), label="bogus")
    with pytest.raises(ContractError):
        pc.require_pipeline_size(np.zeros((3, 3)), "train")


def test_points_are_read_only():
    cloud = pc.PointCloud(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 1.0

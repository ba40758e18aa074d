import numpy as np
import pytest

from viewshed_reg.errors import ConfigurationError, ContractError, ParseError
from viewshed_reg.flow import flow_inverse
from viewshed_reg.lie import Transform, look_rotation
from viewshed_reg.pointcloud import (PointCloud, default_density_threshold, extract_point_cloud, load_ply,
                                     save_ply)
from viewshed_reg.scene import RadianceField, sample_field


def test_ply_round_trip(tmp_path):
    pos = np.array([[0.0, 1.0, 2.0], [-1.5, 0.25, 3.0], [1e3, -1e-3, 0.0]])
    col = np.array([[0, 128, 255], [1, 2, 3], [254, 100, 7]]) / 255.0
    nrm = np.array([[0, 0, 1.0], [0, 1.0, 0], [1.0, 0, 0]])
    save_ply(PointCloud(pos, col, nrm), tmp_path / "c.ply")
    back = load_ply(tmp_path / "c.ply")
    assert np.allclose(back.positions, pos.astype(np.float32))
    assert np.array_equal(np.round(back.colors * 255).astype(int), np.round(col * 255).astype(int))
    assert np.array_equal(back.normals, nrm)


def test_ply_layout_is_binary_little_endian(tmp_path):
    save_ply(PointCloud([[1.0, 2.0, 3.0]], [[1.0, 0.0, 0.5]]), tmp_path / "c.ply")
    raw = (tmp_path / "c.ply").read_bytes()
    head, body = raw.split(b"end_header\n")
    assert b"format binary_little_endian 1.0" in head and b"element vertex 1" in head
    assert body == np.array([1, 2, 3], "<f4").tobytes() + bytes([255, 0, 128])


def test_ply_empty_cloud(tmp_path):
    save_ply(PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), tmp_path / "e.ply")
    back = load_ply(tmp_path / "e.ply")
    assert len(back) == 0 and back.positions.shape == (0, 3)


def test_ascii_ply_rejected(tmp_path):
    p = tmp_path / "a.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n")
    with pytest.raises(ParseError) as exc:
        load_ply(p)
    assert exc.value.offset == len(b"ply\n")


def test_malformed_header_reports_offset(tmp_path):
    lines = [b"ply\n", b"format binary_little_endian 1.0\n", b"element vertex abc\n", b"end_header\n"]
    p = tmp_path / "m.ply"
    p.write_bytes(b"".join(lines))
    with pytest.raises(ParseError) as exc:
        load_ply(p)
    assert exc.value.offset == len(lines[0]) + len(lines[1])


def test_truncated_body_and_bad_magic(tmp_path):
    p = tmp_path / "t.ply"
    save_ply(PointCloud(np.ones((4, 3)), np.zeros((4, 3))), p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(ParseError):
        load_ply(p)
    p.write_bytes(b"plx\n")
    with pytest.raises(ParseError) as exc:
        load_ply(p)
    assert exc.value.offset == 0


def test_point_cloud_contracts():
    with pytest.raises(ContractError):
        PointCloud(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ContractError):
        PointCloud([[np.nan, 0, 0]], [[0, 0, 0]])


def test_transformed_cloud(rng):
    T = Transform(look_rotation([0.3, 1.0, -0.2]), [1.0, 2.0, 3.0])
    pc = PointCloud(rng.normal(size=(20, 3)), rng.uniform(size=(20, 3)), np.tile([0, 0, 1.0], (20, 1)))
    q = pc.transformed(T)
    assert np.allclose(q.positions, pc.positions @ T.rotation.T + T.translation)
    assert np.allclose(q.normals, np.tile(T.rotation[:, 2], (20, 1)))


def test_empty_field_gives_empty_cloud(small_pair):
    f = small_pair.field_a
    empty = RadianceField(np.zeros_like(f.density), f.color, f.bounds, f.background)
    cloud = extract_point_cloud(small_pair.vf_a, empty, 2000, 0.0, np.random.default_rng(0))
    assert len(cloud) == 0


def test_threshold_zero_counts_positive_density(small_pair):
    vf, f = small_pair.vf_a, small_pair.field_a
    cloud = extract_point_cloud(vf, f, 5000, 0.0, np.random.default_rng(3))
    # recount by hand from the same latent draws
    x = flow_inverse(vf, np.random.default_rng(3).standard_normal((5000, 6)))[:, :3]
    x = x[np.all(np.isfinite(x), axis=1)]
    lo, hi = np.asarray(f.bounds)
    inside = np.all((x >= lo) & (x <= hi), axis=1)
    sig, _ = sample_field(f, x[inside])
    assert len(cloud) == int((sig > 0).sum())


def test_threshold_is_monotone(small_pair):
    vf, f = small_pair.vf_a, small_pair.field_a
    counts = [len(extract_point_cloud(vf, f, 5000, t * f.density.max(), np.random.default_rng(1)))
              for t in (0.0, 0.25, 0.5, 0.9)]
    assert all(b <= a for a, b in zip(counts, counts[1:]))
    with pytest.raises(ConfigurationError):
        extract_point_cloud(vf, f, 0)
    with pytest.raises(ConfigurationError):
        extract_point_cloud(vf, f, 10, -1.0)


def test_cloud_lies_in_the_density_shell(small_pair):
    """Above half the peak density a point sits inside the smoothed shell around a surface."""
    f, oracle = small_pair.field_a, small_pair.oracle_a
    spec = small_pair.config.scene
    cloud = extract_point_cloud(small_pair.vf_a, f, 20_000, default_density_threshold(f),
                                np.random.default_rng(2))
    assert len(cloud) > 1000
    vox = float(f.voxel_size.max())
    sdf = np.minimum(oracle.sdf(cloud.positions), oracle.clutter_sdf(cloud.positions))
    outer = (spec.edge_voxels + 1.0) * vox
    inner = ((spec.shell_voxels or 0.0) + spec.edge_voxels + 1.0) * vox
    ok = (sdf <= outer) & (sdf >= -inner if spec.shell_voxels else True)
    assert ok.mean() >= 0.99

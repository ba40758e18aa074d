import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewshed_reg.errors import ConfigurationError, DegenerateError
from viewshed_reg.flow import log_prob
from viewshed_reg.lie import Transform, look_rotation
from viewshed_reg.scene import Camera, RadianceField
from viewshed_reg.viewshed import (NovelViewConfig, OrientedPoint, ViewshedMap, add_oriented_point_noise,
                                   camera_looking_along, collect_oriented_points, generate_novel_views,
                                   rank_candidates, vf_mask)


def wall_field(x_wall=2.0, nx=2000, sigma=1e4):
    xs = (np.arange(nx) + 0.5) * 4.0 / nx
    dens = np.zeros((nx, 4, 4))
    dens[xs >= x_wall] = sigma
    return RadianceField(dens, np.full((nx, 4, 4, 3), 0.5), [[0, -2, -2], [4, 2, 2]], (0, 0, 0))


def forward_camera(fov=30.0, size=16):
    return Camera.from_fov(Transform(look_rotation([1.0, 0, 0]), [0.0, 0, 0]), size, size, fov)


def test_points_land_on_wall():
    fld = wall_field()
    cam = forward_camera()
    pts, stats = collect_oriented_points(fld, [cam], rays_per_camera=200, seed=3, n_samples=400)
    assert len(pts) == 200 and stats.count == 200
    spacing = 4.0 / 400 / np.cos(np.radians(30)) + 1e-9
    assert np.all(np.abs(pts[:, 0] - 2.0) <= spacing)
    assert np.allclose(np.linalg.norm(pts[:, 3:], axis=1), 1.0)
    assert np.all(pts[:, 3] > 0.9)
    assert stats.median == pytest.approx(2.0, abs=0.05)


def test_empty_field_has_no_points():
    fld = wall_field(sigma=0.0)
    with pytest.raises(DegenerateError):
        collect_oriented_points(fld, [forward_camera()], rays_per_camera=32)
    with pytest.raises(ConfigurationError):
        collect_oriented_points(fld, [], rays_per_camera=32)


def test_collected_points_lie_in_bounds(small_pair):
    pts, _ = collect_oriented_points(small_pair.field_b, small_pair.cams_b, rays_per_camera=64, seed=1,
                                     n_samples=64)
    lo, hi = np.asarray(small_pair.field_b.bounds)
    assert np.all(pts[:, :3] >= lo - 1e-9) and np.all(pts[:, :3] <= hi + 1e-9)


def test_noise_zero_is_identity(rng):
    p = rng.normal(size=(50, 6))
    assert np.array_equal(add_oriented_point_noise(p, 0.0, rng), p)


def test_noise_bounded_and_centered(rng):
    p = np.hstack([rng.uniform(-1, 1, (100_000, 3)), np.tile([0, 0, 1.0], (100_000, 1))])
    diag = np.linalg.norm(p[:, :3].max(0) - p[:, :3].min(0))
    q = add_oriented_point_noise(p, 20.0, rng)
    delta = q[:, :3] - p[:, :3]
    half = 0.2 * diag
    assert np.all(np.abs(delta) <= half)
    assert np.array_equal(q[:, 3:], p[:, 3:])
    # uniform on [-h, h] has std h / sqrt(3)
    se = half / np.sqrt(3) / np.sqrt(len(p))
    assert np.all(np.abs(delta.mean(0)) < 4 * se)
    with pytest.raises(ConfigurationError):
        add_oriented_point_noise(p, -1.0, rng)


def test_oriented_point_requires_unit_direction():
    OrientedPoint([0, 0, 0], [0, 0, 1])
    with pytest.raises(ValueError):
        OrientedPoint([0, 0, 0], [0, 0, 2])


def test_vf_prefers_observed_surface(small_pair, rng):
    vf, fld = small_pair.vf_b, small_pair.field_b
    pts, _ = collect_oriented_points(fld, small_pair.cams_b, rays_per_camera=128, seed=99, n_samples=64)
    lo, hi = np.asarray(fld.bounds)
    d = rng.normal(size=(len(pts), 3))
    rand = np.hstack([rng.uniform(lo, hi, (len(pts), 3)), d / np.linalg.norm(d, axis=1, keepdims=True)])
    on = log_prob(vf, pts)
    off = log_prob(vf, rand)
    assert np.mean(on) - np.mean(off[np.isfinite(off)]) >= 1.0


def test_rank_candidates_sorted(small_pair, rng):
    pts, lp = rank_candidates(small_pair.vf_a, rng, 64)
    assert pts.shape == (64, 6) and np.all(np.diff(lp) <= 0)
    assert np.allclose(np.linalg.norm(pts[:, 3:], axis=1), 1.0)
    assert np.allclose(log_prob(small_pair.vf_a, pts), lp)


def test_novel_views_keep_all_in_rank_order(small_pair):
    n = 12
    cfg = NovelViewConfig(n_candidates=n, n_views=n)
    tmpl = Camera.from_fov(Transform.identity(), 8, 8, 50)
    cams, lp, pts = generate_novel_views(small_pair.vf_a, small_pair.stats_a, cfg, tmpl,
                                         np.random.default_rng(5), return_scores=True)
    _, lp_all = rank_candidates(small_pair.vf_a, np.random.default_rng(5), n)
    assert len(cams) == n and np.allclose(lp, lp_all) and np.all(np.diff(lp) <= 0)
    # the principal ray passes through the sampled point at the median training depth
    for c, p in zip(cams, pts):
        ray = c.principal_ray()
        assert np.allclose(ray.origin + small_pair.stats_a.median * ray.direction, p[:3], atol=1e-12)
        assert np.allclose(ray.direction, p[3:], atol=1e-12)


def test_novel_view_config_validation():
    with pytest.raises(ConfigurationError):
        NovelViewConfig(n_candidates=4, n_views=5).validate()
    with pytest.raises(ConfigurationError):
        NovelViewConfig(mask_threshold=1.5).validate()
    with pytest.raises(ConfigurationError):
        NovelViewConfig(depth_for_origin="nearest").validate()


@settings(max_examples=40, deadline=None)
@given(x=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       a=st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1),
       depth=st.floats(0.1, 10))
def test_camera_placement_inverts_exactly(x, a, depth):
    d = np.asarray(a) / np.linalg.norm(a)
    cam = camera_looking_along(x, d, depth, {"fx": 10, "fy": 10, "cx": 4.0, "cy": 4.0, "width": 8, "height": 8})
    ray = cam.principal_ray()
    assert np.allclose(ray.origin + depth * ray.direction, x, atol=1e-12)


def test_novel_views_see_surfaces(small_pair):
    # proposals aim their principal ray at a surface point, so the image centre is opaque
    views = small_pair.views + small_pair.holdout
    h, w = views[0].opacity.shape
    centre = np.array([v.opacity[h // 2 - 2:h // 2 + 2, w // 2 - 2:w // 2 + 2].mean() for v in views])
    assert np.mean(centre > 0.5) >= 0.75


def test_mask_extremes(rng):
    scores = rng.normal(size=(10, 10))
    valid = rng.uniform(size=(10, 10)) > 0.2
    vm = ViewshedMap(np.where(valid, scores, -np.inf), valid)
    assert np.array_equal(vf_mask(vm, 0.0), valid)
    top = vf_mask(vm, 1.0)
    assert top.sum() == 1 and scores[top][0] == scores[valid].max()
    with pytest.raises(ConfigurationError):
        vf_mask(vm, 1.1)
    empty = ViewshedMap(np.full((3, 3), -np.inf), np.zeros((3, 3), bool))
    assert not vf_mask(empty, 0.3).any()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), q=st.floats(0, 1))
def test_mask_raises_mean_score(seed, q):
    r = np.random.default_rng(seed)
    scores = r.normal(size=(12, 12))
    valid = r.uniform(size=(12, 12)) > 0.3
    if not valid.any():
        return
    m = vf_mask(ViewshedMap(scores, valid), q)
    assert m.any() and not (m & ~valid).any()
    assert scores[m].mean() >= scores[valid].mean() - 1e-12
    assert m.sum() >= np.floor((1 - q) * valid.sum()) - 1


def test_view_surface_points_nan_where_invalid(small_pair):
    v = small_pair.views[0]
    sp = v.surface_points()
    bad = ~np.isfinite(v.depth.ravel())
    assert np.all(np.isnan(sp[bad, :3])) and np.all(np.isfinite(sp[~bad]))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from scipy.integrate import quad
from hypothesis import strategies as st

from viewshed_reg.errors import ConfigurationError, ContractError
from viewshed_reg.lie import Transform, look_rotation
from viewshed_reg.scene import (Camera, RadianceField, Ray, SceneSpec, make_scene, render_image,
                                render_ray, render_rays, sample_field, sample_positions)

UNIT_SPHERE = ({"type": "sphere", "center": [0.0, 0.0, 0.0], "radius": 1.0},)


def line_field(sigma_of_x, color_of_x=None, length=4.0, nx=4000, bg=(0.1, 0.2, 0.3)):
    """Field varying only along x on [0, length]; fine enough that trilinear blur is negligible."""
    xs = (np.arange(nx) + 0.5) * length / nx
    dens = np.repeat(np.repeat(sigma_of_x(xs)[:, None, None], 2, 1), 2, 2)
    col = np.zeros((nx, 2, 2, 3))
    if color_of_x is not None:
        col[:] = color_of_x(xs)[:, None, None, :]
    return RadianceField(dens, col, [[0, -1, -1], [length, 1, 1]], bg)


def x_ray():
    return Ray([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# make_scene

def test_unit_sphere_support():
    spec = SceneSpec(family="custom", primitives=UNIT_SPHERE, resolution=64, edge_voxels=0.5,
                     shell_voxels=None)
    fld, _ = make_scene(spec, 7)
    centers = fld.voxel_centers()[fld.density > 0]
    assert len(centers) > 0
    assert np.linalg.norm(centers, axis=1).max() <= 1.0 + fld.voxel_diagonal


@pytest.mark.parametrize("edge", [0.5, 1.0, 2.0, 3.0])
def test_support_grows_with_edge_width_only(edge):
    spec = SceneSpec(family="custom", primitives=UNIT_SPHERE, resolution=48, edge_voxels=edge)
    fld, _ = make_scene(spec, 7)
    r = np.linalg.norm(fld.voxel_centers()[fld.density > 0], axis=1)
    assert r.max() <= 1.0 + edge * fld.voxel_size[0] + 1e-12


def test_empty_spec_is_configuration_error():
    with pytest.raises(ConfigurationError):
        make_scene(SceneSpec(family="custom", primitives=()), 0)
    with pytest.raises(ConfigurationError):
        make_scene(SceneSpec(family="spheres", n_primitives=0), 0)
    with pytest.raises(ConfigurationError):
        make_scene(SceneSpec(resolution=4), 0)


def test_make_scene_is_deterministic():
    spec = SceneSpec(resolution=32, clutter=True)
    a, _ = make_scene(spec, 3)
    b, _ = make_scene(spec, 3)
    assert a.equals(b)
    c, _ = make_scene(spec, 4)
    assert not a.equals(c)


def test_field_invariants_enforced():
    d = np.ones((2, 2, 2))
    c = np.zeros((2, 2, 2, 3))
    box = [[0, 0, 0], [1, 1, 1]]
    with pytest.raises(ContractError):
        RadianceField(-d, c, box, (0, 0, 0))
    with pytest.raises(ContractError):
        RadianceField(d, c + 2, box, (0, 0, 0))
    with pytest.raises(ContractError):
        RadianceField(d, c, [[0, 0, 0], [1, 0, 1]], (0, 0, 0))


def test_oracle_sdf_of_posed_scene():
    pose = Transform(look_rotation([1.0, 0.2, 0.1]), [0.3, -0.2, 0.1])
    spec = SceneSpec(family="custom", primitives=UNIT_SPHERE, resolution=16)
    _, oracle = make_scene(spec, 0, pose=pose)
    # field point x sits at world point pose(x)
    x = np.array([[0.5, 0.1, -0.2]])
    assert oracle.sdf(x)[0] == pytest.approx(np.linalg.norm(pose.apply(x)) - 1.0)


# ---------------------------------------------------------------------------
# sample_field

def test_sample_at_voxel_center_returns_stored_values(rng):
    dens = rng.uniform(0, 5, size=(5, 6, 7))
    col = rng.uniform(0, 1, size=(5, 6, 7, 3))
    fld = RadianceField(dens, col, [[-1, -1, -1], [1, 2, 3]], (0.2, 0.3, 0.4))
    centers = fld.voxel_centers()
    s, c = sample_field(fld, centers)
    assert np.allclose(s, dens, atol=1e-12) and np.allclose(c, col, atol=1e-12)


def test_sample_outside_bounds_is_background():
    fld = RadianceField(np.ones((3, 3, 3)), np.ones((3, 3, 3, 3)) * 0.5, [[0] * 3, [1] * 3], (0.1, 0.2, 0.3))
    s, c = sample_field(fld, np.array([[1.5, 0.5, 0.5], [-0.01, 0.5, 0.5]]))
    assert np.all(s == 0) and np.allclose(c, [0.1, 0.2, 0.3])


def test_sample_midpoint_is_average():
    dens = np.zeros((2, 2, 2))
    dens[0], dens[1] = 2.0, 6.0
    fld = RadianceField(dens, np.zeros((2, 2, 2, 3)), [[0] * 3, [2] * 3], (0, 0, 0))
    s, _ = sample_field(fld, np.array([1.0, 0.5, 1.5]))
    assert s == pytest.approx(4.0)


# ---------------------------------------------------------------------------
# render_ray / render_image

def test_empty_field_renders_background():
    fld = line_field(lambda x: np.zeros_like(x))
    r = render_ray(fld, x_ray(), 64)
    assert np.allclose(r.rgb, fld.background) and r.opacity == 0.0 and not r.has_surface


def test_non_unit_direction_rejected():
    fld = line_field(lambda x: np.zeros_like(x))
    with pytest.raises(ContractError):
        render_ray(fld, Ray([0, 0, 0], [2.0, 0, 0]), 16)
    with pytest.raises(ContractError):
        render_ray(fld, x_ray(), 16, t_near=2.0, t_far=1.0)


@pytest.mark.parametrize("seed", range(5))
def test_opaque_slab_front_face_depth(seed):
    fld = line_field(lambda x: np.where(x >= 2.0, 1e4, 0.0))
    n = 128
    r = render_ray(fld, x_ray(), n, seed=seed, ray_id=seed)
    spacing = 4.0 / n
    assert abs(r.depth - 2.0) <= spacing


def _oracle_1d(ts, dts, sigma, color, bg):
    """Scalar quadrature with analytic per-sample alpha; mirrors the contract, not the kernel."""
    trans, ws, rgb = 1.0, [], np.zeros(3)
    for t, dt in zip(ts, dts):
        a = 1.0 - math.exp(-sigma(t) * dt)
        ws.append(trans * a)
        rgb += trans * a * color(t)
        trans *= 1.0 - a
    ws = np.array(ws)
    op = ws.sum()
    rgb += (1.0 - op) * np.asarray(bg)
    cum = np.cumsum(ws) / op
    return rgb, ts[np.argmax(cum >= 0.5)], op


def test_two_half_slabs_depth_at_rear_of_first():
    n = 100
    ts, dts = sample_positions(0.0, 4.0, n, jitter=False)
    inside1 = (ts > 1.0) & (ts < 1.5)
    # tune slab 1 so its quadrature weight is exactly one half; slab 2 is opaque
    sig1 = math.log(2.0) / dts[inside1].sum()

    def sigma(t):
        return np.where((t > 1.0) & (t < 1.5), sig1, np.where((t > 3.0) & (t < 3.5), 40.0, 0.0))

    fld = line_field(sigma)
    r = render_ray(fld, x_ray(), n, jitter=False)
    rgb, depth, op = _oracle_1d(ts, dts, sigma, lambda t: np.zeros(3), fld.background)
    assert r.depth == pytest.approx(depth)
    assert 1.0 <= r.depth <= 3.0
    assert abs(r.depth - 1.5) <= 4.0 / n + 1e-12
    assert r.weights[inside1].sum() == pytest.approx(0.5, abs=1e-9)
    assert r.opacity == pytest.approx(op, abs=1e-8)


def test_matches_scalar_oracle_with_jitter():
    def sigma(t):
        return np.where((t > 0.7) & (t < 2.9), 0.8 + 0.5 * np.sin(3 * t), 0.0)

    def color(t):
        t = np.asarray(t, float)
        return np.stack([0.5 + 0.4 * np.sin(t), 0.5 + 0.4 * np.cos(2 * t), 0.3 + 0.0 * t], -1)

    fld = line_field(sigma, color)
    for seed in range(3):
        r = render_ray(fld, x_ray(), 200, seed=seed, ray_id=7)
        ts, dts = sample_positions(0.0, 4.0, 200, seed, 7)
        rgb, depth, op = _oracle_1d(ts, dts, sigma, color, fld.background)
        assert np.allclose(r.rgb, rgb, atol=2e-3)
        assert r.opacity == pytest.approx(op, abs=2e-3)


def test_quadrature_converges_on_smooth_density():
    def sigma(x):
        return 1.5 * np.exp(-(x - 1.7) ** 2 / 0.08)

    c = np.array([0.8, 0.4, 0.1])
    fld = line_field(sigma, lambda x: np.tile(c, (len(x), 1)))
    tau = quad(sigma, 0.0, 4.0)[0]
    exact = c * (1 - math.exp(-tau)) + fld.background * math.exp(-tau)
    errs = [np.abs(render_ray(fld, x_ray(), n, jitter=False).rgb - exact).max() for n in (4, 8, 16, 32, 64)]
    assert all(b <= a or b < 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[0] > 1e-3 and errs[-1] < 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 64))
def test_weight_invariants(seed, n):
    rng = np.random.default_rng(seed)
    fld = RadianceField(rng.uniform(0, 30, (6, 6, 6)), rng.uniform(0, 1, (6, 6, 6, 3)),
                        [[-1] * 3, [1] * 3], (0, 0, 0))
    o = rng.normal(size=3) * 3
    d = -o / np.linalg.norm(o)
    r = render_ray(fld, Ray(o, d), n, seed=seed)
    assert np.all(r.weights >= 0)
    assert r.weights.sum() <= 1 + 1e-6
    assert r.weights.sum() == pytest.approx(r.opacity)
    if r.has_surface:
        assert r.t[0] - 1e-12 <= r.depth <= r.t[-1] + 1e-12


def test_render_image_one_pixel_equals_render_ray():
    fld, _ = make_scene(SceneSpec(resolution=24), 1)
    o = np.array([3.0, 0.5, 1.0])
    cam = Camera(Transform(look_rotation(-o), o), 10.0, 10.0, 0.5, 0.5, 1, 1)
    rgb, depth, op = render_image(fld, cam, 64, seed=5)
    r = render_ray(fld, cam.principal_ray(), 64, seed=5, ray_id=0)
    assert np.allclose(rgb[0, 0], r.rgb, atol=1e-14)
    assert depth[0, 0] == r.depth and op[0, 0] == r.opacity


def test_render_image_of_empty_field_is_constant_background():
    fld = line_field(lambda x: np.zeros_like(x), bg=(0.3, 0.6, 0.9))
    cam = Camera.from_fov(Transform(look_rotation([1.0, 0, 0]), [-1.0, 0, 0]), 6, 5, 40)
    rgb, depth, op = render_image(fld, cam, 16)
    assert np.allclose(rgb, [0.3, 0.6, 0.9]) and np.all(np.isnan(depth)) and np.all(op == 0)


def test_sphere_center_pixel_depth():
    spec = SceneSpec(family="custom", primitives=UNIT_SPHERE, resolution=128, edge_voxels=0.5,
                     sigma_max=100.0, shell_voxels=None)
    fld, _ = make_scene(spec, 0)
    o = np.array([0.0, 0.0, 3.0])
    cam = Camera.from_fov(Transform(look_rotation(-o), o), 9, 9, 30)
    n = 96
    _, depth, _ = render_image(fld, cam, n, seed=2)
    spacing = (5.0 - 1.0) / n
    assert abs(depth[4, 4] - 2.0) <= spacing


def test_render_image_is_deterministic():
    fld, _ = make_scene(SceneSpec(resolution=24), 2)
    cam = Camera.from_fov(Transform(look_rotation([-1.0, 0, -0.3]), [3.0, 0, 1.0]), 8, 8, 40)
    a = render_image(fld, cam, 32, seed=9)
    b = render_image(fld, cam, 32, seed=9)
    for x, y in zip(a, b):
        assert np.array_equal(x, y, equal_nan=True)


def test_render_rays_stratification_keyed_by_ray_id():
    fld = line_field(lambda x: np.where((x > 1.0) & (x < 3.0), 0.7, 0.0))
    o = np.zeros((2, 3))
    d = np.tile([1.0, 0, 0], (2, 1))
    same = render_rays(fld, o, d, 16, seed=1, ray_ids=[4, 4])
    diff = render_rays(fld, o, d, 16, seed=1, ray_ids=[4, 5])
    assert np.array_equal(same["rgb"][0], same["rgb"][1])
    assert not np.array_equal(diff["rgb"][0], diff["rgb"][1])

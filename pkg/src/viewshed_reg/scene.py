"""Procedural voxel-grid radiance fields and a volume renderer.

A :class:`RadianceField` stores per-voxel density and colour on a regular
grid; queries use trilinear interpolation between voxel centres. Scenes are
built from signed-distance primitives so every field ships with an exact
geometric oracle (:class:`SceneOracle`) for testing.

A field may be generated in a posed frame: ``make_scene(spec, seed, pose=W)``
stores at field coordinate ``x`` the world content found at ``W(x)``. Two
fields built from the same ``(spec, seed)`` with poses ``W_a`` and ``W_b``
are related by the ground-truth registration ``W_b^-1 @ W_a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import ConfigurationError, ContractError
from .lie import Transform, axis_rotation, look_rotation

OPACITY_FLOOR = 0.1
DEFAULT_SAMPLES = 192

FAMILIES = ("spheres", "boxes", "room", "sphere_room", "custom")
TEXTURES = ("sinusoid", "flat")


@dataclass(frozen=True)
class RigSpec:
    """Ring of capture cameras looking at the scene centre."""

    n_cameras: int = 24
    radius: float = 3.2
    elevation_deg: float = 30.0
    elevation_wobble_deg: float = 10.0
    fov_deg: float = 36.0
    image_size: int = 40


@dataclass(frozen=True)
class SceneSpec:
    family: str = "sphere_room"
    n_primitives: int = 4
    size_range: tuple = (0.15, 0.35)
    primitives: tuple = ()
    texture: str = "sinusoid"
    clutter: bool = False
    clutter_count: int = 80
    clutter_radius: tuple = (1.2, 1.6)
    clutter_density_frac: float = 0.4
    resolution: int = 128
    half_extent: float = 2.0
    sigma_max: float = 120.0
    shell_voxels: float | None = 4.0
    edge_voxels: float = 2.0
    content_radius: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)
    rig: RigSpec = field(default_factory=RigSpec)

    def validate(self):
        res = _as_resolution(self.resolution)
        if min(res) < 8:
            raise ConfigurationError(f"resolution must be >= 8 per axis, got {res}")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown scene family {self.family!r}; expected one of {FAMILIES}")
        if self.texture not in TEXTURES:
            raise ConfigurationError(f"unknown texture mode {self.texture!r}")
        if self.family == "custom" and not self.primitives:
            raise ConfigurationError("custom scene spec lists no primitives")
        if self.family in ("spheres", "boxes") and self.n_primitives < 1:
            raise ConfigurationError("scene spec requests zero primitives")
        if self.half_extent <= 0:
            raise ConfigurationError("half_extent must be positive")
        if self.sigma_max <= 0:
            raise ConfigurationError("sigma_max must be positive")
        if self.edge_voxels <= 0:
            raise ConfigurationError("edge_voxels must be positive")
        if len(self.background) != 3 or not all(0.0 <= c <= 1.0 for c in self.background):
            raise ConfigurationError("background must be an RGB triple in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("schema", None)
        d.pop("version", None)
        rig = RigSpec(**d.pop("rig", {}))
        for key in ("size_range", "clutter_radius", "background"):
            if key in d:
                d[key] = tuple(d[key])
        if "primitives" in d:
            d["primitives"] = tuple(dict(p) for p in d["primitives"])
        if isinstance(d.get("resolution"), list):
            d["resolution"] = tuple(d["resolution"])
        try:
            return cls(rig=rig, **d).validate()
        except TypeError as exc:
            raise ConfigurationError(f"bad scene spec: {exc}") from None

    def to_dict(self):
        from dataclasses import asdict

        d = asdict(self)
        d["primitives"] = [dict(p) for p in self.primitives]
        return {"schema": "scene-spec", "version": 1, **d}


def _as_resolution(res):
    if isinstance(res, (int, np.integer)):
        return (int(res),) * 3
    res = tuple(int(r) for r in res)
    if len(res) != 3:
        raise ConfigurationError(f"resolution must have 3 entries, got {res}")
    return res


@dataclass(frozen=True, eq=False)
class RadianceField:
    density: np.ndarray
    color: np.ndarray
    bounds: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        density = np.ascontiguousarray(self.density, dtype=np.float64)
        color = np.ascontiguousarray(self.color, dtype=np.float64)
        bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        bg = np.asarray(self.background, dtype=np.float64).reshape(3)
        if density.ndim != 3 or color.shape != density.shape + (3,):
            raise ContractError("density must be (nx,ny,nz) and color (nx,ny,nz,3)")
        if min(density.shape) < 2:
            raise ContractError("each grid axis needs at least 2 voxels")
        if not np.all(np.isfinite(density)) or density.min() < 0:
            raise ContractError("densities must be finite and non-negative")
        if color.min() < 0 or color.max() > 1:
            raise ContractError("colours must lie in [0, 1]")
        if np.any(bounds[1] - bounds[0] <= 0):
            raise ContractError("bounds need positive extent on every axis")
        for arr in (density, color, bounds, bg):
            arr.setflags(write=False)
        object.__setattr__(self, "density", density)
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "background", bg)

    @property
    def resolution(self):
        return self.density.shape

    @property
    def voxel_size(self):
        return (self.bounds[1] - self.bounds[0]) / np.array(self.density.shape)

    @property
    def voxel_diagonal(self):
        return float(np.linalg.norm(self.voxel_size))

    def voxel_centers(self):
        axes = [
            self.bounds[0, a] + (np.arange(n) + 0.5) * self.voxel_size[a]
            for a, n in enumerate(self.density.shape)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def equals(self, other):
        return (
            np.array_equal(self.density, other.density)
            and np.array_equal(self.color, other.color)
            and np.array_equal(self.bounds, other.bounds)
            and np.array_equal(self.background, other.background)
        )


# ---------------------------------------------------------------------------
# primitives and the geometric oracle


def _sdf_sphere(p, prim):
    return np.linalg.norm(p - np.asarray(prim["center"], float), axis=-1) - prim["radius"]


def _sdf_box(p, prim):
    R = axis_rotation(2, prim.get("yaw", 0.0))
    q = np.abs((p - np.asarray(prim["center"], float)) @ R) - np.asarray(prim["half_size"], float)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


_SDF = {"sphere": _sdf_sphere, "box": _sdf_box}


def _texture(p, prim):
    base = np.asarray(prim.get("color", (0.6, 0.6, 0.6)), float)
    out = np.broadcast_to(base, p.shape[:-1] + (3,)).copy()
    for wave in prim.get("waves", ()):
        k = np.asarray(wave["k"], float)
        phase = np.asarray(wave["phase"], float)
        out += wave["amp"] * np.sin((p @ k)[..., None] + phase)
    return np.clip(out, 0.0, 1.0)


def _smoothstep(x, w):
    t = np.clip((x + w) / (2.0 * w), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


class SceneOracle:
    """Exact geometry of the primitives, expressed in a field's coordinates."""

    def __init__(self, primitives, clutter, pose):
        self.primitives = list(primitives)
        self.clutter = list(clutter)
        self.pose = pose

    def _world(self, x):
        return self.pose.apply(np.asarray(x, float))

    def sdf(self, x):
        """Signed distance to the content surface (clutter excluded)."""
        pw = self._world(x)
        d = np.full(pw.shape[:-1], np.inf)
        for prim in self.primitives:
            d = np.minimum(d, _SDF[prim["type"]](pw, prim))
        return d / self.pose.scale

    def clutter_sdf(self, x):
        pw = self._world(x)
        d = np.full(pw.shape[:-1], np.inf)
        for prim in self.clutter:
            d = np.minimum(d, _SDF[prim["type"]](pw, prim))
        return d / self.pose.scale

    def first_hit(self, origins, dirs, t_max=20.0, tol=1e-7, max_steps=400):
        """Sphere-trace content surfaces. Returns hit distance or NaN per ray."""
        o = np.atleast_2d(np.asarray(origins, float))
        d = np.atleast_2d(np.asarray(dirs, float))
        t = np.zeros(len(o))
        alive = np.ones(len(o), bool)
        hit = np.zeros(len(o), bool)
        for _ in range(max_steps):
            if not alive.any():
                break
            idx = np.flatnonzero(alive)
            s = self.sdf(o[idx] + t[idx, None] * d[idx])
            done = s < tol
            hit[idx[done]] = True
            alive[idx[done]] = False
            t[idx[~done]] += s[~done]
            far = t > t_max
            alive &= ~far
        return np.where(hit, t, np.nan)


def _random_waves(rng, n_waves, wavelengths, amp):
    waves = []
    for lam in wavelengths[:n_waves]:
        k = rng.normal(size=3)
        k *= 2 * np.pi / lam / np.linalg.norm(k)
        waves.append({"k": k.tolist(), "phase": rng.uniform(0, 2 * np.pi, 3).tolist(), "amp": amp})
        amp *= 0.6
    return waves


def _decorate(prim, rng, texture):
    prim = dict(prim)
    prim.setdefault("color", rng.uniform(0.25, 0.75, 3).tolist())
    if texture == "sinusoid" and "waves" not in prim:
        prim["waves"] = _random_waves(rng, 2, [rng.uniform(0.7, 1.1), rng.uniform(0.3, 0.45)], 0.3)
    return prim


def _random_center(rng, radius):
    while True:
        c = rng.uniform(-radius, radius, 3)
        if np.linalg.norm(c) <= radius:
            return c


def build_primitives(spec, seed):
    """Expand a scene spec into the concrete primitive list (world frame)."""
    rng = np.random.default_rng([seed, 0x5CE7E])
    lo, hi = spec.size_range
    r = spec.content_radius
    prims = []
    if spec.family == "custom":
        return [_decorate(p, rng, spec.texture) for p in spec.primitives]
    if spec.family in ("room", "sphere_room"):
        floor_z = -0.55 * r
        prims.append({"type": "box", "center": [0.0, 0.0, floor_z - 0.05], "half_size": [0.85 * r, 0.85 * r, 0.05]})
        prims.append({"type": "box", "center": [0.0, 0.85 * r, floor_z + 0.4 * r], "half_size": [0.85 * r, 0.05, 0.4 * r]})
        prims.append({"type": "box", "center": [-0.85 * r, 0.1 * r, floor_z + 0.3 * r], "half_size": [0.05, 0.55 * r, 0.3 * r]})
    n = spec.n_primitives
    for i in range(n):
        kind = {"spheres": "sphere", "boxes": "box"}.get(spec.family, "sphere" if i % 2 == 0 else "box")
        size = rng.uniform(lo, hi)
        if spec.family in ("room", "sphere_room"):
            c = rng.uniform([-0.6 * r, -0.6 * r, -0.55 * r + size], [0.6 * r, 0.55 * r, 0.1 * r + size])
        else:
            c = _random_center(rng, r - size)
        if kind == "sphere":
            prims.append({"type": "sphere", "center": c.tolist(), "radius": float(size)})
        else:
            half = rng.uniform(0.6, 1.0, 3) * size
            prims.append({"type": "box", "center": c.tolist(), "half_size": half.tolist(), "yaw": float(rng.uniform(0, np.pi))})
    if not prims:
        raise ConfigurationError("scene spec produced zero primitives")
    return [_decorate(p, rng, spec.texture) for p in prims]


def capture_rig(rig, look_at=(0.0, 0.0, 0.0)):
    """World-frame training cameras on an elevated ring."""
    cams = []
    target = np.asarray(look_at, float)
    for i in range(rig.n_cameras):
        phi = 2 * np.pi * i / rig.n_cameras
        elev = np.radians(rig.elevation_deg + rig.elevation_wobble_deg * np.sin(2 * phi))
        pos = rig.radius * np.array([np.cos(elev) * np.cos(phi), np.cos(elev) * np.sin(phi), np.sin(elev)])
        R = look_rotation(target - pos)
        cams.append(Camera.from_fov(Transform(R, pos), rig.image_size, rig.image_size, rig.fov_deg))
    return cams


def _visible_in_any(points, radius, cameras):
    vis = np.zeros(len(points), bool)
    for cam in cameras:
        pc = cam.pose.inverse().apply(points)
        z = pc[:, 2]
        # conservative: inflate the frustum by the blob radius
        ok = z > -radius
        zz = np.maximum(z, 1e-6)
        u = cam.fx * pc[:, 0] / zz + cam.cx
        v = cam.fy * pc[:, 1] / zz + cam.cy
        margin_u = cam.fx * radius / zz
        margin_v = cam.fy * radius / zz
        inside = (u > -margin_u) & (u < cam.width + margin_u) & (v > -margin_v) & (v < cam.height + margin_v)
        vis |= ok & (inside | (z < radius))
    return vis


def build_clutter(spec, clutter_seed):
    """High-frequency floaters outside every capture frustum."""
    if not spec.clutter:
        return []
    rng = np.random.default_rng([clutter_seed, 0xC1077E5])
    rig_cams = capture_rig(spec.rig)
    r_in, r_out = spec.clutter_radius
    out = []
    for _ in range(200):
        n = 4 * spec.clutter_count
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rad = rng.uniform(r_in, r_out, n)
        centers = dirs * rad[:, None]
        sizes = rng.uniform(0.06, 0.14, n)
        ok = ~_visible_in_any(centers, sizes, rig_cams)
        for c, s in zip(centers[ok], sizes[ok]):
            out.append(
                {
                    "type": "sphere",
                    "center": c.tolist(),
                    "radius": float(s),
                    "color": rng.uniform(0, 1, 3).tolist(),
                    "waves": _random_waves(rng, 2, [0.07, 0.11], 0.45),
                }
            )
            if len(out) >= spec.clutter_count:
                return out
    return out


def make_scene(spec, seed, pose=None, clutter_seed=None):
    """Voxelise the procedural scene.

    Returns ``(field, oracle)``. ``pose`` maps field coordinates to world
    coordinates (default identity); ``clutter_seed`` selects the floater
    layout independently of the content (default ``seed``).
    """
    spec.validate()
    pose = pose or Transform.identity()
    res = _as_resolution(spec.resolution)
    prims = build_primitives(spec, seed)
    clutter = build_clutter(spec, seed if clutter_seed is None else clutter_seed)

    h = spec.half_extent
    bounds = np.array([[-h] * 3, [h] * 3], float)
    voxel = (bounds[1] - bounds[0]) / np.array(res)
    axes = [bounds[0, a] + (np.arange(res[a]) + 0.5) * voxel[a] for a in range(3)]
    density = np.zeros(res)
    color = np.zeros(res + (3,))
    s = pose.scale
    w = spec.edge_voxels * float(voxel.mean()) * s
    thick = None if spec.shell_voxels is None else float(spec.shell_voxels) * float(voxel.mean()) * s
    bg = np.asarray(spec.background, float)

    # slab-by-slab along x keeps peak memory modest at 128^3
    grid_yz = np.stack(np.meshgrid(axes[1], axes[2], indexing="ij"), axis=-1)
    for i, x in enumerate(axes[0]):
        p = np.concatenate([np.full(grid_yz.shape[:-1] + (1,), x), grid_yz], axis=-1)
        pw = pose.apply(p)
        best = np.full(pw.shape[:-1], np.inf)
        col = np.broadcast_to(bg, pw.shape).copy()
        sig = np.zeros(pw.shape[:-1])
        for prim in prims:
            d = _SDF[prim["type"]](pw, prim)
            closer = d < best
            best = np.where(closer, d, best)
            col[closer] = _texture(pw[closer], prim)
        if thick is None:
            sig = spec.sigma_max * _smoothstep(-best, w)
        else:
            sig = spec.sigma_max * _smoothstep(-best, w) * _smoothstep(best + thick, w)
        if clutter:
            cbest = np.full(pw.shape[:-1], np.inf)
            for prim in clutter:
                d = _SDF[prim["type"]](pw, prim)
                closer = (d < cbest) & (d < best)
                cbest = np.minimum(cbest, d)
                col[closer] = _texture(pw[closer], prim)
            sig = np.maximum(sig, spec.clutter_density_frac * spec.sigma_max * _smoothstep(-cbest, w))
        density[i] = sig * s
        color[i] = col
    if density.max() <= 0:
        raise ConfigurationError("scene has no occupied voxel inside the bounds")
    fld = RadianceField(density, color, bounds, bg)
    return fld, SceneOracle(prims, clutter, pose)


# ---------------------------------------------------------------------------
# queries and rendering


def sample_field(fld, x):
    """Trilinear ``(sigma, rgb)`` at points ``x`` of shape ``(..., 3)``.

    Points outside the bounds give ``(0, background)``.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    p = x.reshape(-1, 3)
    lo, hi = fld.bounds
    n = np.array(fld.density.shape)
    inside = np.all((p >= lo) & (p <= hi), axis=1)
    u = (p - lo) / fld.voxel_size - 0.5
    u = np.clip(u, 0.0, n - 1)
    i0 = np.minimum(np.floor(u).astype(int), n - 2)
    f = u - i0
    sigma = np.zeros(len(p))
    rgb = np.zeros((len(p), 3))
    for di in (0, 1):
        wx = f[:, 0] if di else 1 - f[:, 0]
        for dj in (0, 1):
            wy = f[:, 1] if dj else 1 - f[:, 1]
            for dk in (0, 1):
                wz = f[:, 2] if dk else 1 - f[:, 2]
                wgt = wx * wy * wz
                ii, jj, kk = i0[:, 0] + di, i0[:, 1] + dj, i0[:, 2] + dk
                sigma += wgt * fld.density[ii, jj, kk]
                rgb += wgt[:, None] * fld.color[ii, jj, kk]
    sigma = np.where(inside, sigma, 0.0)
    rgb = np.where(inside[:, None], rgb, fld.background)
    return sigma.reshape(shape), rgb.reshape(shape + (3,))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, float).reshape(3)
        d = np.asarray(self.direction, float).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class RenderResult:
    rgb: np.ndarray
    depth: float
    opacity: float
    weights: np.ndarray
    t: np.ndarray

    @property
    def has_surface(self):
        return bool(np.isfinite(self.depth))


def _check_dirs(dirs):
    norms = np.linalg.norm(dirs, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= 1e-9):
        raise ContractError("ray directions must be unit length (tolerance 1e-9)")


def ray_box_interval(fld, origins, dirs):
    """Entry/exit distances of rays through the field bounds (clamped at 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (fld.bounds[0] - origins) * inv
        t1 = (fld.bounds[1] - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    tmin = np.maximum(tmin, 0.0)
    tmax = np.where(tmax > tmin, tmax, tmin)
    return tmin, tmax


def _field_args(fld):
    lo, hi = fld.bounds
    return (
        fld.density,
        fld.color,
        np.ascontiguousarray(lo),
        np.ascontiguousarray(hi),
        1.0 / fld.voxel_size,
        fld.background,
    )


def render_rays(fld, origins, dirs, n_samples=DEFAULT_SAMPLES, t_near=None, t_far=None,
                seed=0, ray_ids=None, jitter=True, keep_weights=False,
                opacity_floor=OPACITY_FLOOR):
    """Batch renderer. Returns dict with ``rgb``, ``depth``, ``opacity`` (+ ``weights``).

    When ``t_near``/``t_far`` are omitted each ray is clipped to the field's
    bounding box. Stratification jitter is keyed by ``(seed, ray_id)``.
    """
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=float)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=float)
    _check_dirs(dirs)
    if n_samples < 2:
        raise ContractError("n_samples must be >= 2")
    n = len(origins)
    if t_near is None or t_far is None:
        bn, bf = ray_box_interval(fld, origins, dirs)
        t_near = bn if t_near is None else np.broadcast_to(np.asarray(t_near, float), (n,))
        t_far = bf if t_far is None else np.broadcast_to(np.asarray(t_far, float), (n,))
    t_near = np.ascontiguousarray(np.broadcast_to(np.asarray(t_near, float), (n,)))
    t_far = np.ascontiguousarray(np.broadcast_to(np.asarray(t_far, float), (n,)))
    if ray_ids is None:
        ray_ids = np.arange(n, dtype=np.int64)
    ray_ids = np.ascontiguousarray(ray_ids, dtype=np.int64)
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    opacity = np.empty(n)
    weights = np.empty((n if keep_weights else 0, n_samples))
    _kernels.render_rays(
        *_field_args(fld), origins, dirs, t_near, t_far, ray_ids, np.int64(seed),
        int(n_samples), bool(jitter), float(opacity_floor), rgb, depth, opacity, weights,
    )
    out = {"rgb": rgb, "depth": depth, "opacity": opacity}
    if keep_weights:
        out["weights"] = weights
    return out


def sample_positions(t_near, t_far, n_samples, seed=0, ray_id=0, jitter=True):
    ts = np.empty(n_samples)
    dts = np.empty(n_samples)
    _kernels.sample_times(float(t_near), float(t_far), int(n_samples), np.int64(seed),
                          np.int64(ray_id), bool(jitter), ts, dts)
    return ts, dts


def render_ray(fld, ray, n_samples=DEFAULT_SAMPLES, t_near=None, t_far=None, seed=0,
               ray_id=0, jitter=True, opacity_floor=OPACITY_FLOOR):
    """Render one ray; ``t_far > t_near >= 0`` when given explicitly."""
    if t_near is not None and t_far is not None and not (t_far > t_near >= 0):
        raise ContractError("need t_far > t_near >= 0")
    out = render_rays(fld, ray.origin[None], ray.direction[None], n_samples,
                      None if t_near is None else [t_near], None if t_far is None else [t_far],
                      seed=seed, ray_ids=[ray_id], jitter=jitter, keep_weights=True,
                      opacity_floor=opacity_floor)
    if t_near is None or t_far is None:
        tn, tf = ray_box_interval(fld, ray.origin[None], ray.direction[None])
        t_near, t_far = float(tn[0]), float(tf[0])
    ts, _ = sample_positions(t_near, t_far, n_samples, seed, ray_id, jitter)
    return RenderResult(out["rgb"][0], float(out["depth"][0]), float(out["opacity"][0]),
                        out["weights"][0], ts)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera; ``pose`` maps camera to world (x right, y down, z forward)."""

    pose: Transform
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, pose, width, height, fov_deg):
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(pose, f, f, width / 2.0, height / 2.0, int(width), int(height))

    @property
    def intrinsics(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @property
    def n_pixels(self):
        return self.width * self.height

    def with_pose(self, pose):
        return replace(self, pose=pose)

    def transformed(self, T):
        """Camera re-posed by a rigid transform acting on the world."""
        if abs(T.scale - 1.0) > 1e-12:
            raise ContractError("cameras can only be moved by rigid transforms")
        return self.with_pose(T @ self.pose)

    def pixel_rays(self, pixel_ids=None):
        """World-frame origins and unit directions through pixel centres."""
        if pixel_ids is None:
            pixel_ids = np.arange(self.n_pixels)
        pixel_ids = np.asarray(pixel_ids)
        u = pixel_ids % self.width + 0.5
        v = pixel_ids // self.width + 0.5
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(len(pixel_ids))], axis=1)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        dirs = self.pose.apply_directions(d)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.pose.translation, dirs.shape).copy()
        return origins, dirs

    def principal_ray(self):
        return Ray(self.pose.translation, self.pose.rotation[:, 2])


def render_image(fld, camera, n_samples=DEFAULT_SAMPLES, t_near=None, t_far=None, seed=0):
    """Render all pixels. Returns ``(rgb[h,w,3], depth[h,w], opacity[h,w])``."""
    origins, dirs = camera.pixel_rays()
    out = render_rays(fld, origins, dirs, n_samples, t_near, t_far, seed=seed)
    h, w = camera.height, camera.width
    return out["rgb"].reshape(h, w, 3), out["depth"].reshape(h, w), out["opacity"].reshape(h, w)

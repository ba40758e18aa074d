"""Viewshed fields: a flow density over oriented surface points.

Oriented points ``(x, d)`` are surface points seen along unit direction
``d`` by the capture cameras. A flow trained on them scores how well a
point was observed from a direction; sampling the flow proposes new
cameras that look at well-observed surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateError, GenerationError
from .flow import FlowTrainConfig, flow_inverse, log_prob, train_flow
from .lie import Transform, look_rotation
from .scene import OPACITY_FLOOR, Camera, render_image, render_rays

DEPTH_STRATEGIES = ("median", "refine")


@dataclass(frozen=True)
class OrientedPoint:
    x: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, float).reshape(3)
        d = np.asarray(self.d, float).reshape(3)
        if not np.all(np.isfinite(x)):
            raise ValueError("oriented point position must be finite")
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("oriented point direction must be unit length")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "d", d)

    def as_vector(self):
        return np.concatenate([self.x, self.d])


@dataclass(frozen=True)
class DepthStats:
    median: float
    mean: float
    std: float
    count: int


@dataclass(frozen=True)
class CollectionConfig:
    rays_per_camera: int = 1024
    n_samples: int = 128
    seed: int = 0
    noise_pct: float = 0.0


@dataclass(frozen=True)
class NovelViewConfig:
    n_candidates: int = 1024
    n_views: int = 16
    mask_threshold: float = 0.3
    depth_for_origin: str = "median"

    def validate(self):
        if self.n_views < 1 or self.n_views > self.n_candidates:
            raise ConfigurationError("need 1 <= n_views <= n_candidates")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ConfigurationError("mask_threshold must be a quantile in [0, 1]")
        if self.depth_for_origin not in DEPTH_STRATEGIES:
            raise ConfigurationError(f"depth_for_origin must be one of {DEPTH_STRATEGIES}")
        return self


@dataclass(frozen=True, eq=False)
class ViewshedMap:
    scores: np.ndarray
    valid: np.ndarray


def collect_oriented_points(fld, cameras, rays_per_camera=1024, seed=0, n_samples=128):
    """Median-depth surface points from random pixels of each camera.

    Returns ``(points[N, 6], DepthStats)``; rays whose opacity is below the
    floor are skipped.
    """
    if not cameras:
        raise ConfigurationError("need at least one camera")
    if rays_per_camera < 1:
        raise ConfigurationError("rays_per_camera must be >= 1")
    rng = np.random.default_rng([seed, 0x0A1E])
    pts, depths = [], []
    for ci, cam in enumerate(cameras):
        n = min(rays_per_camera, cam.n_pixels)
        pix = rng.choice(cam.n_pixels, size=n, replace=False)
        o, d = cam.pixel_rays(pix)
        out = render_rays(fld, o, d, n_samples, seed=seed + ci, ray_ids=pix)
        ok = np.isfinite(out["depth"])
        if not ok.any():
            continue
        dep = out["depth"][ok]
        pts.append(np.hstack([o[ok] + dep[:, None] * d[ok], d[ok]]))
        depths.append(dep)
    if not pts:
        raise DegenerateError("no ray reached the opacity floor in any camera")
    depths = np.concatenate(depths)
    stats = DepthStats(float(np.median(depths)), float(depths.mean()), float(depths.std()), len(depths))
    return np.vstack(pts), stats


def add_oriented_point_noise(points, pct_of_scene_size, rng):
    """Uniform position noise with half-width ``pct/100`` of the point-set diagonal."""
    if not 0.0 <= pct_of_scene_size <= 100.0:
        raise ConfigurationError("noise percentage must lie in [0, 100]")
    points = np.array(points, dtype=float)
    if pct_of_scene_size == 0.0:
        return points
    diag = float(np.linalg.norm(points[:, :3].max(axis=0) - points[:, :3].min(axis=0)))
    half = pct_of_scene_size / 100.0 * diag
    points[:, :3] += rng.uniform(-half, half, size=(len(points), 3))
    return points


def build_vf(fld, cameras, flow_config=None, collection=None):
    """Collect oriented points and fit the viewshed flow to them."""
    collection = collection or CollectionConfig()
    flow_config = flow_config or FlowTrainConfig()
    pts, stats = collect_oriented_points(fld, cameras, collection.rays_per_camera,
                                         collection.seed, collection.n_samples)
    if collection.noise_pct > 0:
        pts = add_oriented_point_noise(pts, collection.noise_pct,
                                       np.random.default_rng([collection.seed, 0x401CE]))
    if len(pts) < flow_config.batch_size:
        raise DegenerateError(f"only {len(pts)} oriented points collected")
    model = train_flow(pts, flow_config)
    model.info["n_points"] = len(pts)
    model.info["depth_stats"] = {"median": stats.median, "mean": stats.mean, "std": stats.std,
                                 "count": stats.count}
    return model, stats


def normalize_directions(points):
    p = np.array(points, dtype=float)
    p[:, 3:] /= np.linalg.norm(p[:, 3:], axis=1, keepdims=True)
    return p


def rank_candidates(vf, rng, n_candidates):
    """Draw latents, invert, renormalise directions, sort by log-prob (descending)."""
    z = rng.standard_normal((n_candidates, 6))
    pts = normalize_directions(flow_inverse(vf, z))
    with np.errstate(all="ignore"):
        lp = log_prob(vf, pts)
    order = np.argsort(-lp, kind="stable")
    return pts[order], lp[order]


def camera_looking_along(x, d, depth, intrinsics):
    """Camera whose principal ray passes through ``x`` at distance ``depth``."""
    d = np.asarray(d, float) / np.linalg.norm(d)
    origin = np.asarray(x, float) - depth * d
    pose = Transform(look_rotation(d), origin)
    k = intrinsics.intrinsics if isinstance(intrinsics, Camera) else intrinsics
    return Camera(pose, k["fx"], k["fy"], k["cx"], k["cy"], int(k["width"]), int(k["height"]))


def generate_novel_views(vf, depth_stats, cfg, intrinsics, rng, fld=None, n_samples=128,
                         return_scores=False):
    """Top-``n_views`` cameras proposed by the viewshed flow.

    Origins follow ``o = x - depth * d`` with ``depth`` the median training
    depth. With ``depth_for_origin='refine'`` the principal ray is cast once
    from that provisional origin against ``fld`` and the origin is re-placed
    at the rendered depth.
    """
    cfg.validate()
    pts, lp = rank_candidates(vf, rng, cfg.n_candidates)
    finite = np.isfinite(lp) & np.all(np.isfinite(pts), axis=1)
    if finite.sum() < cfg.n_views:
        raise GenerationError(f"only {int(finite.sum())} finite candidates for {cfg.n_views} views")
    pts, lp = pts[finite][: cfg.n_views], lp[finite][: cfg.n_views]
    cams = []
    for p in pts:
        depth = depth_stats.median
        if cfg.depth_for_origin == "refine":
            if fld is None:
                raise ConfigurationError("refine strategy needs the radiance field")
            provisional = p[:3] - depth * p[3:]
            out = render_rays(fld, provisional[None], p[None, 3:], n_samples)
            hit = out["depth"][0]
            if np.isfinite(hit):
                # the rendered surface sits `hit` along d from the provisional origin
                depth = depth - hit + depth_stats.median
                depth = max(depth, 0.1 * depth_stats.median)
        cams.append(camera_looking_along(p[:3], p[3:], depth, intrinsics))
    return (cams, lp, pts) if return_scores else cams


@dataclass(frozen=True, eq=False)
class View:
    """A rendered camera with its viewshed map (one novel view of a scene)."""

    camera: Camera
    rgb: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    vmap: ViewshedMap
    seed: int
    n_samples: int
    bounds: np.ndarray | None = None

    def mask(self, quantile):
        return vf_mask(self.vmap, quantile)

    def surface_points(self):
        """Oriented points ``(x, d)`` of all valid pixels, shape (h*w, 6) with NaN rows."""
        o, d = self.camera.pixel_rays()
        x = o + self.depth.reshape(-1, 1) * d
        return np.hstack([x, d])


def render_viewshed_map(vf, fld, camera, n_samples=128, seed=0, return_view=False):
    rgb, depth, opacity = render_image(fld, camera, n_samples, seed=seed)
    valid = np.isfinite(depth)
    scores = np.full(depth.shape, -np.inf)
    if valid.any():
        o, d = camera.pixel_rays()
        flat = valid.ravel()
        x = o[flat] + depth.ravel()[flat, None] * d[flat]
        s = log_prob(vf, np.hstack([x, d[flat]]))
        scores.ravel()[flat] = s
        valid.ravel()[flat] &= np.isfinite(s)
    vmap = ViewshedMap(scores, valid)
    if return_view:
        return View(camera, rgb, depth, opacity, vmap, seed, n_samples, np.array(fld.bounds))
    return vmap


def vf_mask(vmap, threshold_quantile):
    """Pixels that are valid and score at or above the per-image quantile."""
    if not 0.0 <= threshold_quantile <= 1.0:
        raise ConfigurationError("threshold quantile must be in [0, 1]")
    if not vmap.valid.any():
        return np.zeros_like(vmap.valid)
    thr = np.quantile(vmap.scores[vmap.valid], threshold_quantile)
    return vmap.valid & (vmap.scores >= thr)

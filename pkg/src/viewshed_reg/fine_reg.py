"""Photometric refinement of an SE(3) / Sim(3) transform over masked novel views.

Source rays (from views of scene A) are mapped into scene B by the current
transform and rendered against B's field. The mean squared RGB error is
minimised by plain gradient descent with left-multiplicative updates
``T <- exp(-lr * g) @ T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigurationError, DegenerateError, DivergenceError
from .lie import Transform, rotation_angle, se3_exp, se3_log
from .scene import _field_args

__all__ = [
    "Se3Params", "RayBatch", "RayPool", "FineRegConfig", "se3_exp", "se3_log",
    "sample_ray_batch", "photometric_loss", "loss_gradient", "register_fine",
]

GRADIENT_MODES = ("analytic", "finite-difference")
FD_STEP = 1e-4


@dataclass(frozen=True)
class Se3Params:
    """Exponential coordinates ``(omega, v)`` plus an optional log-scale."""

    xi: np.ndarray
    log_scale: float | None = None

    def __post_init__(self):
        xi = np.asarray(self.xi, float).reshape(6)
        if not np.all(np.isfinite(xi)):
            raise ConfigurationError("xi must be finite")
        object.__setattr__(self, "xi", xi)

    @classmethod
    def from_transform(cls, T, with_scale=False):
        v = se3_log(T, with_scale=with_scale)
        return cls(v[:6], float(v[6]) if with_scale else None)

    def vector(self):
        return self.xi if self.log_scale is None else np.append(self.xi, self.log_scale)

    def to_transform(self):
        return se3_exp(self.vector())


def _as_transform(T):
    if isinstance(T, Transform):
        return T
    if isinstance(T, Se3Params):
        return T.to_transform()
    return se3_exp(np.asarray(T, float))


@dataclass(frozen=True, eq=False)
class RayBatch:
    """Source rays with their targets and the stratification keys used to render them."""

    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    ray_ids: np.ndarray
    seeds: np.ndarray
    targets: np.ndarray
    view_ids: np.ndarray
    n_samples: int

    def __len__(self):
        return len(self.origins)


class RayPool:
    """All candidate rays of a view set, precomputed once; batches index into it."""

    def __init__(self, views, mask_quantile=0.3, use_mask=True, fallback_bounds=None):
        if not views:
            raise DegenerateError("no views given")
        ns = {v.n_samples for v in views}
        if len(ns) != 1:
            raise ConfigurationError("all views must share the same sample count")
        self.n_samples = ns.pop()
        parts = {k: [] for k in ("o", "d", "tn", "tf", "rid", "seed", "rgb", "vid")}
        for vi, view in enumerate(views):
            if use_mask:
                keep = view.mask(mask_quantile).ravel()
            else:
                keep = np.ones(view.camera.n_pixels, bool)
            pix = np.flatnonzero(keep)
            if len(pix) == 0:
                continue
            o, d = view.camera.pixel_rays(pix)
            bounds = view.bounds if view.bounds is not None else fallback_bounds
            if bounds is None:
                raise ConfigurationError("view lacks source bounds and no fallback was given")
            tn, tf = _box_interval(np.asarray(bounds, float), o, d)
            parts["o"].append(o)
            parts["d"].append(d)
            parts["tn"].append(tn)
            parts["tf"].append(tf)
            parts["rid"].append(pix.astype(np.int64))
            parts["seed"].append(np.full(len(pix), view.seed, np.int64))
            parts["rgb"].append(view.rgb.reshape(-1, 3)[pix])
            parts["vid"].append(np.full(len(pix), vi, np.int64))
        if not parts["o"]:
            raise DegenerateError("the union of view masks is empty")
        cat = {k: np.ascontiguousarray(np.concatenate(v)) for k, v in parts.items()}
        self.origins, self.dirs = cat["o"], cat["d"]
        self.t_near, self.t_far = cat["tn"], cat["tf"]
        self.ray_ids, self.seeds = cat["rid"], cat["seed"]
        self.targets, self.view_ids = cat["rgb"].astype(float), cat["vid"]
        self.n_views = len(views)

    def __len__(self):
        return len(self.origins)

    def take(self, idx):
        return RayBatch(self.origins[idx], self.dirs[idx], self.t_near[idx], self.t_far[idx],
                        self.ray_ids[idx], self.seeds[idx], self.targets[idx], self.view_ids[idx],
                        self.n_samples)

    def sample(self, n, rng):
        """``n`` rays drawn uniformly over the pool."""
        return self.take(rng.integers(0, len(self), size=n))


def _box_interval(bounds, origins, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bounds[0] - origins) * inv
        t1 = (bounds[1] - origins) * inv
    tmin = np.maximum(np.nanmax(np.minimum(t0, t1), axis=1), 0.0)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    return tmin, np.where(tmax > tmin, tmax, tmin)


def sample_ray_batch(views, n, rng, mask_quantile=0.3, use_mask=True):
    """``n`` rays drawn uniformly over the union of the views' masked pixels."""
    return RayPool(views, mask_quantile, use_mask).sample(n, rng)


def _terms(T, batch, fld, want_grad):
    n = len(batch)
    rgb = np.empty((n, 3))
    sq = np.empty(n)
    grad = np.empty((n, 7))
    _kernels.photometric_terms(
        *_field_args(fld),
        np.ascontiguousarray(T.rotation), np.ascontiguousarray(T.translation), float(T.scale),
        batch.origins, batch.dirs, batch.t_near, batch.t_far, batch.ray_ids, batch.seeds,
        int(batch.n_samples), True, batch.targets, bool(want_grad), rgb, sq, grad,
    )
    return rgb, sq, grad


def photometric_loss(T, batch, field_b):
    """Mean squared RGB error over rays and channels."""
    if len(batch) == 0:
        raise DegenerateError("empty ray batch")
    _, sq, _ = _terms(_as_transform(T), batch, field_b, False)
    return float(sq.sum() / (3 * len(batch)))


def loss_gradient(T, batch, field_b, mode="analytic", with_scale=False, h=FD_STEP):
    """Gradient of the loss w.r.t. a left perturbation ``exp(delta) @ T``.

    Returns 6 entries ``(omega, v)``, or 7 with ``with_scale`` (log-scale last).
    """
    if len(batch) == 0:
        raise DegenerateError("empty ray batch")
    T = _as_transform(T)
    k = 7 if with_scale else 6
    if mode == "analytic":
        _, _, g = _terms(T, batch, field_b, True)
        return g.sum(axis=0)[:k] / (3 * len(batch))
    if mode != "finite-difference":
        raise ConfigurationError(f"gradient mode must be one of {GRADIENT_MODES}")
    out = np.empty(k)
    for i in range(k):
        e = np.zeros(7)
        e[i] = h
        lp = photometric_loss(se3_exp(e) @ T, batch, field_b)
        lm = photometric_loss(se3_exp(-e) @ T, batch, field_b)
        out[i] = (lp - lm) / (2 * h)
    return out


@dataclass(frozen=True)
class FineRegConfig:
    n_iterations: int = 2000
    rays_per_iter: int = 2048
    learning_rate: float = 5e-3
    # lr shrinks by this factor over the whole run: lr_k = lr * decay**(k / n)
    lr_decay: float = 0.1
    gradient_mode: str = "analytic"
    seed: int = 0
    mask_quantile: float = 0.3
    use_mask: bool = True
    single_image: bool = False
    estimate_scale: bool = False
    # per-block step multipliers for (rotation, translation, log-scale)
    block_scale: tuple = (1.0, 1.0, 1.0)
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def validate(self):
        if self.n_iterations < 0:
            raise ConfigurationError("n_iterations must be >= 0")
        if self.rays_per_iter < 1:
            raise ConfigurationError("rays_per_iter must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigurationError("lr_decay must lie in (0, 1]")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigurationError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if not 0.0 <= self.mask_quantile <= 1.0:
            raise ConfigurationError("mask_quantile must lie in [0, 1]")
        return self


def register_fine(views_a, field_b, T0, config=None, T_gt=None, pool=None):
    """Gradient descent on the masked photometric loss, starting from ``T0``.

    Returns ``(T_best, history)`` where ``history`` holds per-iteration
    ``loss`` and ``lr`` (and ``rot_err_deg`` / ``trans_err_x100`` when
    ``T_gt`` is given). The best-loss iterate is returned.
    """
    cfg = (config or FineRegConfig()).validate()
    T = _as_transform(T0)
    if not (np.all(np.isfinite(T.rotation)) and np.all(np.isfinite(T.translation))):
        raise ConfigurationError("T0 must be finite")
    if pool is None:
        # the single-image ablation optimises against the top-ranked view alone
        views = list(views_a)[:1] if cfg.single_image else views_a
        pool = RayPool(views, cfg.mask_quantile, cfg.use_mask, fallback_bounds=field_b.bounds)
    rng = np.random.default_rng([cfg.seed, 0xF1E])
    k = 7 if cfg.estimate_scale else 6
    step_w = np.repeat(np.asarray(cfg.block_scale, float), 3)[:k]

    hist = {"loss": [], "lr": []}
    if T_gt is not None:
        hist["rot_err_deg"], hist["trans_err_x100"] = [], []
    best_T, best_loss, best_it = T, math.inf, 0
    initial = None
    over = 0
    for it in range(cfg.n_iterations):
        batch = pool.sample(cfg.rays_per_iter, rng)
        if cfg.gradient_mode == "analytic":
            _, sq, g = _terms(T, batch, field_b, True)
            loss = float(sq.sum() / (3 * len(batch)))
            grad = g.sum(axis=0)[:k] / (3 * len(batch))
        else:
            loss = photometric_loss(T, batch, field_b)
            grad = loss_gradient(T, batch, field_b, "finite-difference", cfg.estimate_scale)
        lr = cfg.learning_rate * cfg.lr_decay ** (it / max(cfg.n_iterations, 1))
        hist["loss"].append(loss)
        hist["lr"].append(lr)
        if T_gt is not None:
            hist["rot_err_deg"].append(math.degrees(rotation_angle(T.rotation @ T_gt.rotation.T)))
            hist["trans_err_x100"].append(100.0 * float(np.linalg.norm(T.translation - T_gt.translation)))
        if initial is None:
            initial = loss
        if not math.isfinite(loss):
            raise DivergenceError("loss became non-finite", best=best_T, history=_finish(hist))
        if loss < best_loss:
            best_T, best_loss, best_it = T, loss, it
        over = over + 1 if loss > cfg.divergence_factor * initial else 0
        if over >= cfg.divergence_patience:
            raise DivergenceError(f"loss above {cfg.divergence_factor}x initial for "
                                  f"{cfg.divergence_patience} iterations", best=best_T,
                                  history=_finish(hist))
        delta = np.zeros(7)
        delta[:k] = -lr * step_w * grad
        T = se3_exp(delta) @ T
    hist = _finish(hist)
    hist["best_iteration"] = best_it
    return best_T, hist


def _finish(hist):
    return {k: np.asarray(v) for k, v in hist.items()}

"""Experiment protocol: scene pairs, overlap splits, pipeline stages, metrics, ablations.

A run builds two voxel fields of one procedural scene: scene B in the world
frame and scene A in a frame related to it by a random ground-truth map
``T_gt`` (A -> B). Each scene gets its own capture cameras (an overlap split
of one rig), its own viewshed flow, and its own floater clutter. The
pipeline then estimates ``T_gt`` from A's novel views and B's field.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .coarse_reg import (PointCloudInitConfig, TransformPrior, draw_transform, photometric_init,
                         pointcloud_init)
from .errors import ConfigurationError, DivergenceError, StageError, ViewshedRegError
from .fine_reg import FineRegConfig, RayPool, photometric_loss, register_fine
from .flow import FlowTrainConfig
from .io_core import RunManifest, derive_seed, save_transform, seeded_rng, transform_to_dict, write_json
from .lie import Transform, axis_rotation, rotation_angle
from .pointcloud import extract_point_cloud
from .scene import Camera, SceneSpec, capture_rig, make_scene
from .viewshed import (CollectionConfig, NovelViewConfig, build_vf, generate_novel_views,
                       render_viewshed_map)

log = logging.getLogger(__name__)

OVERLAP_MODES = ("full", "partial", "none")
INIT_MODES = ("pc", "photo", "identity", "gt", "given")
SYMMETRY_TOLERANCE = 0.05


# ---------------------------------------------------------------------------
# protocol pieces

def draw_gt_transform(prior, rng):
    """Ground-truth map: per-axis rotations composed in XYZ order plus a uniform translation."""
    return draw_transform(prior, rng)


def split_cameras(cameras, mode):
    """Split a capture sequence into the cameras of scene A and scene B.

    ``full``: even / odd frames. ``partial``: even frames of the first 70%
    and odd frames of the last 70%. ``none``: first half / second half.
    Returns two lists of indices.
    """
    n = len(cameras)
    if n < 4:
        raise ConfigurationError(f"need at least 4 cameras to split, got {n}")
    idx = np.arange(n)
    if mode == "full":
        a, b = idx[0::2], idx[1::2]
    elif mode == "partial":
        k = int(round(0.7 * n))
        a = idx[:k][idx[:k] % 2 == 0]
        b = idx[n - k:][idx[n - k:] % 2 == 1]
    elif mode == "none":
        a, b = idx[: n // 2], idx[n // 2:]
    else:
        raise ConfigurationError(f"overlap mode must be one of {OVERLAP_MODES}")
    return a.tolist(), b.tolist()


def registration_errors(T_hat, T_gt):
    """``(rotation error deg, translation error x100, relative scale error)``."""
    dR = math.degrees(rotation_angle(T_hat.rotation @ T_gt.rotation.T))
    dt = 100.0 * float(np.linalg.norm(T_hat.translation - T_gt.translation))
    ds = abs(T_hat.scale / T_gt.scale - 1.0)
    return dR, dt, ds


def camera_in_frame(cam, T):
    """Re-express a camera through a similarity map (positions mapped, axes rotated)."""
    pose = Transform(T.rotation @ cam.pose.rotation, T.apply(cam.pose.translation))
    return cam.with_pose(pose)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class Ablations:
    no_init: bool = False
    no_mask: bool = False
    single_image: bool = False
    noise_pct: float = 0.0

    def validate(self):
        if not 0.0 <= self.noise_pct <= 100.0:
            raise ConfigurationError("noise_pct must lie in [0, 100]")
        return self


@dataclass(frozen=True)
class ViewConfig:
    """Novel-view generation and rendering for scene A."""

    n_candidates: int = 64
    n_views: int = 12
    n_holdout: int = 4
    mask_quantile: float = 0.5
    width: int = 48
    height: int = 48
    fov_deg: float = 60.0
    n_samples: int = 96


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=lambda: SceneSpec(resolution=80))
    seed: int = 0
    overlap: str = "full"
    prior: TransformPrior = field(default_factory=TransformPrior)
    gt_scale: float = 1.0
    init: str = "pc"
    fine: bool = True
    ablations: Ablations = field(default_factory=Ablations)
    flow: FlowTrainConfig = field(default_factory=lambda: FlowTrainConfig(
        learning_rate=1e-3, n_iterations=1500, hidden=64, batch_size=256))
    collection: CollectionConfig = field(default_factory=lambda: CollectionConfig(rays_per_camera=512))
    views: ViewConfig = field(default_factory=ViewConfig)
    pc: PointCloudInitConfig = field(default_factory=lambda: PointCloudInitConfig(voxel=0.06))
    pc_samples: int = 100_000
    photo_candidates: int = 25
    fine_cfg: FineRegConfig = field(default_factory=lambda: FineRegConfig(
        n_iterations=150, rays_per_iter=1024, learning_rate=0.08, lr_decay=0.1))
    repeats: int = 1
    out_dir: str | None = None
    render_figures: bool = True

    def validate(self):
        self.scene.validate()
        self.prior.validate()
        self.ablations.validate()
        self.flow.validate()
        self.fine_cfg.validate()
        if self.overlap not in OVERLAP_MODES:
            raise ConfigurationError(f"overlap must be one of {OVERLAP_MODES}")
        if self.init not in INIT_MODES:
            raise ConfigurationError(f"init must be one of {INIT_MODES}")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        if not self.gt_scale > 0:
            raise ConfigurationError("gt_scale must be positive")
        if self.views.n_views < 1 or self.views.n_holdout < 0:
            raise ConfigurationError("need n_views >= 1 and n_holdout >= 0")
        if self.views.n_views + self.views.n_holdout > self.views.n_candidates:
            raise ConfigurationError("n_views + n_holdout exceeds n_candidates")
        return self

    def to_dict(self):
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        return {"schema": "experiment", "version": 1, **d}

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(dict(d))
        d.pop("schema", None)
        d.pop("version", None)
        sub = {"prior": TransformPrior, "ablations": Ablations, "flow": FlowTrainConfig,
               "collection": CollectionConfig, "views": ViewConfig, "pc": PointCloudInitConfig,
               "fine_cfg": FineRegConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment keys: {sorted(unknown)}")
        kw = {}
        try:
            if "scene" in d:
                kw["scene"] = SceneSpec.from_dict(d.pop("scene"))
            for key, typ in sub.items():
                if key in d:
                    val = d.pop(key)
                    val = {k: tuple(v) if isinstance(v, list) else v for k, v in val.items()}
                    kw[key] = typ(**val)
            kw.update(d)
            return cls(**kw).validate()
        except TypeError as exc:
            raise ConfigurationError(f"bad experiment config: {exc}") from None


# ---------------------------------------------------------------------------
# report

@dataclass
class RegistrationReport:
    rot_err_deg: float
    trans_err_x100: float
    scale_err: float
    coarse_rot_err_deg: float
    coarse_trans_err_x100: float
    T_hat: Transform
    T_gt: Transform
    T0: Transform
    seed: int
    overlap: str
    variant: str = "full"
    symmetry_suspect: bool = False
    holdout_psnr: float = float("nan")
    final_loss: float = float("nan")
    coarse_info: dict = field(default_factory=dict)
    stage_seconds: dict = field(default_factory=dict)
    wall_time: float = 0.0
    history: dict = field(default_factory=dict)
    repeat: int = 0
    failure: str | None = None

    def success(self, rot_deg=0.5, trans_x100=0.5):
        return self.failure is None and self.rot_err_deg < rot_deg and self.trans_err_x100 < trans_x100

    def to_dict(self, with_timing=True):
        d = {
            "rot_err_deg": self.rot_err_deg, "trans_err_x100": self.trans_err_x100,
            "scale_err": self.scale_err, "coarse_rot_err_deg": self.coarse_rot_err_deg,
            "coarse_trans_err_x100": self.coarse_trans_err_x100,
            "T_hat": transform_to_dict(self.T_hat), "T_gt": transform_to_dict(self.T_gt),
            "T0": transform_to_dict(self.T0), "seed": self.seed, "overlap": self.overlap,
            "variant": self.variant, "symmetry_suspect": self.symmetry_suspect,
            "holdout_psnr": self.holdout_psnr, "final_loss": self.final_loss,
            "coarse_info": self.coarse_info, "repeat": self.repeat, "failure": self.failure,
        }
        if with_timing:
            d["timing"] = {"wall_time": self.wall_time, "stages": self.stage_seconds}
        return d


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class PreparedPair:
    """Everything up to (and including) novel views; shared by ablation variants."""

    config: ExperimentConfig
    T_gt: Transform
    field_a: object
    field_b: object
    oracle_a: object
    oracle_b: object
    cams_a: list
    cams_b: list
    vf_a: object
    vf_b: object
    stats_a: object
    stats_b: object
    views: list
    holdout: list
    timings: dict


def _timed(timings, name, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        return fn(*args, **kw)
    except ViewshedRegError as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def prepare_pair(config, T_gt=None):
    """Build both scenes, train both viewshed flows and render A's novel views."""
    cfg = config.validate()
    seed = cfg.seed
    timings = {}
    if T_gt is None:
        T_gt = draw_gt_transform(cfg.prior, seeded_rng(seed, "gt-transform"))
        if cfg.gt_scale != 1.0:
            T_gt = Transform(T_gt.rotation, T_gt.translation, cfg.gt_scale)
    clutter_a = derive_seed(seed, "clutter-a")
    clutter_b = derive_seed(seed, "clutter-b")
    field_b, oracle_b = _timed(timings, "scene", make_scene, cfg.scene, seed, None, clutter_b)
    field_a, oracle_a = _timed(timings, "scene", make_scene, cfg.scene, seed, T_gt, clutter_a)

    rig = capture_rig(cfg.scene.rig)
    ia, ib = split_cameras(rig, cfg.overlap)
    to_a = T_gt.inverse()
    cams_a = [camera_in_frame(rig[i], to_a) for i in ia]
    cams_b = [rig[i] for i in ib]

    noise = cfg.ablations.noise_pct
    col_a = replace(cfg.collection, seed=derive_seed(seed, "collect-a"), noise_pct=noise)
    col_b = replace(cfg.collection, seed=derive_seed(seed, "collect-b"), noise_pct=noise)
    flow_a = replace(cfg.flow, seed=derive_seed(seed, "flow-a"))
    flow_b = replace(cfg.flow, seed=derive_seed(seed, "flow-b"))
    vf_a, stats_a = _timed(timings, "vf_train", build_vf, field_a, cams_a, flow_a, col_a)
    vf_b, stats_b = _timed(timings, "vf_train", build_vf, field_b, cams_b, flow_b, col_b)

    vc = cfg.views
    template = Camera.from_fov(Transform.identity(), vc.width, vc.height, vc.fov_deg)
    nv_cfg = NovelViewConfig(n_candidates=vc.n_candidates, n_views=vc.n_views + vc.n_holdout,
                             mask_threshold=vc.mask_quantile)
    cams = _timed(timings, "novel_views", generate_novel_views, vf_a, stats_a, nv_cfg, template,
                  seeded_rng(seed, "novel-views"))
    view_seed = derive_seed(seed, "view-render")
    rendered = []
    for i, cam in enumerate(cams):
        rendered.append(_timed(timings, "novel_views", render_viewshed_map, vf_a, field_a, cam,
                               vc.n_samples, view_seed + i, True))
    # holdout views interleave with the training views so both span the ranking
    step = max(1, len(rendered) // vc.n_holdout) if vc.n_holdout else 0
    hold_idx = set(range(step - 1, len(rendered), step)[: vc.n_holdout]) if vc.n_holdout else set()
    views = [v for i, v in enumerate(rendered) if i not in hold_idx]
    holdout = [v for i, v in enumerate(rendered) if i in hold_idx]
    return PreparedPair(cfg, T_gt, field_a, field_b, oracle_a, oracle_b, cams_a, cams_b,
                        vf_a, vf_b, stats_a, stats_b, views, holdout, timings)


def coarse_estimate(pair, init=None, rng=None):
    """Initial transform from the configured init route. Returns ``(T0, info)``."""
    cfg = pair.config
    init = init or cfg.init
    timings = pair.timings
    rng = rng or seeded_rng(cfg.seed, "coarse")
    if init == "identity":
        return Transform.identity(), {}
    if init == "gt":
        return pair.T_gt, {}
    if init == "pc":
        ca = _timed(timings, "point_cloud", extract_point_cloud, pair.vf_a, pair.field_a, cfg.pc_samples,
                    None, seeded_rng(cfg.seed, "pc-a"))
        cb = _timed(timings, "point_cloud", extract_point_cloud, pair.vf_b, pair.field_b, cfg.pc_samples,
                    None, seeded_rng(cfg.seed, "pc-b"))
        T0, info = _timed(timings, "coarse", pointcloud_init, ca, cb, cfg.pc, rng)
        info.update({"n_points_a": len(ca), "n_points_b": len(cb)})
        return T0, info
    if init == "photo":
        T0 = _timed(timings, "coarse", photometric_init, pair.views, pair.vf_b, cfg.photo_candidates, rng,
                    None, cfg.prior, "median", 256, cfg.views.mask_quantile)
        return T0, {}
    raise ConfigurationError(f"init mode {init!r} needs an explicit transform")


def holdout_psnr(pair, T, n_rays=4096):
    """PSNR of held-out source views re-rendered through ``T`` in scene B."""
    views = pair.holdout or pair.views
    pool = RayPool(views, pair.config.views.mask_quantile, True, fallback_bounds=pair.field_b.bounds)
    idx = np.linspace(0, len(pool) - 1, min(n_rays, len(pool))).astype(int)
    mse = photometric_loss(T, pool.take(idx), pair.field_b)
    return float(-10.0 * math.log10(max(mse, 1e-12)))


def symmetry_suspect(pair, T, n_rays=4096):
    """True when a 180-degree yaw of the estimate scores within tolerance of it."""
    pool = RayPool(pair.views, pair.config.views.mask_quantile, True, fallback_bounds=pair.field_b.bounds)
    idx = np.linspace(0, len(pool) - 1, min(n_rays, len(pool))).astype(int)
    batch = pool.take(idx)
    flip = Transform(axis_rotation([0, 0, 1], math.pi), np.zeros(3)) @ T
    a = photometric_loss(T, batch, pair.field_b)
    b = photometric_loss(flip, batch, pair.field_b)
    return bool(abs(b - a) < SYMMETRY_TOLERANCE * max(a, b, 1e-12))


def finish_pair(pair, variant="full", T0=None, coarse_info=None, repeat=0):
    """Fine registration (per the config's ablation flags) and metrics."""
    cfg = pair.config
    abl = cfg.ablations
    t_start = time.perf_counter()
    stage = {}
    if T0 is None:
        if abl.no_init:
            T0, coarse_info = Transform.identity(), {}
        else:
            try:
                T0, coarse_info = coarse_estimate(pair, rng=seeded_rng(cfg.seed, f"coarse-{repeat}"))
            except StageError as exc:
                # a failed coarse stage leaves fine registration to start from identity
                T0, coarse_info = Transform.identity(), {"failure": str(exc)}
    coarse_info = dict(coarse_info or {})
    c_rot, c_trans, _ = registration_errors(T0, pair.T_gt)
    history = {}
    failure = None
    T_hat = T0
    if cfg.fine:
        fcfg = replace(cfg.fine_cfg, use_mask=not abl.no_mask, single_image=abl.single_image,
                       seed=derive_seed(cfg.seed, f"fine-{repeat}"),
                       mask_quantile=cfg.views.mask_quantile,
                       estimate_scale=cfg.fine_cfg.estimate_scale or cfg.gt_scale != 1.0)
        t0 = time.perf_counter()
        try:
            T_hat, history = register_fine(pair.views, pair.field_b, T0, fcfg, T_gt=pair.T_gt)
        except DivergenceError as exc:
            T_hat = exc.best if exc.best is not None else T0
            history = exc.history or {}
            failure = f"divergence: {exc}"
        stage["fine"] = time.perf_counter() - t0
    rot, trans, sc = registration_errors(T_hat, pair.T_gt)
    report = RegistrationReport(
        rot_err_deg=rot, trans_err_x100=trans, scale_err=sc,
        coarse_rot_err_deg=c_rot, coarse_trans_err_x100=c_trans,
        T_hat=T_hat, T_gt=pair.T_gt, T0=T0, seed=cfg.seed, overlap=cfg.overlap, variant=variant,
        symmetry_suspect=symmetry_suspect(pair, T_hat), holdout_psnr=holdout_psnr(pair, T_hat),
        final_loss=float(history["loss"][-1]) if len(history.get("loss", ())) else float("nan"),
        coarse_info=coarse_info, stage_seconds={**pair.timings, **stage},
        wall_time=time.perf_counter() - t_start, history=history, repeat=repeat, failure=failure,
    )
    return report


def run_experiment(config, T_gt=None, out_dir=None):
    """End-to-end run; best of ``repeats`` by held-out PSNR. Writes artifacts when asked."""
    cfg = config.validate()
    t0 = time.perf_counter()
    pair = prepare_pair(cfg, T_gt)
    best = None
    for r in range(cfg.repeats):
        rep = finish_pair(pair, _variant_name(cfg.ablations), repeat=r)
        if best is None or rep.holdout_psnr > best.holdout_psnr:
            best = rep
    best.wall_time = time.perf_counter() - t0
    out_dir = out_dir or cfg.out_dir
    if out_dir:
        write_run_artifacts(best, pair, out_dir)
    return best


def _variant_name(abl):
    parts = [k for k in ("no_init", "no_mask", "single_image") if getattr(abl, k)]
    if abl.noise_pct:
        parts.append(f"noise{abl.noise_pct:g}")
    return "+".join(parts) or "full"


ABLATION_VARIANTS = {
    "full": Ablations(),
    "no_mask": Ablations(no_mask=True),
    "single_image": Ablations(single_image=True),
    "no_init": Ablations(no_init=True),
}


def run_ablations(config, variants=("full", "no_mask", "single_image", "no_init"), T_gt=None):
    """Run several ablation variants on one prepared pair (shared scenes, VFs and coarse init)."""
    cfg = config.validate()
    pair = prepare_pair(cfg, T_gt)
    try:
        T0, info = coarse_estimate(pair, rng=seeded_rng(cfg.seed, "coarse-0"))
    except StageError as exc:
        T0, info = Transform.identity(), {"failure": str(exc)}
    out = {}
    for name in variants:
        abl = ABLATION_VARIANTS[name]
        pair.config = replace(cfg, ablations=abl)
        if abl.no_init:
            out[name] = finish_pair(pair, name, Transform.identity(), {})
        else:
            out[name] = finish_pair(pair, name, T0, info)
    pair.config = cfg
    return out, pair


# ---------------------------------------------------------------------------
# artifacts

HISTORY_COLUMNS = ("iter", "loss", "lr", "rot_err_deg", "trans_err_x100")


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    n = len(history.get("loss", ()))
    for i in range(n):
        row = [i] + [repr(float(history[c][i])) if c in history else "" for c in HISTORY_COLUMNS[1:]]
        w.writerow(row)
    return buf.getvalue()


REPORT_COLUMNS = ("seed", "overlap", "variant", "rot_err_deg", "trans_err_x100", "scale_err",
                  "coarse_rot_err_deg", "coarse_trans_err_x100", "holdout_psnr", "symmetry_suspect",
                  "failure")


def reports_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        d = r.to_dict(with_timing=False)
        w.writerow([d[c] if d[c] is not None else "" for c in REPORT_COLUMNS])
    return buf.getvalue()


def write_run_artifacts(report, pair, out_dir, figures=True):
    from .io_core import atomic_write_text

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(pair.config.to_dict(), seeds={"master": pair.config.seed})
    write_json(out / "report.json", report.to_dict())
    manifest.add_artifact("report", out / "report.json")
    atomic_write_text(out / "history.csv", history_csv(report.history))
    manifest.add_artifact("history", out / "history.csv")
    atomic_write_text(out / "summary.csv", reports_csv([report]))
    manifest.add_artifact("summary", out / "summary.csv")
    save_transform(report.T_hat, out / "transform.json")
    save_transform(report.T_gt, out / "transform_gt.json")
    manifest.add_artifact("transform", out / "transform.json")
    if figures and pair.config.render_figures:
        from . import plotting

        for name, path in plotting.run_figures(report, pair, out).items():
            manifest.add_artifact(name, path)
    manifest.timings.update(report.stage_seconds)
    manifest.save(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# suites used by the acceptance tests and the CLI

SUITE_SCENE_SEEDS = (11, 12, 13, 14, 15)


def benchmark_suite(base=None, seeds=SUITE_SCENE_SEEDS, overlaps=OVERLAP_MODES, **overrides):
    """Configs for the scenes x overlap grid."""
    base = base or ExperimentConfig()
    return [replace(base, seed=s, overlap=o, **overrides) for s in seeds for o in overlaps]


def final_error(report):
    """Scalar error used to compare ablation variants: degrees plus translation x100."""
    return report.rot_err_deg + report.trans_err_x100


def summarize(reports, rot_deg=0.5, trans_x100=0.5):
    ok = [r.success(rot_deg, trans_x100) for r in reports]
    return {
        "n_runs": len(reports),
        "n_success": int(sum(ok)),
        "median_rot_err_deg": float(np.median([r.rot_err_deg for r in reports])),
        "median_trans_err_x100": float(np.median([r.trans_err_x100 for r in reports])),
        "median_coarse_rot_err_deg": float(np.median([r.coarse_rot_err_deg for r in reports])),
        "median_coarse_trans_err_x100": float(np.median([r.coarse_trans_err_x100 for r in reports])),
    }

"""Command-line entry point: ``viewshed-reg <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 pipeline failure,
4 acceptance-threshold failure in ``eval``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, io_core
from .errors import ConfigurationError, ParseError, StageError, ValidationError, ViewshedRegError
from .lie import Transform

log = logging.getLogger("viewshed_reg")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_ACCEPTANCE = 0, 2, 3, 4


def _experiment_config(args):
    raw = io_core.load_config(args.config) if args.config else {}
    if raw.get("schema", "experiment") != "experiment":
        raise ConfigurationError(f"config schema must be 'experiment', got {raw.get('schema')!r}")
    cfg = harness.ExperimentConfig.from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def _out(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, text, manifest, name):
    io_core.atomic_write_text(path, text)
    manifest.add_artifact(name, path)


def _depth_stats(model):
    from .viewshed import DepthStats

    d = model.info.get("depth_stats")
    if not d:
        raise ConfigurationError("flow file carries no depth statistics; retrain it with train-vf")
    return DepthStats(d["median"], d["mean"], d["std"], int(d["count"]))


# ---------------------------------------------------------------------------
# subcommands

def cmd_make_scene(args):
    from . import plotting
    from .scene import capture_rig, make_scene, render_image

    cfg = _experiment_config(args)
    out = _out(args, "scene")
    pose = io_core.load_transform(args.pose) if args.pose else None
    clutter = args.clutter_seed if args.clutter_seed is not None else io_core.derive_seed(cfg.seed, "clutter-b")
    fld, _ = make_scene(cfg.scene, cfg.seed, pose, clutter)
    rig = capture_rig(cfg.scene.rig)
    cams = [rig[i] for i in harness.split_cameras(rig, cfg.overlap)[args.side]]
    if pose is not None:
        cams = [harness.camera_in_frame(c, pose.inverse()) for c in cams]
    manifest = io_core.RunManifest(cfg.to_dict(), seeds={"master": cfg.seed, "clutter": clutter})
    io_core.save_field(fld, out / "field.vfrf")
    io_core.save_cameras(cams, out / "cameras.json")
    manifest.add_artifact("field", out / "field.vfrf")
    manifest.add_artifact("cameras", out / "cameras.json")
    rgb, _, _ = render_image(fld, cams[0], 96, seed=cfg.seed)
    manifest.add_artifact("fig_preview", plotting.image_grid([rgb], out / "preview.png", ["camera 0"]))
    manifest.save(out / "manifest.json")
    print(f"scene: {fld.resolution} voxels, {len(cams)} cameras -> {out}")


def cmd_train_vf(args):
    from . import plotting
    from .viewshed import CollectionConfig, build_vf

    cfg = _experiment_config(args)
    out = _out(args, "vf")
    fld = io_core.load_field(args.field)
    cams = io_core.load_cameras(args.cameras)
    col = replace(cfg.collection, seed=io_core.derive_seed(cfg.seed, "collect"),
                  noise_pct=cfg.ablations.noise_pct)
    flow_cfg = replace(cfg.flow, seed=io_core.derive_seed(cfg.seed, "flow"))
    if args.iterations is not None:
        flow_cfg = replace(flow_cfg, n_iterations=args.iterations)
    model, _ = build_vf(fld, cams, flow_cfg, col)
    history = list(model.info.get("history", ()))
    io_core.save_flow(model, out / "flow.vfnf")
    manifest = io_core.RunManifest(cfg.to_dict(), seeds={"master": cfg.seed})
    manifest.add_artifact("flow", out / "flow.vfnf")
    _write_csv(out / "flow_history.csv",
               "iter,nll\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(history)), manifest, "history")
    manifest.add_artifact("fig_loss", plotting.flow_curve(history, out / "flow_loss.png"))
    manifest.save(out / "manifest.json")
    print(f"flow: {model.info['n_points']} oriented points, held-out log-prob "
          f"{model.info['heldout_logprob_init']:.3f} -> {model.info['heldout_logprob_final']:.3f}")


def cmd_gen_views(args):
    from . import plotting
    from .scene import Camera
    from .viewshed import NovelViewConfig, generate_novel_views, render_viewshed_map

    cfg = _experiment_config(args)
    out = _out(args, "views")
    fld = io_core.load_field(args.field)
    vf = io_core.load_flow(args.flow)
    vc = cfg.views
    n_views = args.n_views or vc.n_views
    template = Camera.from_fov(Transform.identity(), vc.width, vc.height, vc.fov_deg)
    nv = NovelViewConfig(n_candidates=max(vc.n_candidates, n_views), n_views=n_views,
                         mask_threshold=vc.mask_quantile)
    cams = generate_novel_views(vf, _depth_stats(vf), nv, template, io_core.seeded_rng(cfg.seed, "novel-views"))
    manifest = io_core.RunManifest(cfg.to_dict(), seeds={"master": cfg.seed})
    io_core.save_cameras(cams, out / "cameras.json")
    manifest.add_artifact("cameras", out / "cameras.json")
    views = []
    base = io_core.derive_seed(cfg.seed, "view-render")
    for i, cam in enumerate(cams):
        v = render_viewshed_map(vf, fld, cam, vc.n_samples, base + i, return_view=True)
        io_core.save_viewshed_map(v.vmap, out / f"vmap_{i:03d}")
        views.append(v)
    manifest.add_artifact("fig_viewshed", plotting.viewshed_panel(views, out / "viewshed_maps.png",
                                                                  vc.mask_quantile))
    manifest.save(out / "manifest.json")
    print(f"views: {len(cams)} cameras -> {out}")


def cmd_export_pc(args):
    from .pointcloud import extract_point_cloud, save_ply

    cfg = _experiment_config(args)
    out = _out(args, "pointcloud")
    fld = io_core.load_field(args.field)
    vf = io_core.load_flow(args.flow)
    cloud = extract_point_cloud(vf, fld, args.n_samples, args.density_threshold,
                                io_core.seeded_rng(cfg.seed, "pc"))
    save_ply(cloud, out / "cloud.ply")
    print(f"point cloud: {len(cloud)} points -> {out / 'cloud.ply'}")


def cmd_register(args):
    cfg = _experiment_config(args)
    out = _out(args, cfg.out_dir or "run")
    init = {"file": "given"}.get(args.init, args.init) if args.init else cfg.init
    if init == "given" and not args.transform:
        raise ConfigurationError("--init file needs --transform <path>")
    cfg = replace(cfg, init=init if init != "given" else cfg.init)
    if args.iterations is not None:
        cfg = replace(cfg, fine_cfg=replace(cfg.fine_cfg, n_iterations=args.iterations))
        if args.iterations == 0:
            cfg = replace(cfg, fine=False)
    if args.no_figures:
        cfg = replace(cfg, render_figures=False)
    T_gt = io_core.load_transform(args.gt) if args.gt else None
    pair = harness.prepare_pair(cfg, T_gt)
    if init == "given":
        T0 = io_core.load_transform(args.transform)
        report = harness.finish_pair(pair, "full", T0, {"init": "file"})
    else:
        report = None
        for r in range(cfg.repeats):
            rep = harness.finish_pair(pair, harness._variant_name(cfg.ablations), repeat=r)
            if report is None or rep.holdout_psnr > report.holdout_psnr:
                report = rep
    harness.write_run_artifacts(report, pair, out)
    print(f"rotation error {report.rot_err_deg:.4f} deg, translation error x100 "
          f"{report.trans_err_x100:.4f} (coarse {report.coarse_rot_err_deg:.3f} / "
          f"{report.coarse_trans_err_x100:.3f}) -> {out}")
    if report.failure:
        log.warning("run finished with failure: %s", report.failure)
        return EXIT_PIPELINE
    return EXIT_OK


def _run_suite(configs, label):
    reports = []
    for i, c in enumerate(configs):
        t0 = time.perf_counter()
        rep = harness.run_experiment(replace(c, render_figures=False))
        reports.append(rep)
        print(f"[{label} {i + 1}/{len(configs)}] seed {c.seed} {c.overlap:<7} "
              f"dR {rep.rot_err_deg:.3f} dt {rep.trans_err_x100:.3f} "
              f"({'ok' if rep.success() else 'FAIL'}, {time.perf_counter() - t0:.0f}s)", flush=True)
    return reports


def cmd_eval(args):
    from . import plotting

    cfg = _experiment_config(args)
    out = _out(args, "eval")
    seeds = tuple(args.scenes) if args.scenes else harness.SUITE_SCENE_SEEDS
    reports = _run_suite(harness.benchmark_suite(cfg, seeds=seeds), "eval")
    summary = harness.summarize(reports)
    fine = summary["median_rot_err_deg"] + summary["median_trans_err_x100"]
    coarse = summary["median_coarse_rot_err_deg"] + summary["median_coarse_trans_err_x100"]
    need = len(reports) - max(0, round(len(reports) * 2 / 15))
    checks = {
        "success_rate": summary["n_success"] >= need,
        "fine_improves_coarse": fine <= 0.1 * coarse,
    }
    summary.update({"required_success": need, "checks": checks, "accepted": all(checks.values())})
    manifest = io_core.RunManifest(cfg.to_dict(), seeds={"scenes": list(seeds)})
    _write_csv(out / "suite.csv", harness.reports_csv(reports), manifest, "suite_csv")
    io_core.write_json(out / "suite.json", {"summary": summary,
                                             "runs": [r.to_dict(with_timing=False) for r in reports]})
    manifest.add_artifact("suite_json", out / "suite.json")
    manifest.add_artifact("fig_errors", plotting.suite_errors(reports, out / "suite_errors.png"))
    manifest.save(out / "manifest.json")
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"{summary['n_success']}/{len(reports)} runs within threshold -> {out}")
    return EXIT_OK if all(checks.values()) else EXIT_ACCEPTANCE


def cmd_ablate(args):
    from . import plotting

    cfg = _experiment_config(args)
    if not args.no_clutter_preset:
        cfg = replace(cfg, scene=replace(cfg.scene, clutter=True))
    out = _out(args, "ablate")
    variants = tuple(args.variants)
    unknown = set(variants) - set(harness.ABLATION_VARIANTS)
    if unknown:
        raise ConfigurationError(f"unknown ablation variants {sorted(unknown)}")
    seeds = tuple(args.scenes) if args.scenes else (21, 22, 23, 24, 25)
    results = {v: [] for v in variants}
    for s in seeds:
        reps, _ = harness.run_ablations(replace(cfg, seed=s), variants)
        for v, r in reps.items():
            results[v].append(r)
            print(f"seed {s} {v:<13} dR {r.rot_err_deg:.3f} dt {r.trans_err_x100:.3f}", flush=True)
    manifest = io_core.RunManifest(cfg.to_dict(), seeds={"scenes": list(seeds)})
    flat = [r for v in variants for r in results[v]]
    _write_csv(out / "ablation.csv", harness.reports_csv(flat), manifest, "ablation_csv")
    medians = {v: float(np.median([harness.final_error(r) for r in results[v]])) for v in variants}
    io_core.write_json(out / "ablation.json", {"median_final_error": medians})
    manifest.add_artifact("ablation_json", out / "ablation.json")
    manifest.add_artifact("fig_ablation", plotting.ablation_bars(results, out / "ablation.png"))
    manifest.save(out / "manifest.json")
    for v, m in medians.items():
        print(f"{v:<13} median final error {m:.4f}")


# ---------------------------------------------------------------------------
# parser

def _global_flags(parser, default):
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides config)")
    parser.add_argument("--config", type=Path, default=default, help="experiment config JSON")
    parser.add_argument("--out", type=Path, default=default, help="output directory")
    parser.add_argument("--threads", type=int, default=default, help="numba worker threads")
    parser.add_argument("-v", "--verbose", action="store_true", default=default or False)
    return parser


def build_parser():
    top = _global_flags(argparse.ArgumentParser(add_help=False), None)
    # SUPPRESS keeps a flag given before the subcommand from being reset by the subparser
    common = _global_flags(argparse.ArgumentParser(add_help=False), argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="viewshed-reg", parents=[top],
                                description="Radiance-field registration with viewshed flows.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-scene", parents=[common], help="build a procedural voxel field and its cameras")
    s.add_argument("--pose", type=Path, help="transform file placing the scene in its own frame")
    s.add_argument("--clutter-seed", type=int)
    s.add_argument("--side", type=int, choices=(0, 1), default=1,
                   help="which camera set of the overlap split to keep (0 = A, 1 = B)")
    s.set_defaults(func=cmd_make_scene)

    s = sub.add_parser("train-vf", parents=[common], help="fit a viewshed flow to a field's cameras")
    s.add_argument("--field", type=Path, required=True)
    s.add_argument("--cameras", type=Path, required=True)
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_train_vf)

    s = sub.add_parser("gen-views", parents=[common], help="propose and render novel views")
    s.add_argument("--field", type=Path, required=True)
    s.add_argument("--flow", type=Path, required=True)
    s.add_argument("--n-views", type=int)
    s.set_defaults(func=cmd_gen_views)

    s = sub.add_parser("export-pc", parents=[common], help="sample a point cloud and write PLY")
    s.add_argument("--field", type=Path, required=True)
    s.add_argument("--flow", type=Path, required=True)
    s.add_argument("--n-samples", type=int, default=100_000)
    s.add_argument("--density-threshold", type=float, default=None,
                   help="keep samples above this density (default: half the field maximum)")
    s.set_defaults(func=cmd_export_pc)

    s = sub.add_parser("register", parents=[common], help="run one registration experiment")
    s.add_argument("--init", choices=("pc", "photo", "identity", "file"))
    s.add_argument("--transform", type=Path, help="initial transform for --init file")
    s.add_argument("--gt", type=Path, help="ground-truth transform file (default: drawn from the prior)")
    s.add_argument("--iterations", type=int, help="fine iterations (0 skips refinement)")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("eval", parents=[common], help="benchmark suite with threshold checks")
    s.add_argument("--scenes", type=int, nargs="+", help="scene seeds (default: the 5-scene suite)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="ablation variants on clutter scenes")
    s.add_argument("--scenes", type=int, nargs="+")
    s.add_argument("--variants", nargs="+", default=list(harness.ABLATION_VARIANTS))
    s.add_argument("--no-clutter-preset", action="store_true", help="keep the config's clutter setting")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # numba falls back to another threading layer when the system TBB is too old
    warnings.filterwarnings("ignore", message=".*TBB.*")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigurationError("--threads must be >= 1")
            import numba

            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        code = args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ParseError, ValidationError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        if isinstance(exc.cause, ConfigurationError):
            print(f"configuration error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"pipeline failure in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_PIPELINE
    except ViewshedRegError as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())

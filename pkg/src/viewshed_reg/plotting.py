"""Static report figures (PNG) for runs, suites and ablations."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .scene import render_image  # noqa: E402

DPI = 110


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curve(history, path, title=None):
    loss = np.asarray(history.get("loss", ()))
    fig, axes = plt.subplots(1, 2 if "rot_err_deg" in history else 1, figsize=(9, 3.2), squeeze=False)
    ax = axes[0, 0]
    if loss.size:
        ax.semilogy(loss, lw=0.8, color="0.4", label="batch loss")
        ax.semilogy(np.minimum.accumulate(loss), lw=1.2, color="C0", label="best so far")
        ax.legend(frameon=False, fontsize=8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("photometric loss")
    if "rot_err_deg" in history:
        ax = axes[0, 1]
        ax.semilogy(np.maximum(history["rot_err_deg"], 1e-4), color="C1", label="rotation error (deg)")
        ax.semilogy(np.maximum(history["trans_err_x100"], 1e-4), color="C2", label="translation error x100")
        ax.axhline(0.5, color="k", lw=0.6, ls=":")
        ax.set_xlabel("iteration")
        ax.legend(frameon=False, fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    return _save(fig, path)


def flow_curve(history, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    h = np.asarray(history, float)
    if h.size:
        ax.plot(h, lw=0.6, color="0.5", label="batch NLL")
        k = max(1, h.size // 50)
        ax.plot(np.convolve(h, np.ones(k) / k, mode="valid"), color="C0", label=f"mean of {k}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("negative log-likelihood")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def image_grid(images, path, titles=None):
    fig, axes = plt.subplots(1, len(images), figsize=(2.6 * len(images), 2.8), squeeze=False)
    for j, img in enumerate(images):
        axes[0, j].imshow(np.clip(img, 0, 1))
        axes[0, j].set_axis_off()
        if titles:
            axes[0, j].set_title(titles[j], fontsize=8)
    return _save(fig, path)


def checker_composite(a, b, tiles=6):
    """Interleave two equally sized images in a checkerboard."""
    h, w = a.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    sel = ((yy * tiles // h) + (xx * tiles // w)) % 2 == 0
    out = np.where(sel[..., None], a, b)
    return np.clip(out, 0, 1)


def registration_checker(pair, T, path, n_views=4):
    """Source views next to B re-rendered through ``T``, plus their checkerboard blend."""
    from .harness import camera_in_frame

    views = pair.views[:n_views]
    fig, axes = plt.subplots(3, len(views), figsize=(2.2 * len(views), 6.6), squeeze=False)
    for j, v in enumerate(views):
        cam_b = camera_in_frame(v.camera, T)
        rgb_b, _, _ = render_image(pair.field_b, cam_b, v.n_samples, seed=v.seed)
        for i, img in enumerate((v.rgb, rgb_b, checker_composite(v.rgb, rgb_b))):
            axes[i, j].imshow(np.clip(img, 0, 1))
            axes[i, j].set_axis_off()
    for i, name in enumerate(("scene A view", "scene B via estimate", "checker")):
        axes[i, 0].set_title(name, fontsize=8, loc="left")
    return _save(fig, path)


def viewshed_panel(views, path, quantile=0.3, n=6):
    views = views[:n]
    fig, axes = plt.subplots(3, len(views), figsize=(2.2 * len(views), 6.6), squeeze=False)
    for j, v in enumerate(views):
        s = np.where(v.vmap.valid, v.vmap.scores, np.nan)
        axes[0, j].imshow(np.clip(v.rgb, 0, 1))
        axes[1, j].imshow(s, cmap="viridis")
        axes[2, j].imshow(v.mask(quantile), cmap="gray")
        for i in range(3):
            axes[i, j].set_axis_off()
    for i, name in enumerate(("render", "VF log-likelihood", "mask")):
        axes[i, 0].set_title(name, fontsize=8, loc="left")
    return _save(fig, path)


def run_figures(report, pair, out_dir):
    out = Path(out_dir)
    paths = {
        "fig_loss": loss_curve(report.history, out / "loss.png",
                               f"seed {report.seed}, overlap {report.overlap}, {report.variant}"),
        "fig_checker": registration_checker(pair, report.T_hat, out / "checker.png"),
        "fig_viewshed": viewshed_panel(pair.views, out / "viewshed_maps.png",
                                       pair.config.views.mask_quantile),
    }
    return paths


def suite_errors(reports, path, rot_bar=0.5, trans_bar=0.5):
    """Per-run coarse and final errors, grouped by overlap mode."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    labels = [f"{r.seed}/{r.overlap[0]}" for r in reports]
    x = np.arange(len(reports))
    for ax, key, bar, name in ((axes[0], "rot_err_deg", rot_bar, "rotation error (deg)"),
                               (axes[1], "trans_err_x100", trans_bar, "translation error x100")):
        coarse = [getattr(r, "coarse_" + key) for r in reports]
        final = [getattr(r, key) for r in reports]
        ax.semilogy(x, np.maximum(coarse, 1e-4), "o", color="0.6", label="coarse")
        ax.semilogy(x, np.maximum(final, 1e-4), "s", color="C0", label="final")
        ax.axhline(bar, color="k", lw=0.6, ls=":")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=90, fontsize=7)
        ax.set_ylabel(name)
    axes[0].legend(frameon=False, fontsize=8)
    return _save(fig, path)


def ablation_bars(results, path):
    """Median final error per ablation variant; ``results`` maps name -> list of reports."""
    names = list(results)
    rot = [np.median([r.rot_err_deg for r in results[n]]) for n in names]
    trans = [np.median([r.trans_err_x100 for r in results[n]]) for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    x = np.arange(len(names))
    ax.bar(x - 0.2, rot, 0.4, label="rotation (deg)")
    ax.bar(x + 0.2, trans, 0.4, label="translation x100")
    ax.set_yscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("median final error")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)

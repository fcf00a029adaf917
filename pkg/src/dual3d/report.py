"""Figure and table reports for a completed pipeline run directory.

Reads only files the pipeline wrote (manifest, PPM renders, raw float
sidecars, refinement log) and renders matplotlib figures to image files;
nothing here recomputes pipeline results.  Uses the Agg backend so report
generation works without a display.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from dual3d import fileio


def _load_manifest(run_dir: Path) -> dict:
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json in {run_dir}")
    with open(manifest_path, "r", encoding="utf-8") as fp:
        return json.load(fp)


def _view_paths(run_dir: Path) -> list:
    return sorted((run_dir / "renders").glob("view_*.ppm"))


def contact_sheet(run_dir: Path, out_path: Path) -> bool:
    paths = _view_paths(run_dir)
    if not paths:
        return False
    cols = 6
    rows = (len(paths) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 2 * rows))
    axes = np.atleast_2d(axes)
    for ax in axes.ravel():
        ax.axis("off")
    for i, p in enumerate(paths):
        ax = axes.ravel()[i]
        ax.imshow(fileio.read_ppm(p))
        ax.set_title(p.stem, fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return True


def channel_heatmaps(run_dir: Path, out_path: Path) -> bool:
    depth_path = run_dir / "renders" / "view_00_depth.bin"
    opacity_path = run_dir / "renders" / "view_00_opacity.bin"
    if not depth_path.is_file() or not opacity_path.is_file():
        return False
    depth, _ = fileio.read_raw_f32(depth_path)
    opacity, _ = fileio.read_raw_f32(opacity_path)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    im1 = ax1.imshow(opacity, cmap="gray", vmin=0.0, vmax=1.0)
    ax1.set_title("opacity (view 0)")
    fig.colorbar(im1, ax=ax1, shrink=0.8)
    im2 = ax2.imshow(np.where(opacity > 0.01, depth, np.nan), cmap="viridis")
    ax2.set_title("depth (view 0)")
    fig.colorbar(im2, ax=ax2, shrink=0.8)
    for ax in (ax1, ax2):
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return True


def atlas_preview(run_dir: Path, out_path: Path) -> bool:
    tex_path = run_dir / "texture.ppm"
    if not tex_path.is_file():
        return False
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(fileio.read_ppm(tex_path), origin="lower")
    ax.set_title("texture atlas")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return True


def loss_curve(run_dir: Path, out_path: Path) -> bool:
    log_path = run_dir / "refine_log.json"
    if not log_path.is_file():
        return False
    with open(log_path, "r", encoding="utf-8") as fp:
        log = json.load(fp)
    if not log:
        return False
    iters = [e["iter"] for e in log]
    losses = [e["loss"] for e in log]
    ts = [e["t"] for e in log]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(iters, losses, marker="o", markersize=2.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("masked image loss")
    ax.set_yscale("log" if min(losses) > 0 else "linear")
    ax2 = ax.twinx()
    ax2.plot(iters, ts, color="tab:orange", alpha=0.5)
    ax2.set_ylabel("noise level t", color="tab:orange")
    ax.set_title("texture refinement")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return True


def summary_csv(run_dir: Path, out_path: Path) -> bool:
    paths = _view_paths(run_dir)
    if not paths:
        return False
    with open(out_path, "w", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["view", "file", "mean_r", "mean_g", "mean_b"])
        for i, p in enumerate(paths):
            img = fileio.read_ppm(p)
            means = img.mean(axis=(0, 1))
            writer.writerow([i, p.name] + [f"{m:.6f}" for m in means])
    return True


def generate_report(run_dir, out_dir=None) -> list:
    """Render every available figure for a run; returns written paths."""
    run = Path(run_dir)
    _load_manifest(run)   # fail early on a directory that is not a run
    out = Path(out_dir) if out_dir is not None else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    jobs = [
        (contact_sheet, "contact_sheet.png"),
        (channel_heatmaps, "heatmaps.png"),
        (atlas_preview, "atlas.png"),
        (loss_curve, "loss_curve.png"),
        (summary_csv, "summary.csv"),
    ]
    for fn, name in jobs:
        target = out / name
        if fn(run, target):
            written.append(str(target))
    return written

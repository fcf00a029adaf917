"""Command-line interface.

Subcommands: render, sample, extract-mesh, refine, metrics, demo,
pipeline, report.  Exit codes: 0 success, 2 configuration or usage error,
3 stage or runtime failure.

Field arguments accept either a TPF1 file path or ``analytic:<name>``
with name in sphere, box, union.  Camera arguments accept a camera JSON
file or ``rig:<index>`` for one of the 24 fixed evaluation viewpoints.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from dual3d import diffusion as diff_mod
from dual3d import fileio
from dual3d import metrics as metrics_mod
from dual3d.cameras import eval_camera_rig, load_cameras
from dual3d.field import load_field, save_field
from dual3d.mesh import build_uv_atlas, load_mesh_obj, marching_cubes, \
    save_mesh_obj
from dual3d.network import ToyDenoiser
from dual3d.pipeline import ConfigError, StageError, analytic_field, \
    demo_config, load_config, run_pipeline
from dual3d.renderer import RenderConfig, render_image
from dual3d.report import generate_report
from dual3d.texture import TextureAtlas, make_refiner, refine_texture


def _field_from_spec(spec: str):
    if spec.startswith("analytic:"):
        return analytic_field(spec.split(":", 1)[1])
    try:
        return load_field(spec)
    except OSError as exc:
        raise ConfigError(f"cannot read field file: {exc}") from exc


def _camera_from_spec(spec: str, res: int):
    if spec.startswith("rig:"):
        try:
            idx = int(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError("rig camera index must be an integer") from exc
        rig = eval_camera_rig(radius=2.0, width=res, height=res)
        if not 0 <= idx < len(rig):
            raise ConfigError(f"rig index out of range 0..{len(rig) - 1}")
        return rig[idx]
    try:
        cams = load_cameras(spec)
    except OSError as exc:
        raise ConfigError(f"cannot read camera file: {exc}") from exc
    if not cams:
        raise ConfigError("camera file is empty")
    return cams[0]


def _parse_patch(text: str):
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError("--patch expects x,y,w,h")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError("--patch components must be integers") from exc


def _parse_rgb(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError("expected r,g,b")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError("rgb components must be numbers") from exc


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_render(args) -> int:
    field = _field_from_spec(args.field)
    cam = _camera_from_spec(args.camera, args.res)
    cfg = RenderConfig(
        n_uniform=args.n_uniform, n_upsample=args.n_upsample, s=args.s,
        near=args.near, far=args.far,
        background=_parse_rgb(args.background), grid_res=args.grid_res,
    )
    patch = _parse_patch(args.patch)
    result = render_image(field, cam, cfg, patch=patch)
    fileio.write_ppm(args.out, result.rgb)
    if args.aux:
        fileio.write_raw_f32(args.out + ".depth.bin", result.depth)
        fileio.write_raw_f32(args.out + ".opacity.bin", result.opacity)
    stats = result.stats
    print(f"wrote {args.out} "
          f"({result.rgb.shape[1]}x{result.rgb.shape[0]}, "
          f"mean opacity {result.opacity.mean():.4f}, "
          f"march avg {stats.n_march.mean():.1f}, "
          f"upsample avg {stats.n_upsample.mean():.1f})")
    return 0


def cmd_sample(args) -> int:
    schedule = diff_mod.NoiseSchedule.cosine(args.big_t)
    plan = diff_mod.DdimPlan.uniform(args.big_t, args.steps)
    toggle = diff_mod.ToggleSchedule(m=args.toggle_m)
    if args.denoiser == "gaussian":
        denoiser = diff_mod.GaussianAnalyticDenoiser(
            mean=np.zeros(diff_mod.DEFAULT_LATENT_SHAPE), sigma0=0.5
        )
    else:
        denoiser = ToyDenoiser(seed=args.seed)
    latents, field = diff_mod.sample(
        denoiser, schedule, plan, toggle, seed=args.seed,
        cfg_scale=args.cfg_scale,
    )
    diff_mod.save_latents(args.out, latents, t=0)
    modes = toggle.modes_for_plan(len(plan))
    n3d = sum(1 for m in modes if m is diff_mod.Mode.MODE_3D)
    print(f"wrote {args.out} ({args.steps} steps, {n3d} in 3D mode)")
    if args.field_out:
        save_field(field, args.field_out)
        print(f"wrote {args.field_out}")
    return 0


def cmd_extract_mesh(args) -> int:
    field = _field_from_spec(args.field)
    bbox = None
    if args.bbox:
        parts = args.bbox.split(",")
        if len(parts) != 6:
            raise ConfigError("--bbox expects x0,y0,z0,x1,y1,z1")
        vals = [float(p) for p in parts]
        bbox = np.array([vals[:3], vals[3:]])
    mesh = marching_cubes(field, resolution=args.resolution, bbox=bbox)
    uv = build_uv_atlas(mesh, texture_size=args.texture_size)
    save_mesh_obj(args.out, mesh, uv=uv)
    print(f"wrote {args.out} ({mesh.n_vertices} vertices, "
          f"{mesh.n_faces} faces, watertight={mesh.is_watertight()})")
    return 0


def cmd_refine(args) -> int:
    mesh, uv = load_mesh_obj(args.mesh)
    if uv is None:
        raise ConfigError("mesh file has no UV coordinates")
    refiner = make_refiner(args.refiner)
    if args.random_views:
        cams = None
    else:
        cams = eval_camera_rig(radius=2.0, width=args.res,
                               height=args.res)[: args.views]
    atlas, log = refine_texture(
        mesh, uv, TextureAtlas.constant(args.texture_size), refiner,
        cameras=cams, n_iters=args.iters, lr=args.lr, big_t=args.big_t,
        t_start_frac=args.t_start, t_end_frac=args.t_end, seed=args.seed,
        res=(args.res, args.res),
    )
    fileio.write_ppm(args.out, atlas.data)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fp:
            json.dump(log, fp, indent=1, sort_keys=True)
            fp.write("\n")
    print(f"wrote {args.out} (final loss {log[-1]['loss']:.6g}, "
          f"t {log[0]['t']} -> {log[-1]['t']})")
    return 0


def cmd_metrics(args) -> int:
    images = metrics_mod.load_embeddings(args.images)
    texts = metrics_mod.load_embeddings(args.texts)
    if args.matches is None:
        matches = np.zeros(len(images), dtype=np.int64)
    else:
        parts = args.matches.split(",")
        try:
            vals = [int(p) for p in parts]
        except ValueError as exc:
            raise ConfigError("--matches must be integers") from exc
        if len(vals) == 1:
            matches = np.full(len(images), vals[0], dtype=np.int64)
        elif len(vals) == len(images):
            matches = np.asarray(vals, dtype=np.int64)
        else:
            raise ConfigError("--matches must list one index or one per image")
    sims = metrics_mod.cosine_matrix(images, texts)
    if matches.max() >= sims.shape[1]:
        raise ConfigError("--matches index out of range")
    clip_sim = float(250.0 * sims[np.arange(len(images)), matches].mean())
    r_prec = metrics_mod.r_precision(images, texts, matches)
    payload = {"clip_similarity": fileio.sig_digits(clip_sim),
               "r_precision": fileio.sig_digits(r_prec)}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fp:
            fp.write(fileio.canonical_json(payload))
            fp.write("\n")
    print(f"clip_similarity={payload['clip_similarity']} "
          f"r_precision={payload['r_precision']}")
    return 0


def cmd_demo(args) -> int:
    manifest = run_pipeline(demo_config(seed=args.seed), args.out,
                            threads=args.threads)
    digest = fileio.sha256_file(str(args.out) + "/manifest.json")
    print(f"demo complete: {len(manifest['outputs'])} outputs in {args.out}")
    print(f"manifest sha256 {digest}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    manifest = run_pipeline(cfg, args.out, threads=args.threads)
    print(f"pipeline complete: {len(manifest['outputs'])} outputs "
          f"in {args.out}")
    return 0


def cmd_report(args) -> int:
    written = generate_report(args.run, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dual3d",
        description="Deterministic dual-mode text-to-3D numerical core.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a field from one camera")
    p.add_argument("--field", required=True,
                   help="TPF1 file or analytic:<sphere|box|union>")
    p.add_argument("--camera", default="rig:1",
                   help="camera JSON file or rig:<index>")
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--s", type=float, default=200.0)
    p.add_argument("--n-uniform", type=int, default=24)
    p.add_argument("--n-upsample", type=int, default=24)
    p.add_argument("--grid-res", type=int, default=32)
    p.add_argument("--near", type=float, default=0.1)
    p.add_argument("--far", type=float, default=4.0)
    p.add_argument("--background", default="1,1,1")
    p.add_argument("--patch", default=None, help="x,y,w,h sub-rectangle")
    p.add_argument("--aux", action="store_true",
                   help="also write raw depth and opacity")
    p.add_argument("--out", required=True, help="output PPM path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sample", help="run the dual-mode DDIM sampler")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--toggle-m", type=int, default=10)
    p.add_argument("--cfg-scale", type=float, default=7.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--denoiser", choices=("gaussian", "toy-net"),
                   default="gaussian")
    p.add_argument("--big-t", type=int, default=1000)
    p.add_argument("--out", required=True, help="output latent blob path")
    p.add_argument("--field-out", default=None,
                   help="also save the 3D-mode field (TPF1)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("extract-mesh", help="marching cubes on a field")
    p.add_argument("--field", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--bbox", default=None, help="x0,y0,z0,x1,y1,z1")
    p.add_argument("--texture-size", type=int, default=256)
    p.add_argument("--out", required=True, help="output OBJ path")
    p.set_defaults(func=cmd_extract_mesh)

    p = sub.add_parser("refine", help="refine a texture against a mesh")
    p.add_argument("--mesh", required=True, help="OBJ with UVs")
    p.add_argument("--texture-size", type=int, default=256)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--t-start", type=float, default=0.20,
                   help="starting noise fraction")
    p.add_argument("--t-end", type=float, default=0.05,
                   help="final noise fraction")
    p.add_argument("--big-t", type=int, default=1000)
    p.add_argument("--refiner", default="identity",
                   help="identity | constant:r,g,b | external:<command>")
    p.add_argument("--views", type=int, default=4,
                   help="number of fixed rig cameras")
    p.add_argument("--random-views", action="store_true",
                   help="draw one random viewpoint per iteration instead")
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output texture PPM")
    p.add_argument("--log", default=None, help="refinement log JSON path")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("metrics", help="embedding metrics from saved vectors")
    p.add_argument("--images", required=True, help="image embedding blob")
    p.add_argument("--texts", required=True, help="text embedding blob")
    p.add_argument("--matches", default=None,
                   help="matched text index (one, or one per image)")
    p.add_argument("--out", default=None, help="optional metrics JSON path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("demo", help="run the built-in demo pipeline")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("pipeline", help="run a pipeline from a config file")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="render figures for a finished run")
    p.add_argument("--run", required=True, help="pipeline output directory")
    p.add_argument("--out", default=None,
                   help="report directory (default <run>/report)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:   # runtime failure in any stage
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

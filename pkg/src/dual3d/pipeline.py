"""End-to-end pipeline: field acquisition, rig rendering, mesh extraction,
texture refinement, metrics, and a hashed output manifest.

Configuration is strict JSON: unknown keys and wrong types are rejected
with :class:`ConfigError` before any stage runs.  Stage failures surface
as :class:`StageError`.  The CLI maps these to exit codes 2 and 3.

Every run writes ``manifest.json`` listing each output file with its
SHA-256; nothing hashed contains wall-clock data, so two runs with the
same configuration produce byte-identical manifests.  Timings go to
``run_info.json``, which the manifest deliberately omits.

View rendering parallelizes over cameras with the thread count taken from
the ``DUAL3D_THREADS`` environment variable (default 1); each thread
writes only its own slot, so the result is identical for any count.
"""

from __future__ import annotations

import copy
import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import json
import numpy as np

from dual3d import cameras as cam_mod
from dual3d import diffusion as diff_mod
from dual3d import fileio
from dual3d import metrics as metrics_mod
from dual3d.field import AnalyticSdf, TriPlaneField, load_field, save_field
from dual3d.mesh import build_uv_atlas, marching_cubes, save_mesh_obj
from dual3d.network import ToyDenoiser
from dual3d.renderer import RenderConfig, build_occupancy_grid, render_image
from dual3d.texture import TextureAtlas, make_refiner, refine_texture

THREADS_ENV_VAR = "DUAL3D_THREADS"


class ConfigError(Exception):
    """Invalid configuration (unknown key, bad type, bad value)."""


class StageError(Exception):
    """A pipeline stage failed while executing."""


DEFAULT_CONFIG = {
    "name": "run",
    "seed": 0,
    "field": {
        "kind": "analytic-union",   # analytic-sphere | analytic-box |
                                    # analytic-union | sampled | file
        "path": "",                 # TPF1 file when kind == "file"
    },
    "sample": {
        "steps": 50,
        "toggle_m": 10,
        "cfg_scale": 7.5,
        "denoiser": "gaussian",     # gaussian | toy-net
        "big_t": 1000,
    },
    "render": {
        "res": 96,
        "s": 200.0,
        "n_uniform": 24,
        "n_upsample": 24,
        "grid_res": 32,
        "near": 0.5,
        "far": 3.5,
        "background": [1.0, 1.0, 1.0],
        "radius": 2.0,
    },
    "mesh": {
        "resolution": 48,
    },
    "refine": {
        "iters": 30,
        "lr": 0.1,
        "t_start_frac": 0.20,
        "t_end_frac": 0.05,
        "big_t": 1000,
        "refiner": "constant:0.8,0.35,0.2",
        "views": 4,
        "res": 64,
        "texture_size": 0,          # 0 = pick from the face count
    },
    "metrics": {
        "prompt": "a sphere merged with a box",
        "candidates": [
            "a sphere merged with a box",
            "a tall thin cylinder",
            "an empty scene",
        ],
        "dim": 64,
    },
}

_NUMBER = (int, float)
_SCHEMA = {
    "name": str,
    "seed": int,
    "field": {"kind": str, "path": str},
    "sample": {"steps": int, "toggle_m": int, "cfg_scale": _NUMBER,
               "denoiser": str, "big_t": int},
    "render": {"res": int, "s": _NUMBER, "n_uniform": int, "n_upsample": int,
               "grid_res": int, "near": _NUMBER, "far": _NUMBER,
               "background": list, "radius": _NUMBER},
    "mesh": {"resolution": int},
    "refine": {"iters": int, "lr": _NUMBER, "t_start_frac": _NUMBER,
               "t_end_frac": _NUMBER, "big_t": int, "refiner": str,
               "views": int, "res": int, "texture_size": int},
    "metrics": {"prompt": str, "candidates": list, "dim": int},
}


def _check_types(cfg: dict, schema: dict, prefix: str = "") -> None:
    for key, value in cfg.items():
        where = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key: {where}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            _check_types(value, expected, where + ".")
        else:
            if isinstance(value, bool) or not isinstance(value, expected):
                raise ConfigError(f"{where} has the wrong type")


def validate_config(cfg: dict) -> dict:
    """Merge over defaults after strict key/type checking."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _check_types(cfg, _SCHEMA)
    merged = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in cfg.items():
        if isinstance(value, dict):
            merged[key].update(value)
        else:
            merged[key] = value
    kind = merged["field"]["kind"]
    if kind not in ("analytic-sphere", "analytic-box", "analytic-union",
                    "sampled", "file"):
        raise ConfigError(f"unknown field.kind: {kind}")
    if kind == "file" and not merged["field"]["path"]:
        raise ConfigError("field.kind 'file' requires field.path")
    if merged["sample"]["denoiser"] not in ("gaussian", "toy-net"):
        raise ConfigError("sample.denoiser must be 'gaussian' or 'toy-net'")
    bg = merged["render"]["background"]
    if len(bg) != 3 or not all(isinstance(v, _NUMBER) for v in bg):
        raise ConfigError("render.background must be three numbers")
    if not merged["metrics"]["candidates"]:
        raise ConfigError("metrics.candidates must not be empty")
    if merged["metrics"]["prompt"] not in merged["metrics"]["candidates"]:
        raise ConfigError("metrics.prompt must appear in metrics.candidates")
    return merged


def load_config(path) -> dict:
    try:
        with open(str(path), "r", encoding="utf-8") as fp:
            raw = json.load(fp)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(raw)


def demo_config(seed: int = 0) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    cfg["name"] = "demo"
    cfg["seed"] = seed
    return cfg


def resolve_threads(explicit=None) -> int:
    if explicit is not None:
        n = int(explicit)
        if n < 1:
            raise ConfigError("thread count must be at least 1")
        return n
    env = os.environ.get(THREADS_ENV_VAR)
    if env is None or env == "":
        return 1
    try:
        n = int(env)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV_VAR} must be an integer") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV_VAR} must be at least 1")
    return n


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------


def analytic_field(kind: str) -> AnalyticSdf:
    """Built-in demo geometries addressable by name."""
    if kind == "sphere":
        return AnalyticSdf.sphere(radius=0.5, color=(0.8, 0.3, 0.2))
    if kind == "box":
        return AnalyticSdf.box(half_extents=(0.35, 0.35, 0.35))
    if kind == "union":
        shape = AnalyticSdf.union(
            AnalyticSdf.sphere(center=(-0.15, 0.0, 0.0), radius=0.35),
            AnalyticSdf.box(center=(0.25, 0.0, 0.0),
                            half_extents=(0.2, 0.2, 0.2)),
        )
        return shape.with_position_color()
    raise ConfigError(f"unknown analytic field: {kind}")


def build_field(cfg: dict):
    """Field object from configuration; may run the diffusion sampler.

    Returns ``(field, latents_or_None)``.
    """
    kind = cfg["field"]["kind"]
    if kind.startswith("analytic-"):
        return analytic_field(kind.split("-", 1)[1]), None
    if kind == "file":
        return load_field(cfg["field"]["path"]), None

    scfg = cfg["sample"]
    schedule = diff_mod.NoiseSchedule.cosine(scfg["big_t"])
    plan = diff_mod.DdimPlan.uniform(scfg["big_t"], scfg["steps"])
    toggle = diff_mod.ToggleSchedule(m=scfg["toggle_m"])
    if scfg["denoiser"] == "gaussian":
        denoiser = diff_mod.GaussianAnalyticDenoiser(
            mean=np.zeros(diff_mod.DEFAULT_LATENT_SHAPE), sigma0=0.5
        )
    else:
        denoiser = ToyDenoiser(seed=cfg["seed"])
    latents, field = diff_mod.sample(
        denoiser, schedule, plan, toggle, seed=cfg["seed"],
        cfg_scale=scfg["cfg_scale"],
    )
    return field, latents


def render_rig(field, cfg: dict, threads: int):
    """Render the 24-view rig; returns (cameras, outputs)."""
    rcfg = cfg["render"]
    cams = cam_mod.eval_camera_rig(radius=rcfg["radius"],
                                   width=rcfg["res"], height=rcfg["res"])
    render_cfg = RenderConfig(
        n_uniform=rcfg["n_uniform"], n_upsample=rcfg["n_upsample"],
        s=rcfg["s"], near=rcfg["near"], far=rcfg["far"],
        background=tuple(rcfg["background"]), grid_res=rcfg["grid_res"],
    )
    grid = build_occupancy_grid(field, render_cfg.grid_res, render_cfg.tau)
    outputs = [None] * len(cams)

    def work(i: int) -> None:
        outputs[i] = render_image(field, cams[i], render_cfg, grid=grid,
                                  collect_stats=False)

    if threads <= 1:
        for i in range(len(cams)):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(cams))))
    return cams, outputs


def _auto_texture_size(n_faces: int) -> int:
    g = int(np.ceil(np.sqrt(max(n_faces, 1))))
    size = 256
    while size < 4 * g:
        size *= 2
    return size


def _block_pool(img: np.ndarray, out_size: int) -> np.ndarray:
    h = img.shape[0] - img.shape[0] % out_size
    w = img.shape[1] - img.shape[1] % out_size
    crop = img[:h, :w]
    return crop.reshape(out_size, h // out_size,
                        out_size, w // out_size, -1).mean(axis=(1, 3))


def embed_images(images, dim: int, seed: int = 0) -> np.ndarray:
    """Stand-in image embedder: block-pooled pixels through a fixed seeded
    projection, unit-normalized.  Deterministic, no learned weights."""
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, 1.0, (8 * 8 * 3 + 1, dim))
    out = []
    for img in images:
        pooled = _block_pool(np.asarray(img, dtype=np.float64), 8).ravel()
        vec = np.concatenate([pooled, [1.0]]) @ proj
        out.append(vec / np.linalg.norm(vec))
    return np.stack(out)


def embed_text(prompt: str, dim: int) -> np.ndarray:
    """Stand-in text embedder: unit vector seeded by the prompt digest."""
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.normal(0.0, 1.0, dim)
    return vec / np.linalg.norm(vec)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def _run_stage(name: str, timings: dict, fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        result = fn(*args, **kwargs)
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(f"stage '{name}' failed: {exc}") from exc
    timings[name] = time.perf_counter() - start
    return result


def run_pipeline(cfg: dict, out_dir, threads=None) -> dict:
    """Execute every stage, write outputs and the manifest, return the
    manifest dictionary."""
    cfg = validate_config(cfg)
    n_threads = resolve_threads(threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "renders").mkdir(exist_ok=True)
    outputs: list[str] = []
    timings: dict = {}

    def track(rel: str) -> str:
        outputs.append(rel)
        return str(out / rel)

    # Field
    field, latents = _run_stage("field", timings, build_field, cfg)
    if latents is not None:
        diff_mod.save_latents(track("latents.bin"), latents,
                              t=cfg["sample"]["big_t"])
        outputs.append("latents.bin.json")
    if isinstance(field, TriPlaneField):
        save_field(field, track("field.tpf"))

    # Rig renders
    cams, views = _run_stage("render", timings, render_rig, field, cfg,
                             n_threads)
    cam_mod.save_cameras(cams, track("cameras.json"))
    for i, view in enumerate(views):
        fileio.write_ppm(track(f"renders/view_{i:02d}.ppm"), view.rgb)
    fileio.write_raw_f32(track("renders/view_00_depth.bin"), views[0].depth)
    outputs.append("renders/view_00_depth.bin.json")
    fileio.write_raw_f32(track("renders/view_00_opacity.bin"),
                         views[0].opacity)
    outputs.append("renders/view_00_opacity.bin.json")

    # Mesh
    mesh = _run_stage("mesh", timings, marching_cubes, field,
                      cfg["mesh"]["resolution"])
    tex_size = cfg["refine"]["texture_size"] or _auto_texture_size(mesh.n_faces)
    uv = _run_stage("uv", timings, build_uv_atlas, mesh, tex_size)

    # Texture refinement
    refine_cfg = cfg["refine"]
    refiner = make_refiner(refine_cfg["refiner"])
    refine_cams = cams[: refine_cfg["views"]]
    atlas, log = _run_stage(
        "refine", timings, refine_texture, mesh, uv,
        TextureAtlas.constant(tex_size), refiner, cameras=refine_cams,
        n_iters=refine_cfg["iters"], lr=refine_cfg["lr"],
        big_t=refine_cfg["big_t"], t_start_frac=refine_cfg["t_start_frac"],
        t_end_frac=refine_cfg["t_end_frac"],
        res=(refine_cfg["res"], refine_cfg["res"]),
    )
    fileio.write_ppm(track("texture.ppm"), atlas.data)
    save_mesh_obj(track("mesh.obj"), mesh, uv=uv,
                  texture_filename="texture.ppm")
    outputs.append("mesh.mtl")
    with open(track("refine_log.json"), "w", encoding="utf-8") as fp:
        json.dump([{"iter": e["iter"], "t": e["t"],
                    "loss": fileio.sig_digits(e["loss"])} for e in log],
                  fp, indent=1, sort_keys=True)
        fp.write("\n")

    # Metrics
    mcfg = cfg["metrics"]
    image_vecs = _run_stage(
        "metrics", timings, embed_images,
        [v.rgb for v in views], mcfg["dim"], cfg["seed"]
    )
    text_vecs = np.stack([embed_text(p, mcfg["dim"])
                          for p in mcfg["candidates"]])
    prompt_idx = mcfg["candidates"].index(mcfg["prompt"])
    clip_sim = metrics_mod.clip_similarity(image_vecs,
                                           text_vecs[prompt_idx])
    r_prec = metrics_mod.r_precision(
        image_vecs, text_vecs,
        np.full(len(image_vecs), prompt_idx, dtype=np.int64),
    )
    metrics_mod.save_embeddings(
        track("images_emb.bin"),
        metrics_mod.EmbeddingSet(
            names=[f"view_{i:02d}" for i in range(len(image_vecs))],
            vectors=image_vecs,
        ),
    )
    outputs.append("images_emb.bin.json")
    metrics_mod.save_embeddings(
        track("texts_emb.bin"),
        metrics_mod.EmbeddingSet(names=list(mcfg["candidates"]),
                                 vectors=text_vecs),
    )
    outputs.append("texts_emb.bin.json")
    metrics_payload = {
        "clip_similarity": fileio.sig_digits(clip_sim),
        "r_precision": fileio.sig_digits(r_prec),
        "n_views": len(views),
        "prompt": mcfg["prompt"],
        "candidates": list(mcfg["candidates"]),
    }
    with open(track("metrics.json"), "w", encoding="utf-8") as fp:
        fp.write(fileio.canonical_json(metrics_payload))
        fp.write("\n")

    # Manifest over every tracked output, hashed; timings stay outside.
    entries = []
    for rel in sorted(set(outputs)):
        p = out / rel
        entries.append({
            "path": rel,
            "bytes": p.stat().st_size,
            "sha256": fileio.sha256_file(p),
        })
    manifest = {
        "name": cfg["name"],
        "seed": cfg["seed"],
        "config": cfg,
        "outputs": entries,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fp:
        fp.write(fileio.canonical_json(manifest))
        fp.write("\n")
    with open(out / "run_info.json", "w", encoding="utf-8") as fp:
        json.dump({"timings_seconds": {k: round(v, 3)
                                       for k, v in timings.items()},
                   "threads": n_threads}, fp, indent=1, sort_keys=True)
        fp.write("\n")
    return manifest

"""Software rasterization and texture refinement against a mesh.

Shading is linear in the texel values: a pixel is a fixed bilinear
combination of four texels determined by the rasterized UV coordinates,
plus the background where nothing is covered.  :func:`texture_grad` is the
exact adjoint of that linear map (with a zero background), which the
refinement loop exploits.

Refinement repeatedly renders the textured mesh from one or more views,
asks a refiner for improved images at an annealed noise level, and pulls
texels toward them.  The per-texel step divides the accumulated residual
by the accumulated bilinear weight, so a uniform image-space error decays
uniformly across all covered texels regardless of chart coupling; texels
never touched by any view are left unchanged.
"""

from __future__ import annotations

import struct
import subprocess
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from dual3d.mesh import TriMesh


@dataclass
class TextureAtlas:
    """Square RGB texture with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("texture must be (h, w, 3)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("texture must be finite")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("texture values must lie in [0, 1]")

    @property
    def size(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @classmethod
    def constant(cls, size: int, rgb=(0.5, 0.5, 0.5)) -> "TextureAtlas":
        data = np.broadcast_to(
            np.asarray(rgb, dtype=np.float64), (size, size, 3)
        ).copy()
        return cls(data=data)


@dataclass
class FragmentBuffer:
    """Per-pixel rasterization results.

    ``face_id`` is -1 and ``depth`` infinite where no face covers the
    pixel; ``uv`` holds perspective-correct texture coordinates.
    """

    face_id: np.ndarray   # (h, w) int64
    depth: np.ndarray     # (h, w)
    uv: np.ndarray        # (h, w, 2)

    @property
    def mask(self) -> np.ndarray:
        return self.face_id >= 0

    @property
    def coverage(self) -> float:
        return float(np.count_nonzero(self.mask)) / self.face_id.size


def rasterize(mesh: TriMesh, uv: np.ndarray, cam,
              res: Optional[tuple] = None) -> FragmentBuffer:
    """Rasterize a UV-mapped mesh into a fragment buffer.

    Pixels sample at their centers; barycentric interpolation is
    perspective correct; depth ties keep the lowest face id.  Back faces
    (clockwise when seen from outside) and faces reaching behind the
    camera are skipped.
    """
    uv = np.asarray(uv, dtype=np.float64)
    if uv.shape != (mesh.n_faces, 3, 2):
        raise ValueError("uv must be (n_faces, 3, 2)")
    if res is None:
        h, w = cam.height, cam.width
        fx, fy, cx, cy = cam.fx, cam.fy, cam.cx, cam.cy
    else:
        h, w = int(res[0]), int(res[1])
        sx, sy = w / cam.width, h / cam.height
        fx, fy, cx, cy = cam.fx * sx, cam.fy * sy, cam.cx * sx, cam.cy * sy

    p_cam = (mesh.vertices - cam.translation) @ cam.rotation
    z_depth = -p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = cx + fx * p_cam[:, 0] / z_depth
        py = cy - fy * p_cam[:, 1] / z_depth

    face_id = np.full((h, w), -1, dtype=np.int64)
    depth = np.full((h, w), np.inf)
    uv_out = np.zeros((h, w, 2))

    tri_px = px[mesh.faces]       # (f, 3)
    tri_py = py[mesh.faces]
    tri_z = z_depth[mesh.faces]
    # Image y grows downward, so outward-wound faces project clockwise:
    # front faces have negative signed area in pixel coordinates.
    area = ((tri_px[:, 1] - tri_px[:, 0]) * (tri_py[:, 2] - tri_py[:, 0])
            - (tri_px[:, 2] - tri_px[:, 0]) * (tri_py[:, 1] - tri_py[:, 0]))
    keep = (area < 0) & np.all(tri_z > 1e-9, axis=1)

    for fid in np.flatnonzero(keep):
        xs, ys, zs = tri_px[fid], tri_py[fid], tri_z[fid]
        x0 = max(int(np.floor(xs.min() - 0.5)), 0)
        x1 = min(int(np.ceil(xs.max() + 0.5)), w - 1)
        y0 = max(int(np.floor(ys.min() - 0.5)), 0)
        y1 = min(int(np.ceil(ys.max() + 0.5)), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        gx, gy = np.meshgrid(
            np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5
        )
        # Screen-space barycentrics from signed sub-areas.
        a = area[fid]
        l0 = ((xs[1] - gx) * (ys[2] - gy) - (xs[2] - gx) * (ys[1] - gy)) / a
        l1 = ((xs[2] - gx) * (ys[0] - gy) - (xs[0] - gx) * (ys[2] - gy)) / a
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        inv_z = l0 / zs[0] + l1 / zs[1] + l2 / zs[2]
        z_pix = 1.0 / inv_z
        closer = inside & (z_pix < depth[y0:y1 + 1, x0:x1 + 1])
        if not closer.any():
            continue
        c0 = (l0 / zs[0]) * z_pix
        c1 = (l1 / zs[1]) * z_pix
        c2 = (l2 / zs[2]) * z_pix
        uv_pix = (c0[..., None] * uv[fid, 0]
                  + c1[..., None] * uv[fid, 1]
                  + c2[..., None] * uv[fid, 2])
        sub = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        depth[sub] = np.where(closer, z_pix, depth[sub])
        face_id[sub] = np.where(closer, fid, face_id[sub])
        uv_out[sub] = np.where(closer[..., None], uv_pix, uv_out[sub])

    return FragmentBuffer(face_id=face_id, depth=depth, uv=uv_out)


def _bilinear_taps(frag: FragmentBuffer, shape: tuple):
    """Texel indices and weights of every covered pixel's bilinear lookup."""
    th, tw = shape
    ys, xs = np.nonzero(frag.mask)
    u = np.clip(frag.uv[ys, xs, 0], 0.0, 1.0) * (tw - 1)
    v = np.clip(frag.uv[ys, xs, 1], 0.0, 1.0) * (th - 1)
    c0 = np.clip(np.floor(u).astype(np.int64), 0, tw - 2)
    r0 = np.clip(np.floor(v).astype(np.int64), 0, th - 2)
    fu = u - c0
    fv = v - r0
    weights = np.stack([
        (1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv
    ])                                             # (4, n)
    rows = np.stack([r0, r0, r0 + 1, r0 + 1])
    cols = np.stack([c0, c0 + 1, c0, c0 + 1])
    return ys, xs, rows, cols, weights


def shade(frag: FragmentBuffer, atlas: TextureAtlas,
          background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Bilinear texture lookup per covered pixel over a constant background.

    With the default black background the image is exactly linear in the
    texel values.
    """
    th, tw = atlas.size
    bg = np.asarray(background, dtype=np.float64)
    img = np.broadcast_to(bg, frag.face_id.shape + (3,)).copy()
    ys, xs, rows, cols, weights = _bilinear_taps(frag, (th, tw))
    texels = atlas.data[rows, cols]                 # (4, n, 3)
    img[ys, xs] = np.einsum("kn,knc->nc", weights, texels)
    return img


def texture_grad(frag: FragmentBuffer, grad_image: np.ndarray,
                 texture_size) -> np.ndarray:
    """Adjoint of :func:`shade`'s linear part: scatter pixel gradients
    into the texels each pixel read, with the same bilinear weights."""
    if np.isscalar(texture_size):
        shape = (int(texture_size), int(texture_size))
    else:
        shape = (int(texture_size[0]), int(texture_size[1]))
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != frag.face_id.shape + (3,):
        raise ValueError("gradient image shape must match the fragments")
    ys, xs, rows, cols, weights = _bilinear_taps(frag, shape)
    out = np.zeros(shape + (3,))
    g = grad_image[ys, xs]                          # (n, 3)
    for k in range(4):
        np.add.at(out, (rows[k], cols[k]), weights[k][:, None] * g)
    return out


def texture_coverage(frag: FragmentBuffer, texture_size) -> np.ndarray:
    """Accumulated bilinear weight per texel (the adjoint of shading a
    unit image, single channel)."""
    ones = np.ones(frag.face_id.shape + (3,))
    return texture_grad(frag, ones, texture_size)[..., 0]


def anneal_t(i: int, n_iters: int, big_t: int,
             t_start_frac: float = 0.20, t_end_frac: float = 0.05) -> int:
    """Linearly annealed noise level, from ``t_start_frac * big_t`` at the
    first iteration to ``t_end_frac * big_t`` at the last, never below 1."""
    if not 0 <= i < n_iters:
        raise ValueError("iteration index out of range")
    if n_iters == 1:
        frac = t_start_frac
    else:
        mix = i / (n_iters - 1)
        frac = t_start_frac + (t_end_frac - t_start_frac) * mix
    return max(1, int(round(frac * big_t)))


# ---------------------------------------------------------------------------
# Refiners: callables mapping (images, t) -> images of the same shape
# ---------------------------------------------------------------------------


@dataclass
class IdentityRefiner:
    """Returns its input unchanged; refinement is a loss-zero fixed point."""

    def __call__(self, images: np.ndarray, t: int) -> np.ndarray:
        return np.asarray(images, dtype=np.float64)


@dataclass
class ConstantRefiner:
    """Replaces every image with a constant color."""

    rgb: tuple

    def __post_init__(self) -> None:
        rgb = np.asarray(self.rgb, dtype=np.float64)
        if rgb.shape != (3,) or rgb.min() < 0 or rgb.max() > 1:
            raise ValueError("refiner color must be an rgb triple in [0, 1]")
        self.rgb = tuple(float(v) for v in rgb)

    def __call__(self, images: np.ndarray, t: int) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        return np.broadcast_to(np.asarray(self.rgb), images.shape).copy()


@dataclass
class ExternalRefiner:
    """Pipes images through an external command as raw float32.

    Wire format, little-endian: three uint32 (views, height, width), then
    ``views * height * width * 3`` float32 on stdin; the command must write
    the same float32 count to stdout.  The noise level is appended to the
    command line as a final argument.
    """

    command: Sequence
    timeout: float = 120.0

    def __call__(self, images: np.ndarray, t: int) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        v, h, w, _ = images.shape
        payload = struct.pack("<III", v, h, w) + images.astype("<f4").tobytes()
        proc = subprocess.run(
            [*self.command, str(int(t))], input=payload,
            stdout=subprocess.PIPE, timeout=self.timeout, check=True,
        )
        flat = np.frombuffer(proc.stdout, dtype="<f4")
        if flat.size != images.size:
            raise ValueError("external refiner returned a wrong-sized image")
        return flat.reshape(images.shape).astype(np.float64)


def make_refiner(spec: str) -> Callable:
    """Parse a refiner description: ``identity``, ``constant:r,g,b``, or
    ``external:<command line>``."""
    if spec == "identity":
        return IdentityRefiner()
    if spec.startswith("constant:"):
        parts = spec.split(":", 1)[1].split(",")
        if len(parts) != 3:
            raise ValueError("constant refiner needs r,g,b")
        return ConstantRefiner(rgb=tuple(float(p) for p in parts))
    if spec.startswith("external:"):
        cmd = spec.split(":", 1)[1].split()
        if not cmd:
            raise ValueError("external refiner needs a command")
        return ExternalRefiner(command=cmd)
    raise ValueError(f"unknown refiner: {spec!r}")


def sample_viewpoints(n: int, seed: int = 0, radius: float = 2.0,
                      elevation_range=(-30.0, 30.0), width: int = 128,
                      height: int = 128, fov_deg: float = 50.0) -> list:
    """Seeded random viewpoints: uniform azimuth, uniform elevation in the
    given range, fixed radius."""
    from dual3d.cameras import camera_on_sphere

    rng = np.random.default_rng(seed)
    cams = []
    for _ in range(n):
        az = float(rng.uniform(0.0, 360.0))
        el = float(rng.uniform(*elevation_range))
        cams.append(camera_on_sphere(azimuth_deg=az, elevation_deg=el,
                                     radius=radius, width=width,
                                     height=height, fov_deg=fov_deg))
    return cams


def refine_texture(mesh: TriMesh, uv: np.ndarray, atlas: TextureAtlas,
                   refiner: Callable, cameras: Optional[Sequence] = None,
                   n_iters: int = 100, lr: float = 0.1, big_t: int = 1000,
                   t_start_frac: float = 0.20, t_end_frac: float = 0.05,
                   seed: int = 0, res: Optional[tuple] = None,
                   ) -> tuple[TextureAtlas, list]:
    """Iteratively pull the texture toward refiner-improved renders.

    With fixed ``cameras`` every iteration uses all of them (fragments are
    rasterized once); otherwise each iteration draws one random viewpoint
    from a seeded stream.  Per texel the update is

        texel -= lr * (sum of weighted residuals) / (sum of weights)

    so the geometry of the charts never rescales the step.  Returns the
    refined atlas and a per-iteration log of ``{"iter", "t", "loss"}``.
    """
    if n_iters < 1:
        raise ValueError("refinement needs at least one iteration")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    th, tw = atlas.size
    data = atlas.data.copy()

    fixed_frags = None
    if cameras is not None:
        fixed_frags = [rasterize(mesh, uv, cam, res=res) for cam in cameras]
    else:
        random_cams = sample_viewpoints(n_iters, seed=seed)

    log = []
    for i in range(n_iters):
        t = anneal_t(i, n_iters, big_t, t_start_frac, t_end_frac)
        if fixed_frags is not None:
            frags = fixed_frags
        else:
            frags = [rasterize(mesh, uv, random_cams[i], res=res)]
        current = TextureAtlas(data=data)
        renders = np.stack([shade(f, current) for f in frags])
        targets = np.asarray(refiner(renders, t), dtype=np.float64)
        if targets.shape != renders.shape:
            raise ValueError("refiner changed the image shape")
        residual = renders - targets

        masks = np.stack([f.mask for f in frags])
        n_pix = max(int(np.count_nonzero(masks)), 1)
        loss = float(np.sum(np.square(residual[masks])) / (3.0 * n_pix))

        grad = np.zeros((th, tw, 3))
        weight = np.zeros((th, tw))
        for f, r in zip(frags, residual):
            grad += texture_grad(f, r, (th, tw))
            weight += texture_coverage(f, (th, tw))
        covered = weight > 0
        step = np.zeros_like(grad)
        step[covered] = grad[covered] / weight[covered, None]
        data = np.clip(data - lr * step, 0.0, 1.0)
        log.append({"iter": i, "t": t, "loss": loss})

    return TextureAtlas(data=data), log

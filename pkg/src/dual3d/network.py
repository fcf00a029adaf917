"""Toy dual-mode denoising network: forward passes only, no training.

The runnable pieces here are deliberately small stand-ins that preserve the
architecture's structural properties (token layout, residual attention,
identity at zero layer scale, linear decoder skeleton) at a size where
every forward pass is cheap and deterministic.  The full-size architecture
is represented by :func:`shape_audit`, which reproduces the tensor shapes
of each stage by arithmetic alone, without allocating weights.

Token layout: a stack of ``n_views + 3`` slices over a shared spatial grid.
View slices carry latent channels plus a 6-channel ray encoding; the three
tri-plane slices carry latent channels with the ray slots zeroed.  Slice
order is views first, then the XY, XZ, YZ planes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

from dual3d.field import FieldMlp, TriPlaneField

N_PLANES = 3
RAY_CHANNELS = 6


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} must be finite")
    return x


def gelu(x: np.ndarray) -> np.ndarray:
    """Gaussian error linear unit (exact erf form)."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def assemble_stack(view_latents: np.ndarray, plane_latents: np.ndarray,
                   ray_encoding: np.ndarray) -> np.ndarray:
    """Concatenate view and plane slices into one token stack.

    ``view_latents``: (n, c, h, w); ``plane_latents``: (3, c, h, w);
    ``ray_encoding``: (n, 6, h, w).  Returns (n + 3, c + 6, h, w); plane
    slices carry zeros in the ray channels.
    """
    v = _check_finite(view_latents, "view latents")
    p = _check_finite(plane_latents, "plane latents")
    r = _check_finite(ray_encoding, "ray encoding")
    if v.ndim != 4 or p.ndim != 4 or r.ndim != 4:
        raise ValueError("stack inputs must be 4-D")
    n, c, h, w = v.shape
    if p.shape != (N_PLANES, c, h, w):
        raise ValueError("plane latents must be (3, c, h, w)")
    if r.shape != (n, RAY_CHANNELS, h, w):
        raise ValueError("ray encoding must be (n, 6, h, w)")
    views = np.concatenate([v, r], axis=1)
    planes = np.concatenate(
        [p, np.zeros((N_PLANES, RAY_CHANNELS, h, w))], axis=1
    )
    return np.concatenate([views, planes], axis=0)


def stack_to_tokens(stack: np.ndarray) -> np.ndarray:
    """(slices, c, h, w) -> (slices * h * w, c) row-major token matrix."""
    s, c, h, w = stack.shape
    return stack.transpose(0, 2, 3, 1).reshape(s * h * w, c)


def tokens_to_stack(tokens: np.ndarray, slices: int, h: int, w: int) -> np.ndarray:
    c = tokens.shape[1]
    return tokens.reshape(slices, h, w, c).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionWeights:
    """Projection matrices of one residual multi-head attention block."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    n_heads: int

    def __post_init__(self) -> None:
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            m = _check_finite(getattr(self, name), name)
            if m.shape != (d, d):
                raise ValueError("attention projections must be square and "
                                 "equal-sized")
            setattr(self, name, m)
        if d % self.n_heads != 0:
            raise ValueError("width must be divisible by the head count")

    @classmethod
    def random(cls, width: int, n_heads: int, seed: int = 0,
               scale: float = 0.02) -> "AttentionWeights":
        rng = np.random.default_rng(seed)
        mats = [rng.normal(0.0, scale, (width, width)) for _ in range(4)]
        return cls(*mats, n_heads=n_heads)

    @classmethod
    def zero_value(cls, width: int, n_heads: int, seed: int = 0
                   ) -> "AttentionWeights":
        """Random Q/K, zero V and O: the residual block is the identity."""
        w = cls.random(width, n_heads, seed=seed)
        w.wv = np.zeros_like(w.wv)
        w.wo = np.zeros_like(w.wo)
        return w


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def cross_view_attention(tokens: np.ndarray, weights: AttentionWeights
                         ) -> np.ndarray:
    """Residual multi-head attention over the full token set.

    Every token attends to every token, so view tokens exchange information
    with each other and with the plane tokens.  Permuting token rows
    permutes the output identically.
    """
    t = _check_finite(tokens, "tokens")
    if t.ndim != 2 or t.shape[1] != weights.wq.shape[0]:
        raise ValueError("tokens must be (count, width) matching the weights")
    n_heads = weights.n_heads
    d_head = t.shape[1] // n_heads

    def split(m: np.ndarray) -> np.ndarray:
        return m.reshape(t.shape[0], n_heads, d_head).transpose(1, 0, 2)

    q = split(t @ weights.wq)
    k = split(t @ weights.wk)
    v = split(t @ weights.wv)
    att = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(d_head), axis=-1)
    mixed = (att @ v).transpose(1, 0, 2).reshape(t.shape)
    return t + mixed @ weights.wo


# ---------------------------------------------------------------------------
# EmaNorm
# ---------------------------------------------------------------------------


@dataclass
class EmaNorm:
    """Normalization by a running second moment, updated after use.

    The forward pass divides by the square root of the moment tracked so
    far, then folds the current batch statistic in with weight ``beta``.
    With the initial moment of 1 the first call passes its input through
    unchanged.
    """

    beta: float = 0.99
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if self.sigma <= 0:
            raise ValueError("tracked moment must be positive")


def ema_norm_forward(norm: EmaNorm, x: np.ndarray) -> np.ndarray:
    x = _check_finite(x, "ema-norm input")
    y = x / np.sqrt(norm.sigma)
    batch = float(np.mean(np.square(x)))
    norm.sigma = (1.0 - norm.beta) * norm.sigma + norm.beta * batch
    if norm.sigma <= 0:
        norm.sigma = np.finfo(np.float64).tiny
    return y


# ---------------------------------------------------------------------------
# Transformer
# ---------------------------------------------------------------------------


@dataclass
class TransformerLayer:
    attn: AttentionWeights
    ls_attn: np.ndarray      # per-channel residual scale, zero at init
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    ls_ff: np.ndarray


@dataclass
class TinyTransformer:
    """Pre-norm transformer whose width equals the token channel count.

    There is no input or output projection, so with all residual scales at
    zero the forward pass is exactly the identity.  Residual scales are the
    only parameters initialized to zero; everything else is seeded noise.
    """

    width: int
    layers: list

    @classmethod
    def random(cls, width: int, n_layers: int = 16, n_heads: int = 8,
               seed: int = 0, layer_scale_init: float = 0.0,
               ff_mult: int = 4) -> "TinyTransformer":
        if width % n_heads != 0:
            raise ValueError("width must be divisible by the head count")
        rng = np.random.default_rng(seed)
        layers = []
        for i in range(n_layers):
            attn = AttentionWeights.random(width, n_heads,
                                           seed=seed * 1000 + i)
            hidden = ff_mult * width
            layers.append(TransformerLayer(
                attn=attn,
                ls_attn=np.full(width, layer_scale_init, dtype=np.float64),
                w_ff1=rng.normal(0.0, 0.02, (width, hidden)),
                b_ff1=np.zeros(hidden),
                w_ff2=rng.normal(0.0, 0.02, (hidden, width)),
                b_ff2=np.zeros(width),
                ls_ff=np.full(width, layer_scale_init, dtype=np.float64),
            ))
        return cls(width=width, layers=layers)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6)


def tiny_transformer_forward(model: TinyTransformer, tokens: np.ndarray
                             ) -> np.ndarray:
    x = _check_finite(tokens, "tokens")
    if x.ndim != 2 or x.shape[1] != model.width:
        raise ValueError("tokens must be (count, width)")
    for layer in model.layers:
        ln1 = _layer_norm(x)
        x = x + layer.ls_attn * (cross_view_attention(ln1, layer.attn) - ln1)
        h = gelu(_layer_norm(x) @ layer.w_ff1 + layer.b_ff1)
        x = x + layer.ls_ff * (h @ layer.w_ff2 + layer.b_ff2)
    return x


# ---------------------------------------------------------------------------
# Tri-plane decoder
# ---------------------------------------------------------------------------


@dataclass
class DecoderWeights:
    """Bias-free conv stack: one 3x3 kernel per upsampling stage plus a
    final 3x3 projection.  Kernels are (c_out, c_in, 3, 3)."""

    stage_kernels: list
    final_kernel: np.ndarray

    @classmethod
    def random(cls, c_in: int, c_hidden: int, c_out: int, n_stages: int,
               seed: int = 0) -> "DecoderWeights":
        rng = np.random.default_rng(seed)
        kernels = []
        c_prev = c_in
        for _ in range(n_stages):
            kernels.append(rng.normal(0.0, 0.1, (c_hidden, c_prev, 3, 3)))
            c_prev = c_hidden
        final = rng.normal(0.0, 0.1, (c_out, c_prev, 3, 3))
        return cls(stage_kernels=kernels, final_kernel=final)


def _conv3x3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Bias-free same-padding 3x3 convolution, (b, c, h, w) batched."""
    b, c, h, w = x.shape
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((b, kernel.shape[0], h, w))
    for dy in range(3):
        for dx in range(3):
            patch = pad[:, :, dy:dy + h, dx:dx + w]
            out += np.einsum("oc,bchw->bohw", kernel[:, :, dy, dx], patch)
    return out


def _upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def decode_triplane(features: np.ndarray, weights: DecoderWeights,
                    out_resolution: int, norms: Optional[list] = None,
                    linear: bool = False) -> np.ndarray:
    """Upsample plane features to the target resolution.

    Each stage doubles the resolution (nearest neighbor), convolves, then
    normalizes and applies the nonlinearity.  ``linear=True`` skips the
    normalization and nonlinearity, leaving a purely linear map (all convs
    are bias-free); used to verify the decoder skeleton.
    """
    x = _check_finite(features, "plane features")
    if x.ndim != 4:
        raise ValueError("plane features must be (planes, c, h, w)")
    h = x.shape[2]
    if x.shape[3] != h:
        raise ValueError("plane features must be square")
    if out_resolution < h or out_resolution % h != 0:
        raise ValueError("output resolution must be a multiple of the input")
    n_stages = int(round(math.log2(out_resolution / h)))
    if h * 2 ** n_stages != out_resolution:
        raise ValueError("output / input resolution must be a power of two")
    if len(weights.stage_kernels) != n_stages:
        raise ValueError(f"decoder has {len(weights.stage_kernels)} stages, "
                         f"resolution change needs {n_stages}")
    if norms is None:
        norms = [EmaNorm() for _ in range(n_stages)]
    for kernel, norm in zip(weights.stage_kernels, norms):
        x = _conv3x3(_upsample2(x), kernel)
        if not linear:
            x = gelu(ema_norm_forward(norm, x))
    return _conv3x3(x, weights.final_kernel)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

LOSS_WEIGHT_2D = 1.0
LOSS_WEIGHT_3D = 1.0
LOSS_WEIGHT_EIKONAL = 0.1
LOSS_WEIGHT_SURFACE = 0.01


def loss_2d(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error between predicted and target latents."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("latent shapes must match")
    return float(np.mean(np.square(pred - target)))


def loss_3d(pred_views: np.ndarray, target_views: np.ndarray,
            image_loss: Optional[Callable] = None) -> float:
    """Rendered-view reconstruction loss; pluggable per-image metric.

    The default metric is mean squared error.  A custom ``image_loss``
    receives the full prediction and target arrays and must return a float.
    """
    pred_views = np.asarray(pred_views, dtype=np.float64)
    target_views = np.asarray(target_views, dtype=np.float64)
    if pred_views.shape != target_views.shape:
        raise ValueError("view shapes must match")
    if image_loss is None:
        return float(np.mean(np.square(pred_views - target_views)))
    return float(image_loss(pred_views, target_views))


def total_loss(l2d: float, l3d: float, l_eikonal: float,
               l_surface: float) -> float:
    """Fixed-weight combination: 1, 1, 0.1, 0.01."""
    return (LOSS_WEIGHT_2D * float(l2d)
            + LOSS_WEIGHT_3D * float(l3d)
            + LOSS_WEIGHT_EIKONAL * float(l_eikonal)
            + LOSS_WEIGHT_SURFACE * float(l_surface))


# ---------------------------------------------------------------------------
# Shape audit
# ---------------------------------------------------------------------------


def shape_audit(n_views: int = 4, c_lat: int = 4, h: int = 32, w: int = 32,
                width: int = 512, c_planes: int = 64,
                plane_resolution: int = 256) -> list:
    """Stage-by-stage tensor shapes of the full-size architecture.

    Pure arithmetic; no weights are allocated.  Returns
    ``[(stage_name, shape), ...]`` in forward order.
    """
    if width <= c_lat + RAY_CHANNELS:
        raise ValueError("width must exceed the stacked channel count")
    stages = [
        ("stack", (n_views + N_PLANES, c_lat + RAY_CHANNELS, h, w)),
        ("lift", (n_views + N_PLANES, width, h, w)),
        ("plane_tokens", (N_PLANES, width, h * w)),
        ("triplane", (N_PLANES, c_planes, plane_resolution, plane_resolution)),
    ]
    return stages


# ---------------------------------------------------------------------------
# Weight serialization: one float32 blob plus a JSON manifest
# ---------------------------------------------------------------------------

ACTIVATION = "gelu"
NORMALIZATION = "ema"


def save_weights(path, tensors: dict) -> None:
    """Write named tensors to ``path`` (.bin) with a ``.json`` manifest.

    The manifest records tensor order, shapes, byte offsets, and the
    activation/normalization conventions the weights assume.
    """
    path = str(path)
    manifest = {"activation": ACTIVATION, "normalization": NORMALIZATION,
                "dtype": "<f4", "tensors": []}
    offset = 0
    with open(path, "wb") as fp:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            fp.write(arr.tobytes())
            manifest["tensors"].append(
                {"name": name, "shape": list(arr.shape), "offset": offset}
            )
            offset += arr.nbytes
    with open(path + ".json", "w", encoding="utf-8") as fp:
        json.dump(manifest, fp, sort_keys=True, indent=1)
        fp.write("\n")


def load_weights(path) -> dict:
    path = str(path)
    with open(path + ".json", "r", encoding="utf-8") as fp:
        manifest = json.load(fp)
    if manifest.get("activation") != ACTIVATION:
        raise ValueError("weight file assumes a different activation")
    blob = np.fromfile(path, dtype=manifest["dtype"])
    out = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"] // 4
        out[entry["name"]] = blob[start:start + count].reshape(shape).astype(
            np.float64
        )
    return out


# ---------------------------------------------------------------------------
# Runnable toy denoiser
# ---------------------------------------------------------------------------


class ToyDenoiser:
    """Small runnable denoiser exercising the dual-mode plumbing.

    2D mode: pooled tokens through the tiny transformer, projected back to
    latent channels.  3D mode: the plane tokens are decoded into a tri-plane
    field, the field is rendered from the sampling cameras, and a fixed
    seeded linear encoder maps the renders back to latents, so the returned
    prediction is consistent across views by construction.

    All weights are drawn once from the seed at construction; two instances
    with equal seeds produce bitwise-equal outputs.
    """

    def __init__(self, n_views: int = 4, c_lat: int = 4, latent_res: int = 32,
                 pool: int = 8, plane_channels: int = 8, plane_res: int = 32,
                 render_res: int = 32, seed: int = 0):
        from dual3d.cameras import camera_on_sphere

        if latent_res % pool != 0:
            raise ValueError("latent resolution must be divisible by pool")
        self.n_views = n_views
        self.c_lat = c_lat
        self.latent_res = latent_res
        self.pool = pool
        self.plane_res = plane_res
        self.render_res = render_res
        width = c_lat + RAY_CHANNELS
        self.transformer = TinyTransformer.random(
            width, n_layers=2, n_heads=2, seed=seed, layer_scale_init=0.01
        )
        n_stages = int(round(math.log2(plane_res / (latent_res // pool))))
        self.decoder = DecoderWeights.random(
            width, 16, plane_channels, n_stages, seed=seed + 1
        )
        rng = np.random.default_rng(seed + 2)
        self.token_proj = rng.normal(0.0, 0.3, (width, c_lat))
        self.encoder_proj = rng.normal(0.0, 0.3, (3, c_lat))
        self.field_mlp = FieldMlp.random(plane_channels, seed=seed + 3)
        self.default_cameras = [
            camera_on_sphere(azimuth_deg=a, elevation_deg=0.0, radius=2.0,
                             width=render_res, height=render_res)
            for a in np.linspace(0.0, 360.0, n_views, endpoint=False)
        ]

    def _tokens(self, z: np.ndarray, cameras) -> np.ndarray:
        from dual3d.cameras import latent_rays

        n, c, h, w = z.shape
        p = self.pool
        enc = np.stack(
            [latent_rays(cam, (h, w)) for cam in cameras[: self.n_views]]
        )
        planes = np.broadcast_to(z.mean(axis=0), (N_PLANES, c, h, w))
        stack = assemble_stack(z, planes, enc)
        pooled = stack.reshape(n + N_PLANES, c + RAY_CHANNELS,
                               h // p, p, w // p, p).mean(axis=(3, 5))
        return pooled

    def predict_x0(self, z, t, alpha_bar, mode, cameras=None, condition=None):
        from dual3d.diffusion import Mode
        from dual3d.renderer import RenderConfig, render_image

        z = np.asarray(z, dtype=np.float64)
        cams = list(cameras) if cameras else self.default_cameras
        pooled = self._tokens(z, cams)
        hp = pooled.shape[2]
        tokens = stack_to_tokens(pooled)
        out = tiny_transformer_forward(self.transformer, tokens)
        out_stack = tokens_to_stack(out, pooled.shape[0], hp, hp)

        if mode is Mode.MODE_2D:
            # Conditioning shifts the tokens by a per-channel bias.
            if condition is not None:
                bias = np.asarray(condition, dtype=np.float64).ravel()
                take = min(bias.size, out_stack.shape[1])
                out_stack = out_stack.copy()
                out_stack[: self.n_views, :take] += bias[:take, None, None]
            view_tok = out_stack[: self.n_views]
            lat = np.einsum("nchw,cd->ndhw", view_tok, self.token_proj)
            up = lat.repeat(self.pool, axis=2).repeat(self.pool, axis=3)
            return np.clip(up, -10.0, 10.0), None

        plane_tok = out_stack[self.n_views:]
        planes = decode_triplane(plane_tok, self.decoder, self.plane_res,
                                 linear=True)
        planes = np.tanh(planes * 0.1)
        fld = TriPlaneField(planes=planes, mlp=self.field_mlp)
        cfg = RenderConfig(n_uniform=8, n_upsample=8, s=40.0, grid_res=16)
        lats = []
        for cam in cams[: self.n_views]:
            img = render_image(fld, cam, cfg, collect_stats=False).rgb
            small = img.reshape(self.latent_res,
                                img.shape[0] // self.latent_res,
                                self.latent_res,
                                img.shape[1] // self.latent_res, 3
                                ).mean(axis=(1, 3))
            lats.append(np.einsum("hwc,cd->dhw", small, self.encoder_proj))
        return np.stack(lats), fld

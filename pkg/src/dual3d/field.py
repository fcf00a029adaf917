"""Tri-plane feature fields with an SDF+color MLP head, plus analytic SDF oracles.

A field maps world points to a signed-distance-like scalar and an RGB color.
The learned representation stores three axis-aligned feature planes (XY, XZ,
YZ); a point is projected onto each plane, the planes are sampled bilinearly,
the three feature vectors are summed, and a two-layer MLP maps the summed
feature to ``(sdf, rgb)``.

Conventions used throughout:

- plane order is XY, XZ, YZ; plane ``k`` stores features as ``planes[k, c, i, j]``
  where ``i`` indexes the first coordinate of the pair and ``j`` the second;
- grid coordinates are ``(p - bbox_min) / extent * (R - 1)``, so plane borders
  coincide with the bounding box faces;
- points outside the bounding box are clamped to the border (the spatial
  derivative with respect to a clamped coordinate is zero);
- the MLP nonlinearity is ``tanh`` (smooth everywhere, recorded as
  :data:`ACTIVATION` so serialized models are unambiguous);
- the sdf output channel is linear, rgb channels are squashed by the logistic
  function.

Points on an interior cell boundary use the one-sided convention of the cell
to their right (``floor`` indexing), both for values and gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from typing import BinaryIO, Callable, Optional

import numpy as np

ACTIVATION = "tanh"

_FIELD_MAGIC = b"TPF1"


def _check_points(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 3:
        raise ValueError(f"points must have a trailing dimension of 3, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("invalid point")
    return p


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ w.T + b`` with a fixed accumulation order over input channels.

    The explicit channel loop keeps results bitwise independent of the batch
    size, which the renderer's patch-stitching guarantee relies on.
    """
    out = np.broadcast_to(b, x.shape[:-1] + (w.shape[0],)).copy()
    for c in range(w.shape[1]):
        out += x[..., c, None] * w[:, c]
    return out


@dataclass
class FieldMlp:
    """Two affine layers with a tanh in between; output is ``(sdf, r, g, b)``."""

    w1: np.ndarray  # (hidden, C)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (4, hidden)
    b2: np.ndarray  # (4,)

    def __post_init__(self) -> None:
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.w1.ndim != 2 or self.b1.shape != (self.w1.shape[0],):
            raise ValueError("layer-1 shapes inconsistent")
        if self.w2.shape != (4, self.w1.shape[0]) or self.b2.shape != (4,):
            raise ValueError("layer-2 shapes inconsistent")
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("MLP weights must be finite")

    @property
    def in_channels(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def forward(self, feat: np.ndarray) -> np.ndarray:
        """Raw 4-channel output (sdf linear, rgb not yet squashed)."""
        h = np.tanh(_affine(feat, self.w1, self.b1))
        return _affine(h, self.w2, self.b2)

    def forward_with_jacobian(self, feat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Raw output plus d(sdf)/d(feat), shape ``(..., C)``."""
        pre = _affine(feat, self.w1, self.b1)
        h = np.tanh(pre)
        out = _affine(h, self.w2, self.b2)
        # d sdf / d h = w2[0]; d h / d pre = 1 - tanh^2; d pre / d feat = w1
        dh = (1.0 - h * h) * self.w2[0]          # (..., hidden)
        dfeat = dh @ self.w1                     # (..., C)
        return out, dfeat

    @classmethod
    def random(cls, in_channels: int, hidden: int = 16, seed: int = 0,
               scale: float = 0.5) -> "FieldMlp":
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.normal(0.0, scale, (hidden, in_channels)),
            b1=rng.normal(0.0, scale, (hidden,)),
            w2=rng.normal(0.0, scale, (4, hidden)),
            b2=rng.normal(0.0, scale, (4,)),
        )

    @classmethod
    def zeros(cls, in_channels: int, hidden: int = 16) -> "FieldMlp":
        return cls(
            w1=np.zeros((hidden, in_channels)),
            b1=np.zeros(hidden),
            w2=np.zeros((4, hidden)),
            b2=np.zeros(4),
        )


@dataclass
class FieldSample:
    """Field evaluation at one or more points."""

    sdf: np.ndarray                    # (...,)
    color: np.ndarray                  # (..., 3), in [0, 1]
    gradient: Optional[np.ndarray] = None  # (..., 3) when requested

    def __post_init__(self) -> None:
        if self.gradient is not None and not np.all(np.isfinite(self.gradient)):
            raise ValueError("gradient must be finite")


@dataclass
class TriPlaneField:
    """Three feature planes plus the shared MLP head.

    ``planes`` has shape ``(3, C, R, R)``; ``bbox`` is ``(2, 3)`` with
    ``bbox[0] < bbox[1]`` per axis.
    """

    planes: np.ndarray
    mlp: FieldMlp
    bbox: np.ndarray = dc_field(
        default_factory=lambda: np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    )

    def __post_init__(self) -> None:
        self.planes = np.asarray(self.planes, dtype=np.float64)
        self.bbox = np.asarray(self.bbox, dtype=np.float64)
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ValueError(f"planes must be (3, C, R, R), got {self.planes.shape}")
        if self.planes.shape[2] != self.planes.shape[3]:
            raise ValueError("planes must be square")
        if self.planes.shape[2] < 2:
            raise ValueError("plane resolution must be at least 2")
        if not np.all(np.isfinite(self.planes)):
            raise ValueError("plane values must be finite")
        if self.bbox.shape != (2, 3):
            raise ValueError("bbox must be (2, 3)")
        if not np.all(self.bbox[1] > self.bbox[0]):
            raise ValueError("bbox must have positive extent on every axis")
        if self.mlp.in_channels != self.planes.shape[1]:
            raise ValueError("MLP input channels must match plane channels")

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    @property
    def resolution(self) -> int:
        return self.planes.shape[2]

    # Renderer-facing protocol (shared with AnalyticSdf).
    def sdf(self, p: np.ndarray) -> np.ndarray:
        return field_eval(self, p).sdf

    def evaluate(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = field_eval(self, p)
        return s.sdf, s.color

    def gradient(self, p: np.ndarray) -> np.ndarray:
        return field_gradient(self, p)

    @classmethod
    def random(cls, channels: int = 8, resolution: int = 64, seed: int = 0,
               hidden: int = 16, bbox: Optional[np.ndarray] = None) -> "TriPlaneField":
        rng = np.random.default_rng(seed)
        planes = rng.normal(0.0, 1.0, (3, channels, resolution, resolution))
        mlp = FieldMlp.random(channels, hidden=hidden, seed=seed + 1)
        kw = {} if bbox is None else {"bbox": np.asarray(bbox, dtype=np.float64)}
        return cls(planes=planes, mlp=mlp, **kw)

    @classmethod
    def zeros(cls, channels: int = 8, resolution: int = 64,
              hidden: int = 16) -> "TriPlaneField":
        return cls(
            planes=np.zeros((3, channels, resolution, resolution)),
            mlp=FieldMlp.zeros(channels, hidden=hidden),
        )


# Index pairs per plane: XY samples (x, y), XZ samples (x, z), YZ samples (y, z).
_PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def _grid_coords(field: TriPlaneField, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World points to grid coordinates in [0, R-1], plus per-axis scale.

    Returns ``(u, scale)`` where ``u`` is clamped and ``scale`` holds
    d(grid)/d(world) per axis, zeroed where the point was clamped.
    """
    r = field.resolution
    lo, hi = field.bbox[0], field.bbox[1]
    raw = (p - lo) / (hi - lo) * (r - 1)
    u = np.clip(raw, 0.0, r - 1.0)
    scale = np.where(
        (raw >= 0.0) & (raw <= r - 1.0), (r - 1) / (hi - lo), 0.0
    )
    return u, scale


def _bilinear_setup(u: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell indices and fractional offsets for clamped grid coords."""
    i0 = np.clip(np.floor(u).astype(np.int64), 0, r - 2)
    frac = u - i0
    return i0, frac


def sample_triplane(field: TriPlaneField, p: np.ndarray) -> np.ndarray:
    """Sum of the three bilinear plane samples at the projections of ``p``.

    ``p`` may be a single 3-vector or a batch ``(..., 3)``; the result has
    shape ``(..., C)``.
    """
    p = _check_points(p)
    u, _ = _grid_coords(field, p)
    r = field.resolution
    out = None
    for k, (a, b) in enumerate(_PLANE_AXES):
        ia, fa = _bilinear_setup(u[..., a], r)
        ib, fb = _bilinear_setup(u[..., b], r)
        plane = field.planes[k]                      # (C, R, R)
        v00 = plane[:, ia, ib]                       # (C, ...)
        v10 = plane[:, ia + 1, ib]
        v01 = plane[:, ia, ib + 1]
        v11 = plane[:, ia + 1, ib + 1]
        val = (
            v00 * (1 - fa) * (1 - fb)
            + v10 * fa * (1 - fb)
            + v01 * (1 - fa) * fb
            + v11 * fa * fb
        )
        out = val if out is None else out + val
    return np.moveaxis(out, 0, -1)


def _triplane_with_jacobian(
    field: TriPlaneField, p: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Feature sum plus its spatial Jacobian ``(..., C, 3)``."""
    u, scale = _grid_coords(field, p)
    r = field.resolution
    feat = None
    jac = np.zeros(p.shape[:-1] + (field.channels, 3))
    for k, (a, b) in enumerate(_PLANE_AXES):
        ia, fa = _bilinear_setup(u[..., a], r)
        ib, fb = _bilinear_setup(u[..., b], r)
        plane = field.planes[k]
        v00 = plane[:, ia, ib]
        v10 = plane[:, ia + 1, ib]
        v01 = plane[:, ia, ib + 1]
        v11 = plane[:, ia + 1, ib + 1]
        val = (
            v00 * (1 - fa) * (1 - fb)
            + v10 * fa * (1 - fb)
            + v01 * (1 - fa) * fb
            + v11 * fa * fb
        )
        feat = val if feat is None else feat + val
        dva = (v10 - v00) * (1 - fb) + (v11 - v01) * fb   # d/d(u_a), (C, ...)
        dvb = (v01 - v00) * (1 - fa) + (v11 - v10) * fa
        jac[..., a] += np.moveaxis(dva, 0, -1) * scale[..., a, None]
        jac[..., b] += np.moveaxis(dvb, 0, -1) * scale[..., b, None]
    return np.moveaxis(feat, 0, -1), jac


def field_eval(field: TriPlaneField, p: np.ndarray,
               with_gradient: bool = False) -> FieldSample:
    """Full field evaluation: tri-plane sample through the MLP head."""
    p = _check_points(p)
    if with_gradient:
        feat, jac = _triplane_with_jacobian(field, p)
        out, dfeat = field.mlp.forward_with_jacobian(feat)
        grad = np.einsum("...c,...cd->...d", dfeat, jac)
        return FieldSample(sdf=out[..., 0], color=_sigmoid(out[..., 1:4]),
                           gradient=grad)
    feat = sample_triplane(field, p)
    out = field.mlp.forward(feat)
    return FieldSample(sdf=out[..., 0], color=_sigmoid(out[..., 1:4]))


def field_gradient(field, p: np.ndarray) -> np.ndarray:
    """Exact spatial gradient of the sdf channel.

    Accepts a :class:`TriPlaneField` (chain rule through the bilinear
    interpolation and the MLP) or an :class:`AnalyticSdf` (closed form).
    Points on a cell boundary use the one-sided ``floor`` convention.
    """
    if isinstance(field, AnalyticSdf):
        return field.gradient(p)
    return field_eval(field, p, with_gradient=True).gradient


def eikonal_loss(gradients) -> float:
    """Mean of ``(|g| - 1)^2`` over the gradient list."""
    g = np.asarray(gradients, dtype=np.float64)
    if g.size == 0:
        raise ValueError("eikonal_loss requires at least one gradient")
    if g.shape[-1] != 3:
        raise ValueError("gradients must be 3-vectors")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradients must be finite")
    norms = np.linalg.norm(g.reshape(-1, 3), axis=1)
    return float(np.mean((norms - 1.0) ** 2))


def minimal_surface_loss(sdf_values) -> float:
    """Mean of ``exp(-64 |f|)``; penalizes near-zero SDF regions."""
    f = np.asarray(sdf_values, dtype=np.float64)
    if f.size == 0:
        raise ValueError("minimal_surface_loss requires at least one value")
    if not np.all(np.isfinite(f)):
        raise ValueError("sdf values must be finite")
    return float(np.mean(np.exp(-64.0 * np.abs(f))))


# ---------------------------------------------------------------------------
# Analytic SDF oracles
# ---------------------------------------------------------------------------

ColorRule = Callable[[np.ndarray], np.ndarray]


def _constant_color(rgb) -> ColorRule:
    rgb = np.asarray(rgb, dtype=np.float64)

    def rule(p: np.ndarray) -> np.ndarray:
        return np.broadcast_to(rgb, p.shape).copy()

    return rule


def _position_color(scale: float = 1.0) -> ColorRule:
    def rule(p: np.ndarray) -> np.ndarray:
        return np.clip(0.5 + 0.5 * p / scale, 0.0, 1.0)

    return rule


@dataclass
class AnalyticSdf:
    """Closed-form SDF used as a test oracle and demo geometry.

    Variants: ``sphere``, ``box``, and ``union`` of two.  Exposes the same
    ``sdf`` / ``evaluate`` / ``gradient`` protocol as :class:`TriPlaneField`
    so the renderer and mesher accept either.
    """

    kind: str
    params: dict
    color_rule: ColorRule
    bbox: np.ndarray = dc_field(
        default_factory=lambda: np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    )

    @classmethod
    def sphere(cls, center=(0.0, 0.0, 0.0), radius: float = 0.5,
               color=(0.8, 0.2, 0.2)) -> "AnalyticSdf":
        if radius <= 0:
            raise ValueError("sphere radius must be positive")
        return cls("sphere", {"center": np.asarray(center, dtype=np.float64),
                              "radius": float(radius)}, _constant_color(color))

    @classmethod
    def box(cls, center=(0.0, 0.0, 0.0), half_extents=(0.3, 0.3, 0.3),
            color=(0.2, 0.4, 0.8)) -> "AnalyticSdf":
        he = np.asarray(half_extents, dtype=np.float64)
        if np.any(he <= 0):
            raise ValueError("box half-extents must be positive")
        return cls("box", {"center": np.asarray(center, dtype=np.float64),
                           "half_extents": he}, _constant_color(color))

    @classmethod
    def union(cls, a: "AnalyticSdf", b: "AnalyticSdf") -> "AnalyticSdf":
        def rule(p: np.ndarray) -> np.ndarray:
            fa = a.sdf(p)
            fb = b.sdf(p)
            ca = a.color_rule(p)
            cb = b.color_rule(p)
            pick = (fa <= fb)[..., None]
            return np.where(pick, ca, cb)

        return cls("union", {"a": a, "b": b}, rule)

    def with_position_color(self, scale: float = 1.0) -> "AnalyticSdf":
        return AnalyticSdf(self.kind, self.params, _position_color(scale), self.bbox)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = _check_points(p)
        if self.kind == "sphere":
            d = p - self.params["center"]
            return np.linalg.norm(d, axis=-1) - self.params["radius"]
        if self.kind == "box":
            q = np.abs(p - self.params["center"]) - self.params["half_extents"]
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(np.max(q, axis=-1), 0.0)
            return outside + inside
        if self.kind == "union":
            return np.minimum(self.params["a"].sdf(p), self.params["b"].sdf(p))
        raise ValueError(f"unknown analytic sdf kind {self.kind!r}")

    def gradient(self, p: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        p = _check_points(p)
        if self.kind == "sphere":
            d = p - self.params["center"]
            n = np.linalg.norm(d, axis=-1, keepdims=True)
            return d / np.maximum(n, 1e-300)
        # Box edges/corners and union crossings have subgradients; central
        # differences are exact in each smooth region and adequate elsewhere.
        g = np.empty_like(p)
        for ax in range(3):
            dp = np.zeros(3)
            dp[ax] = eps
            g[..., ax] = (self.sdf(p + dp) - self.sdf(p - dp)) / (2 * eps)
        return g

    def evaluate(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = _check_points(p)
        return self.sdf(p), np.clip(self.color_rule(p), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Binary field file (magic "TPF1")
# ---------------------------------------------------------------------------
#
# Layout, all little-endian:
#   4 bytes   magic "TPF1"
#   2 uint32  C, R
#   6 float32 bbox (xmin, ymin, zmin, xmax, ymax, zmax)
#   3*C*R*R float32   plane data, C-order (plane, channel, i, j)
#   uint32    number of MLP layers (always 2)
#   per layer: uint32 out_dim, uint32 in_dim
#   per layer: out*in float32 weights row-major, then out float32 biases


def save_field(field: TriPlaneField, fp) -> None:
    close = False
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        fp = open(fp, "wb")
        close = True
    try:
        _write_field(field, fp)
    finally:
        if close:
            fp.close()


def _write_field(field: TriPlaneField, fp: BinaryIO) -> None:
    c, r = field.channels, field.resolution
    fp.write(_FIELD_MAGIC)
    fp.write(struct.pack("<II", c, r))
    fp.write(np.concatenate([field.bbox[0], field.bbox[1]]).astype("<f4").tobytes())
    fp.write(field.planes.astype("<f4").tobytes())
    layers = [(field.mlp.w1, field.mlp.b1), (field.mlp.w2, field.mlp.b2)]
    fp.write(struct.pack("<I", len(layers)))
    for w, _ in layers:
        fp.write(struct.pack("<II", w.shape[0], w.shape[1]))
    for w, b in layers:
        fp.write(w.astype("<f4").tobytes())
        fp.write(b.astype("<f4").tobytes())


def load_field(fp) -> TriPlaneField:
    close = False
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        fp = open(fp, "rb")
        close = True
    try:
        return _read_field(fp)
    finally:
        if close:
            fp.close()


def _read_field(fp: BinaryIO) -> TriPlaneField:
    magic = fp.read(4)
    if magic != _FIELD_MAGIC:
        raise ValueError(f"not a tri-plane field file (magic {magic!r})")
    c, r = struct.unpack("<II", fp.read(8))
    bbox = np.frombuffer(fp.read(24), dtype="<f4").astype(np.float64)
    planes = np.frombuffer(fp.read(4 * 3 * c * r * r), dtype="<f4")
    planes = planes.astype(np.float64).reshape(3, c, r, r)
    (n_layers,) = struct.unpack("<I", fp.read(4))
    if n_layers != 2:
        raise ValueError(f"expected a 2-layer MLP, file declares {n_layers}")
    dims = [struct.unpack("<II", fp.read(8)) for _ in range(n_layers)]
    tensors = []
    for out_dim, in_dim in dims:
        w = np.frombuffer(fp.read(4 * out_dim * in_dim), dtype="<f4")
        b = np.frombuffer(fp.read(4 * out_dim), dtype="<f4")
        tensors.append((w.astype(np.float64).reshape(out_dim, in_dim),
                        b.astype(np.float64)))
    mlp = FieldMlp(w1=tensors[0][0], b1=tensors[0][1],
                   w2=tensors[1][0], b2=tensors[1][1])
    return TriPlaneField(planes=planes, mlp=mlp,
                         bbox=np.stack([bbox[:3], bbox[3:]]))

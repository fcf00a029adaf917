"""Occupancy-grid accelerated NeuS rendering of SDF fields.

Per-ray pipeline: find the segments of the ray that cross occupied grid cells
(exact axis-plane traversal), place an initial sample budget uniformly over
those segments, always append a uniform tail over ``[near, far]``, add
importance samples where the interval opacity is largest, evaluate the field,
convert consecutive SDF values to interval opacities through the logistic CDF,
and alpha-composite front to back over a constant background.

All operations are deterministic and per-ray pure: rendering a sub-patch is
bit-identical to the same pixels of a full-frame render.  Sample placement
uses closed-form inversion of piecewise-linear CDFs rather than random draws.

Opacity convention: with ``Phi(x) = logistic(s * x)``, the interval opacity is

    alpha_i = max((Phi(f_prev) - Phi(f_cur)) / Phi(f_prev), 0)

which is positive when the SDF decreases across the interval, i.e. when the
ray enters the surface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

_EPS_DEPTH = 1e-12


@dataclass
class OccupancyGrid:
    """Boolean voxelization of the region that may contain the surface."""

    resolution: int
    bbox: np.ndarray          # (2, 3)
    cells: np.ndarray         # (G, G, G) bool

    def __post_init__(self) -> None:
        self.bbox = np.asarray(self.bbox, dtype=np.float64)
        self.cells = np.asarray(self.cells, dtype=bool)
        g = self.resolution
        if self.cells.shape != (g, g, g):
            raise ValueError(f"cells must be ({g}, {g}, {g})")
        if self.bbox.shape != (2, 3) or not np.all(self.bbox[1] > self.bbox[0]):
            raise ValueError("bbox must be (2, 3) with positive extent")

    @property
    def cell_sizes(self) -> np.ndarray:
        return (self.bbox[1] - self.bbox[0]) / self.resolution

    @property
    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.cells))


@dataclass
class RenderConfig:
    n_uniform: int = 24
    n_upsample: int = 24
    s: float = 200.0          # inverse standard deviation of the logistic CDF
    near: float = 0.1
    far: float = 4.0
    background: tuple = (1.0, 1.0, 1.0)
    grid_res: int = 32
    tau: float = 0.0          # extra world-unit slack in the occupancy test

    def __post_init__(self) -> None:
        if self.n_uniform < 1 or self.n_upsample < 1:
            raise ValueError("sample counts must be at least 1")
        if self.s <= 0:
            raise ValueError("inverse standard deviation must be positive")
        if not self.near < self.far:
            raise ValueError("near must be less than far")
        if self.grid_res < 2:
            raise ValueError("grid resolution must be at least 2")
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (3,) or not np.all(np.isfinite(bg)):
            raise ValueError("background must be a finite rgb triple")
        self.background = tuple(float(v) for v in bg)


@dataclass
class SampleStats:
    """Per-pixel instrumentation of the sampling budget."""

    n_march: np.ndarray     # samples placed in occupied segments
    n_tail: np.ndarray      # uniform [near, far] samples
    n_upsample: np.ndarray  # importance samples added


@dataclass
class RenderOutput:
    rgb: np.ndarray            # (h, w, 3)
    opacity: np.ndarray        # (h, w), accumulated weight in [0, 1]
    depth: np.ndarray          # (h, w), weight-averaged sample depth
    transmittance: np.ndarray  # (h, w), product of (1 - alpha)
    stats: Optional[SampleStats] = None

    def __post_init__(self) -> None:
        for arr in (self.rgb, self.opacity, self.depth, self.transmittance):
            if not np.all(np.isfinite(arr)):
                raise ValueError("render output must be finite")
        if np.any(self.opacity < -1e-9) or np.any(self.opacity > 1 + 1e-9):
            raise ValueError("opacity out of [0, 1]")


def build_occupancy_grid(field, g: int, tau: float) -> OccupancyGrid:
    """Mark cells whose center SDF magnitude is within a conservative bound.

    A cell is occupied iff ``|f(center)| <= tau + half_diagonal``; for a
    1-Lipschitz field this cannot miss a surface crossing inside the cell.
    """
    if g < 2:
        raise ValueError("grid resolution must be at least 2")
    bbox = np.asarray(field.bbox, dtype=np.float64)
    lo, hi = bbox[0], bbox[1]
    sizes = (hi - lo) / g
    centers_1d = [lo[a] + (np.arange(g) + 0.5) * sizes[a] for a in range(3)]
    xg, yg, zg = np.meshgrid(*centers_1d, indexing="ij")
    pts = np.stack([xg, yg, zg], axis=-1).reshape(-1, 3)
    f = np.asarray(field.sdf(pts)).reshape(g, g, g)
    if not np.all(np.isfinite(f)):
        raise ValueError("field not finite")
    bound = tau + 0.5 * float(np.linalg.norm(sizes))
    return OccupancyGrid(resolution=g, bbox=bbox, cells=np.abs(f) <= bound)


def neus_alpha(f_prev, f_cur, s: float):
    """Interval opacity from consecutive SDF values, clamped to [0, 1]."""
    if s <= 0:
        raise ValueError("inverse standard deviation must be positive")
    f_prev = np.asarray(f_prev, dtype=np.float64)
    f_cur = np.asarray(f_cur, dtype=np.float64)
    phi_prev = _logistic(s * f_prev)
    phi_cur = _logistic(s * f_cur)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = (phi_prev - phi_cur) / phi_prev
    alpha = np.where(phi_prev > 0.0, alpha, 0.0)
    out = np.clip(alpha, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def _logistic(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def composite(alphas, colors, depths, background):
    """Front-to-back alpha compositing over a constant background.

    Returns ``(rgb, opacity, depth)`` where ``opacity`` is the accumulated
    weight and ``depth`` the weight-averaged sample depth.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if not (len(alphas) == len(colors) == len(depths)):
        raise ValueError("alphas, colors, depths must have equal length")
    background = np.asarray(background, dtype=np.float64)
    trans = np.cumprod(1.0 - alphas)
    t_before = np.concatenate([[1.0], trans[:-1]])
    weights = t_before * alphas
    acc = float(weights.sum())
    rgb = weights @ colors + (1.0 - acc) * background
    depth = float(weights @ depths) / max(acc, _EPS_DEPTH)
    return rgb, acc, depth


# ---------------------------------------------------------------------------
# Ray / grid traversal, batched over rays
# ---------------------------------------------------------------------------


def _rowwise_searchsorted(cum: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row searchsorted: first index where cum[row, i] >= target.

    ``cum`` rows are non-decreasing; every target must not exceed its row's
    final cumulative value.
    """
    n, s = cum.shape
    big = float(max(cum.max(initial=0.0), targets.max(initial=0.0))) + 1.0
    offs = np.arange(n, dtype=np.float64)[:, None] * big
    idx = np.searchsorted((cum + offs).ravel(), (targets + offs).ravel())
    return idx.reshape(targets.shape) - (np.arange(n)[:, None] * s)


def _segment_table(grid: OccupancyGrid, origins: np.ndarray, dirs: np.ndarray,
                   near: float, far: float):
    """Occupied-cell segments of each ray within [near, far].

    Returns ``(bounds, occupied)`` where ``bounds`` is the sorted (n, S+1)
    array of segment boundaries and ``occupied`` the (n, S) mask of segments
    lying in occupied cells.
    """
    lo, hi = grid.bbox[0], grid.bbox[1]
    g = grid.resolution
    n = origins.shape[0]
    d_safe = np.where(np.abs(dirs) < 1e-300, 1e-300, dirs)
    inv = 1.0 / d_safe

    t1 = (lo - origins) * inv
    t2 = (hi - origins) * inv
    t_enter = np.maximum(np.minimum(t1, t2).max(axis=1), near)
    t_exit = np.minimum(np.maximum(t1, t2).min(axis=1), far)
    miss = t_exit <= t_enter
    t_enter = np.where(miss, far, t_enter)
    t_exit = np.where(miss, far, t_exit)

    crossings = []
    for a in range(3):
        planes = lo[a] + np.arange(g + 1) * grid.cell_sizes[a]
        crossings.append((planes[None, :] - origins[:, a, None]) * inv[:, a, None])
    ts = np.concatenate(crossings, axis=1)                      # (n, 3G+3)
    ts = np.clip(ts, t_enter[:, None], t_exit[:, None])
    bounds = np.sort(
        np.concatenate([t_enter[:, None], ts, t_exit[:, None]], axis=1), axis=1
    )

    mids = 0.5 * (bounds[:, :-1] + bounds[:, 1:])
    pts = origins[:, None, :] + mids[..., None] * dirs[:, None, :]
    cell = np.floor((pts - lo) / grid.cell_sizes).astype(np.int64)
    np.clip(cell, 0, g - 1, out=cell)
    occ = grid.cells[cell[..., 0], cell[..., 1], cell[..., 2]]
    lengths = bounds[:, 1:] - bounds[:, :-1]
    occ &= lengths > 0
    occ &= ~miss[:, None]
    return bounds, occ


def _cdf_place(bounds_lo: np.ndarray, bounds_hi: np.ndarray,
               weights: np.ndarray, count: int):
    """Place ``count`` samples per row by inverting the piecewise CDF.

    Sample ``i`` sits at cumulative weight ``W * (i + 0.5) / count`` and is
    mapped linearly into its segment.  Rows with zero total weight produce
    no samples (masked in the returned validity array).
    """
    n = weights.shape[0]
    cum = np.cumsum(weights, axis=1)
    total = cum[:, -1]
    valid_rows = total > 0
    frac = (np.arange(count, dtype=np.float64) + 0.5) / count
    targets = total[:, None] * frac[None, :]
    safe_targets = np.where(valid_rows[:, None], targets, 0.0)
    seg = _rowwise_searchsorted(cum, safe_targets)
    np.clip(seg, 0, weights.shape[1] - 1, out=seg)
    cum_prev = np.concatenate([np.zeros((n, 1)), cum[:, :-1]], axis=1)
    w_seg = np.take_along_axis(weights, seg, axis=1)
    u_off = safe_targets - np.take_along_axis(cum_prev, seg, axis=1)
    lo = np.take_along_axis(bounds_lo, seg, axis=1)
    hi = np.take_along_axis(bounds_hi, seg, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = lo + (hi - lo) * (u_off / w_seg)
    t = np.where(w_seg > 0, t, lo)
    return t, np.broadcast_to(valid_rows[:, None], t.shape).copy()


def _march_batch(grid: OccupancyGrid, origins: np.ndarray, dirs: np.ndarray,
                 near: float, far: float, n_uniform: int):
    """Marching + uniform-tail depths for a ray batch.

    Returns padded depths ``(n, 2 * n_uniform)``, a validity mask, and the
    per-ray count of marching samples.  Invalid slots hold ``+inf``; exact
    duplicates are invalidated (deduplication).
    """
    bounds, occ = _segment_table(grid, origins, dirs, near, far)
    seg_w = np.where(occ, bounds[:, 1:] - bounds[:, :-1], 0.0)
    march, march_valid = _cdf_place(bounds[:, :-1], bounds[:, 1:], seg_w, n_uniform)

    tail_frac = (np.arange(n_uniform, dtype=np.float64) + 0.5) / n_uniform
    tail = near + (far - near) * tail_frac
    tail = np.broadcast_to(tail, (origins.shape[0], n_uniform))

    depths = np.concatenate([np.where(march_valid, march, np.inf), tail], axis=1)
    depths = np.sort(depths, axis=1)
    dup = np.zeros_like(depths, dtype=bool)
    dup[:, 1:] = (depths[:, 1:] == depths[:, :-1]) & np.isfinite(depths[:, 1:])
    depths = np.sort(np.where(dup, np.inf, depths), axis=1)
    valid = np.isfinite(depths)
    n_march = march_valid.sum(axis=1) - dup.sum(axis=1)
    return depths, valid, n_march


def _upsample_batch(field, origins: np.ndarray, dirs: np.ndarray,
                    depths: np.ndarray, valid: np.ndarray, s: float,
                    n_upsample: int):
    """Importance depths proportional to interval alpha, merged and sorted."""
    safe_d = np.where(valid, depths, 0.0)
    pts = origins[:, None, :] + safe_d[..., None] * dirs[:, None, :]
    f = np.asarray(field.sdf(pts.reshape(-1, 3))).reshape(depths.shape)

    pair_valid = valid[:, :-1] & valid[:, 1:]
    alpha = neus_alpha(f[:, :-1], f[:, 1:], s)
    alpha = np.where(pair_valid, alpha, 0.0)
    # No surface response anywhere: spread by interval length instead.
    flat = alpha.sum(axis=1) == 0
    seg_len = np.where(pair_valid, safe_d[:, 1:] - safe_d[:, :-1], 0.0)
    weights = np.where(flat[:, None], seg_len, alpha)

    new_d, new_valid = _cdf_place(depths[:, :-1], depths[:, 1:], weights,
                                  n_upsample)
    merged = np.concatenate(
        [depths, np.where(new_valid, new_d, np.inf)], axis=1
    )
    merged = np.sort(merged, axis=1)
    merged_valid = np.isfinite(merged)
    n_added = new_valid.sum(axis=1)
    return merged, merged_valid, n_added


def _composite_batch(alphas: np.ndarray, colors: np.ndarray,
                     depths: np.ndarray, pair_valid: np.ndarray,
                     background: np.ndarray):
    alphas = np.where(pair_valid, alphas, 0.0)
    trans = np.cumprod(1.0 - alphas, axis=1)
    t_before = np.concatenate(
        [np.ones((alphas.shape[0], 1)), trans[:, :-1]], axis=1
    )
    weights = t_before * alphas
    acc = weights.sum(axis=1)
    safe_depths = np.where(pair_valid, depths, 0.0)
    rgb = np.einsum("ns,nsc->nc", weights, colors) + (1.0 - acc)[:, None] * background
    depth = (weights * safe_depths).sum(axis=1) / np.maximum(acc, _EPS_DEPTH)
    return rgb, acc, depth, trans[:, -1]


# ---------------------------------------------------------------------------
# Public single-ray operations
# ---------------------------------------------------------------------------


def march_ray(grid: OccupancyGrid, ray, near: float, far: float,
              n_uniform: int) -> np.ndarray:
    """Sorted, deduplicated sample depths for one ray.

    Up to ``n_uniform`` depths uniformly covering the ray's occupied-cell
    segments, plus ``n_uniform`` depths uniform in ``[near, far]``.
    """
    o = np.asarray(ray.origin, dtype=np.float64)[None, :]
    d = np.asarray(ray.direction, dtype=np.float64)[None, :]
    depths, valid, _ = _march_batch(grid, o, d, near, far, n_uniform)
    return depths[0][valid[0]]


def upsample_points(field, ray, depths, s: float, n_upsample: int) -> np.ndarray:
    """Add ``n_upsample`` importance depths and return the merged sorted set."""
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim != 1 or depths.size < 2:
        raise ValueError("upsample_points needs at least two sorted depths")
    if np.any(np.diff(depths) < 0):
        raise ValueError("input depths must be sorted ascending")
    o = np.asarray(ray.origin, dtype=np.float64)[None, :]
    d = np.asarray(ray.direction, dtype=np.float64)[None, :]
    pad = depths[None, :]
    valid = np.ones_like(pad, dtype=bool)
    merged, merged_valid, _ = _upsample_batch(field, o, d, pad, valid, s,
                                              n_upsample)
    out = merged[0][merged_valid[0]]
    # Exact float collisions are vanishingly rare; nudge to keep the output
    # strictly increasing at full size.
    for _ in range(4):
        eq = np.flatnonzero(np.diff(out) == 0)
        if eq.size == 0:
            break
        out[eq + 1] = np.nextafter(out[eq + 1], np.inf)
        out = np.sort(out)
    return out


def render_image(field, cam, cfg: RenderConfig,
                 patch: Optional[tuple] = None,
                 grid: Optional[OccupancyGrid] = None,
                 collect_stats: bool = True,
                 chunk_size: int = 4096) -> RenderOutput:
    """Render the field from a camera; optionally only a pixel sub-patch.

    ``patch`` is ``(x, y, w, h)`` in pixels of the camera's native image.
    Rendering a patch is bit-identical to the same region of the full frame.
    """
    if grid is None:
        grid = build_occupancy_grid(field, cfg.grid_res, cfg.tau)
    if patch is None:
        px, py, pw, ph = 0, 0, cam.width, cam.height
    else:
        px, py, pw, ph = (int(v) for v in patch)
        if pw <= 0 or ph <= 0 or px < 0 or py < 0 \
                or px + pw > cam.width or py + ph > cam.height:
            raise ValueError("patch must lie inside the image")

    xs = (px + np.arange(pw) + 0.5)
    ys = (py + np.arange(ph) + 0.5)
    xg, yg = np.meshgrid(xs, ys)
    d_cam = np.stack(
        [(xg - cam.cx) / cam.fx, -(yg - cam.cy) / cam.fy, -np.ones_like(xg)],
        axis=-1,
    ).reshape(-1, 3)
    dirs = d_cam @ cam.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    n_rays = dirs.shape[0]
    origins = np.broadcast_to(cam.translation, (n_rays, 3))

    bg = np.asarray(cfg.background, dtype=np.float64)
    rgb = np.empty((n_rays, 3))
    opacity = np.empty(n_rays)
    depth_img = np.empty(n_rays)
    transmittance = np.empty(n_rays)
    stats_march = np.empty(n_rays, dtype=np.int64)
    stats_up = np.empty(n_rays, dtype=np.int64)

    for start in range(0, n_rays, chunk_size):
        sl = slice(start, min(start + chunk_size, n_rays))
        o = np.ascontiguousarray(origins[sl])
        d = np.ascontiguousarray(dirs[sl])
        depths, valid, n_march = _march_batch(
            grid, o, d, cfg.near, cfg.far, cfg.n_uniform
        )
        depths, valid, n_up = _upsample_batch(
            field, o, d, depths, valid, cfg.s, cfg.n_upsample
        )
        safe_d = np.where(valid, depths, 0.0)
        pts = o[:, None, :] + safe_d[..., None] * d[:, None, :]
        f, col = field.evaluate(pts.reshape(-1, 3))
        f = np.asarray(f).reshape(depths.shape)
        col = np.asarray(col).reshape(depths.shape + (3,))

        pair_valid = valid[:, :-1] & valid[:, 1:]
        alphas = neus_alpha(f[:, :-1], f[:, 1:], cfg.s)
        r, a, dep, tr = _composite_batch(
            alphas, col[:, 1:, :], depths[:, 1:], pair_valid, bg
        )
        rgb[sl] = r
        opacity[sl] = a
        depth_img[sl] = dep
        transmittance[sl] = tr
        stats_march[sl] = n_march
        stats_up[sl] = n_up

    stats = None
    if collect_stats:
        stats = SampleStats(
            n_march=stats_march.reshape(ph, pw),
            n_tail=np.full((ph, pw), cfg.n_uniform, dtype=np.int64),
            n_upsample=stats_up.reshape(ph, pw),
        )
    return RenderOutput(
        rgb=np.clip(rgb.reshape(ph, pw, 3), 0.0, 1.0),
        opacity=np.clip(opacity.reshape(ph, pw), 0.0, 1.0),
        depth=depth_img.reshape(ph, pw),
        transmittance=transmittance.reshape(ph, pw),
        stats=stats,
    )

"""Noise schedules and dual-mode DDIM sampling.

The sampler alternates between two prediction modes while walking one shared
DDIM plan.  In 2D mode the denoiser predicts clean multi-view latents
directly (optionally with classifier-free guidance).  In 3D mode it routes
the prediction through a reconstructed tri-plane field, so the returned
latents are consistent across views; the field from the last 3D-mode step is
the pipeline's geometry output.

Mode selection is positional: step positions count down ``K, K-1, ..., 1``
along the plan and position ``k`` runs in 3D mode iff ``(k - 1) % m == 0``.
The final position is therefore always a 3D-mode step.

The denoiser predicts the clean signal ``x0`` rather than the noise; the
DDIM update reconstructs the implied noise from ``x0`` and re-applies it at
the next noise level.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from dual3d.field import TriPlaneField

ALPHA_BAR_FLOOR = 1e-5
_STRICT_SHRINK = 1.0 - 1e-8

DEFAULT_LATENT_SHAPE = (4, 4, 32, 32)   # (views, channels, h, w)


class Mode(enum.Enum):
    MODE_2D = "2d"
    MODE_3D = "3d"


def toggle_mode(t: int, m: int) -> Mode:
    """3D mode iff ``(t - 1) % m == 0``; the sampler feeds step positions."""
    if m < 1:
        raise ValueError("toggle period must be at least 1")
    if t < 1:
        raise ValueError("step index must be at least 1")
    return Mode.MODE_3D if (t - 1) % m == 0 else Mode.MODE_2D


@dataclass(frozen=True)
class ToggleSchedule:
    """Periodic mode toggle with period ``m`` over step positions."""

    m: int

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("toggle period must be at least 1")

    def mode_at(self, position: int) -> Mode:
        return toggle_mode(position, self.m)

    def modes_for_plan(self, k: int) -> list[Mode]:
        """Modes in sampling order for a plan of ``k`` steps."""
        if k < 1:
            raise ValueError("plan length must be at least 1")
        return [self.mode_at(k - i) for i in range(k)]


def cosine_alpha_bar(t, big_t: int):
    """Squared-cosine noise level, clipped to ``[ALPHA_BAR_FLOOR, 1]``."""
    if big_t < 1:
        raise ValueError("schedule length must be at least 1")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > big_t):
        raise ValueError("timestep out of range")
    offset = 0.008
    angle = ((t / big_t + offset) / (1.0 + offset)) * (np.pi / 2)
    base = np.cos((offset / (1.0 + offset)) * (np.pi / 2)) ** 2
    out = np.clip(np.cos(angle) ** 2 / base, ALPHA_BAR_FLOOR, 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class NoiseSchedule:
    """Tabulated noise levels ``alpha_bar[0..T]``, strictly decreasing.

    The raw squared-cosine curve can tie at the clip floor for the last few
    timesteps; ties are broken by shrinking each offending entry by one part
    in 1e8 so downstream inversion stays well defined.
    """

    big_t: int
    alpha_bar_table: np.ndarray

    def __post_init__(self) -> None:
        self.alpha_bar_table = np.asarray(self.alpha_bar_table, dtype=np.float64)
        if self.alpha_bar_table.shape != (self.big_t + 1,):
            raise ValueError("table must have length big_t + 1")
        tab = self.alpha_bar_table
        if tab[0] != 1.0:
            raise ValueError("alpha_bar at t=0 must be exactly 1")
        if np.any(np.diff(tab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if tab[-1] <= 0 or np.any(tab > 1.0):
            raise ValueError("alpha_bar must lie in (0, 1]")

    @classmethod
    def cosine(cls, big_t: int = 1000) -> "NoiseSchedule":
        t = np.arange(big_t + 1)
        tab = np.asarray(cosine_alpha_bar(t, big_t), dtype=np.float64)
        tab[0] = 1.0
        for i in range(1, big_t + 1):
            if tab[i] >= tab[i - 1]:
                tab[i] = tab[i - 1] * _STRICT_SHRINK
        return cls(big_t=big_t, alpha_bar_table=tab)

    def alpha_bar(self, t):
        t_arr = np.asarray(t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            raise ValueError("timestep must be integer")
        if np.any(t_arr < 0) or np.any(t_arr > self.big_t):
            raise ValueError("timestep out of range")
        out = self.alpha_bar_table[t_arr]
        return float(out) if out.ndim == 0 else out


def add_noise(x0, eps, alpha_bar):
    """Forward process: ``sqrt(a) * x0 + sqrt(1 - a) * eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    a = np.asarray(alpha_bar, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("alpha_bar must lie in [0, 1]")
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


@dataclass(frozen=True)
class DdimPlan:
    """Strictly decreasing timesteps from ``big_t`` down to 1."""

    big_t: int
    steps: tuple

    def __post_init__(self) -> None:
        steps = tuple(int(v) for v in self.steps)
        object.__setattr__(self, "steps", steps)
        if len(steps) < 1:
            raise ValueError("plan must contain at least one step")
        if steps[0] != self.big_t or steps[-1] != 1:
            raise ValueError("plan must start at big_t and end at 1")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise ValueError("plan steps must be strictly decreasing")

    def __len__(self) -> int:
        return len(self.steps)

    @classmethod
    def uniform(cls, big_t: int = 1000, k: int = 100) -> "DdimPlan":
        if not 1 <= k <= big_t:
            raise ValueError("plan length must lie in [1, big_t]")
        steps = np.round(np.linspace(big_t, 1, k)).astype(int)
        if np.any(np.diff(steps) >= 0):
            raise ValueError("plan length too dense for distinct steps")
        return cls(big_t=big_t, steps=tuple(int(v) for v in steps))


def ddim_step(z, x0_hat, alpha_bar_t, alpha_bar_prev):
    """Deterministic DDIM update from noise level ``t`` to ``prev``.

    Reconstructs the implied noise ``(z - sqrt(a_t) * x0) / sqrt(1 - a_t)``
    and recombines; at ``alpha_bar_prev == 1`` the output is exactly
    ``x0_hat``.
    """
    z = np.asarray(z, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    a_t = float(alpha_bar_t)
    a_prev = float(alpha_bar_prev)
    if not 0.0 < a_t < 1.0:
        raise ValueError("alpha_bar_t must lie in (0, 1)")
    if not 0.0 < a_prev <= 1.0:
        raise ValueError("alpha_bar_prev must lie in (0, 1]")
    eps_hat = (z - np.sqrt(a_t) * x0_hat) / np.sqrt(1.0 - a_t)
    return np.sqrt(a_prev) * x0_hat + np.sqrt(1.0 - a_prev) * eps_hat


def cfg_combine(pred_uncond, pred_cond, scale: float):
    """Classifier-free guidance: ``u + scale * (c - u)``."""
    pred_uncond = np.asarray(pred_uncond, dtype=np.float64)
    pred_cond = np.asarray(pred_cond, dtype=np.float64)
    if pred_uncond.shape != pred_cond.shape:
        raise ValueError("guidance inputs must have matching shapes")
    return pred_uncond + scale * (pred_cond - pred_uncond)


class Denoiser(Protocol):
    """Clean-signal predictor shared by both sampling modes.

    ``predict_x0`` returns ``(x0_hat, field)``; ``field`` is a tri-plane
    field in 3D mode (the 3D-consistent reconstruction behind the latents)
    and None in 2D mode.  Passing ``condition=None`` requests the
    unconditional branch.
    """

    def predict_x0(self, z: np.ndarray, t: int, alpha_bar: float, mode: Mode,
                   cameras: Optional[Sequence] = None,
                   condition: Optional[np.ndarray] = None
                   ) -> tuple[np.ndarray, Optional[TriPlaneField]]:
        ...


@dataclass
class GaussianAnalyticDenoiser:
    """Exact posterior-mean denoiser for a Gaussian prior.

    For ``x0 ~ N(mean, sigma0**2 I)`` and ``z = sqrt(a) x0 + sqrt(1-a) eps``
    the posterior mean is

        E[x0 | z] = mean + (sqrt(a) sigma0**2 / (a sigma0**2 + 1 - a))
                    * (z - sqrt(a) mean)

    which makes the whole DDIM trajectory affine in the initial noise; used
    as a closed-form oracle for sampler statistics.  Mode-agnostic: 3D-mode
    calls return a zero placeholder field alongside the prediction.
    """

    mean: np.ndarray
    sigma0: float

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.sigma0 <= 0:
            raise ValueError("prior standard deviation must be positive")
        self._placeholder = None

    def posterior_mean(self, z: np.ndarray, alpha_bar: float) -> np.ndarray:
        a = float(alpha_bar)
        if not 0.0 < a <= 1.0:
            raise ValueError("alpha_bar must lie in (0, 1]")
        var = self.sigma0 ** 2
        gain = np.sqrt(a) * var / (a * var + 1.0 - a)
        return self.mean + gain * (np.asarray(z, dtype=np.float64)
                                   - np.sqrt(a) * self.mean)

    def predict_x0(self, z, t, alpha_bar, mode,
                   cameras=None, condition=None):
        x0 = self.posterior_mean(z, alpha_bar)
        if mode is Mode.MODE_3D:
            if self._placeholder is None:
                self._placeholder = TriPlaneField.zeros(channels=4, resolution=8)
            return x0, self._placeholder
        return x0, None


def sample(denoiser, schedule: NoiseSchedule, plan: DdimPlan,
           toggle: ToggleSchedule, cameras=None, condition=None,
           seed: int = 0, latent_shape: tuple = DEFAULT_LATENT_SHAPE,
           z_init: Optional[np.ndarray] = None, cfg_scale: float = 7.5,
           ) -> tuple[np.ndarray, TriPlaneField]:
    """Run the dual-mode DDIM loop; returns final latents and the field
    produced by the last 3D-mode step.

    ``z_init`` overrides the seeded standard-normal initial noise (used for
    antithetic and common-noise experiments).  Guidance applies only in 2D
    mode and only when a condition is given with ``cfg_scale != 1``.
    """
    if plan.big_t != schedule.big_t:
        raise ValueError("plan and schedule lengths disagree")
    if z_init is None:
        z = np.random.default_rng(seed).standard_normal(latent_shape)
    else:
        z = np.array(z_init, dtype=np.float64)
        if z.shape != tuple(latent_shape):
            raise ValueError("z_init shape must match latent_shape")

    k_total = len(plan)
    last_field: Optional[TriPlaneField] = None
    for i, t in enumerate(plan.steps):
        position = k_total - i
        mode = toggle.mode_at(position)
        a_t = schedule.alpha_bar(t)
        t_prev = plan.steps[i + 1] if i + 1 < k_total else 0
        a_prev = schedule.alpha_bar(t_prev)

        use_cfg = (mode is Mode.MODE_2D and condition is not None
                   and cfg_scale != 1.0)
        if use_cfg:
            pred_c, _ = denoiser.predict_x0(z, t, a_t, mode,
                                            cameras=cameras,
                                            condition=condition)
            pred_u, _ = denoiser.predict_x0(z, t, a_t, mode,
                                            cameras=cameras, condition=None)
            x0_hat = cfg_combine(pred_u, pred_c, cfg_scale)
        else:
            x0_hat, field = denoiser.predict_x0(z, t, a_t, mode,
                                                cameras=cameras,
                                                condition=condition)
            if mode is Mode.MODE_3D:
                if field is not None:
                    last_field = field
        z = ddim_step(z, x0_hat, a_t, a_prev)

    if last_field is None:
        raise RuntimeError("no 3D-consistent output: the toggle never ran a "
                           "3D-mode step that produced a field")
    return z, last_field


# ---------------------------------------------------------------------------
# Latent file I/O: raw float32 blob plus a JSON sidecar describing the shape.
# ---------------------------------------------------------------------------


def save_latents(path, latents: np.ndarray, t: int = 0) -> None:
    """Write latents as little-endian float32 with a ``.json`` sidecar."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 4:
        raise ValueError("latents must be (views, channels, h, w)")
    path = str(path)
    latents.astype("<f4").tofile(path)
    views, channels, h, w = latents.shape
    sidecar = {"views": views, "channels": channels, "h": h, "w": w, "t": int(t)}
    with open(path + ".json", "w", encoding="utf-8") as fp:
        json.dump(sidecar, fp, sort_keys=True)
        fp.write("\n")


def load_latents(path) -> tuple[np.ndarray, int]:
    path = str(path)
    with open(path + ".json", "r", encoding="utf-8") as fp:
        meta = json.load(fp)
    shape = (meta["views"], meta["channels"], meta["h"], meta["w"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError("latent blob size does not match its sidecar")
    return data.reshape(shape).astype(np.float64), int(meta.get("t", 0))

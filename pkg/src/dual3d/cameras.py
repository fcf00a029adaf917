"""Pinhole cameras, ray generation, Plucker encoding, and the evaluation rig.

Axis convention (used everywhere in the package): world is right-handed with
Y up; the camera frame is right-handed with the camera looking down its own
-Z axis, +X to the right, +Y up.  Image rows increase downward, so pixel y
maps to camera -Y.  Rays are generated through pixel centers.

Azimuth is measured about +Y starting from +X (a positive azimuth rotates +X
toward -Z); elevation is measured from the horizontal plane toward +Y.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_FOV_DEG = 50.0  # vertical field of view for rig cameras
DEFAULT_RIG_IMAGE_SIZE = 256

RIG_AZIMUTHS_DEG = (0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0)
RIG_ELEVATIONS_DEG = (-30.0, 0.0, 30.0)


@dataclass
class Camera:
    """Pinhole camera with a camera-to-world pose."""

    rotation: np.ndarray     # (3, 3) camera-to-world
    translation: np.ndarray  # (3,) camera center in world units
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if self.translation.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        if not np.all(np.isfinite(self.rotation)) or not np.all(
            np.isfinite(self.translation)
        ):
            raise ValueError("camera pose must be finite")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (error {err:.2e})")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def forward(self) -> np.ndarray:
        """World-space viewing direction (camera -Z)."""
        return -self.rotation[:, 2]

    def to_json_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Camera":
        return cls(
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass
class Ray:
    origin: np.ndarray     # (3,)
    direction: np.ndarray  # (3,), unit

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length (|d| = {n})")


@dataclass
class PluckerRay:
    """Six-component ray encoding ``(o x d, d)``."""

    moment: np.ndarray     # (3,)
    direction: np.ndarray  # (3,), unit

    def __post_init__(self) -> None:
        self.moment = np.asarray(self.moment, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(float(self.moment @ self.direction)) > 1e-9:
            raise ValueError("Plucker moment must be orthogonal to direction")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.moment, self.direction])


def _ray_grid(cam: Camera, res: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for a ``(w, h)`` grid of pixel centers.

    Returns ``(origins, directions)`` of shape ``(h, w, 3)``.  The grid is
    resampled from the camera's native resolution, so any positive size
    yields rays through the centers of the correspondingly scaled pixels.
    """
    w, h = res
    if w <= 0 or h <= 0:
        raise ValueError("ray grid resolution must be positive")
    sx = cam.width / w
    sy = cam.height / h
    xs = (np.arange(w) + 0.5) * sx          # image-space x of pixel centers
    ys = (np.arange(h) + 0.5) * sy
    xg, yg = np.meshgrid(xs, ys)            # (h, w)
    d_cam = np.stack(
        [
            (xg - cam.cx) / cam.fx,
            -(yg - cam.cy) / cam.fy,
            -np.ones_like(xg),
        ],
        axis=-1,
    )
    d_world = d_cam @ cam.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.translation, d_world.shape).copy()
    return origins, d_world


def generate_rays(cam: Camera, res: tuple[int, int]) -> list[list[Ray]]:
    """One ray per pixel center, row-major ``[row][col]``."""
    origins, dirs = _ray_grid(cam, res)
    h, w = dirs.shape[:2]
    return [
        [Ray(origin=origins[j, i], direction=dirs[j, i]) for i in range(w)]
        for j in range(h)
    ]


def plucker_encode(r: Ray) -> PluckerRay:
    """``(o x d, d)``; invariant to sliding the origin along the ray."""
    return PluckerRay(moment=np.cross(r.origin, r.direction),
                      direction=r.direction)


def latent_rays(cam: Camera, latent_res: tuple[int, int]) -> np.ndarray:
    """Plucker encodings for a latent-resolution grid, channel-stacked.

    Returns ``(6, h, w)``: moment channels first, then direction, matching
    the conditioning layout consumed by the denoising network.
    """
    origins, dirs = _ray_grid(cam, latent_res)
    moments = np.cross(origins, dirs)
    enc = np.concatenate([moments, dirs], axis=-1)   # (h, w, 6)
    return np.moveaxis(enc, -1, 0)


def look_at_camera(
    position,
    target=(0.0, 0.0, 0.0),
    up=(0.0, 1.0, 0.0),
    fov_deg: float = DEFAULT_FOV_DEG,
    width: int = DEFAULT_RIG_IMAGE_SIZE,
    height: int = DEFAULT_RIG_IMAGE_SIZE,
) -> Camera:
    """Camera at ``position`` looking at ``target`` with the given vertical FOV."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    back = position - target
    dist = np.linalg.norm(back)
    if dist < 1e-12:
        raise ValueError("camera position coincides with the look-at target")
    z_cam = back / dist
    x_cam = np.cross(up, z_cam)
    nx = np.linalg.norm(x_cam)
    if nx < 1e-9:
        raise ValueError("up vector is parallel to the viewing direction")
    x_cam /= nx
    y_cam = np.cross(z_cam, x_cam)
    fy = (height / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return Camera(
        rotation=np.stack([x_cam, y_cam, z_cam], axis=1),
        translation=position,
        fx=fy,
        fy=fy,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )


def camera_on_sphere(
    radius: float,
    azimuth_deg: float,
    elevation_deg: float,
    fov_deg: float = DEFAULT_FOV_DEG,
    width: int = DEFAULT_RIG_IMAGE_SIZE,
    height: int = DEFAULT_RIG_IMAGE_SIZE,
) -> Camera:
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    position = np.array(
        [
            radius * math.cos(el) * math.cos(az),
            radius * math.sin(el),
            -radius * math.cos(el) * math.sin(az),
        ]
    )
    return look_at_camera(position, fov_deg=fov_deg, width=width, height=height)


def eval_camera_rig(
    radius: float,
    fov_deg: float = DEFAULT_FOV_DEG,
    width: int = DEFAULT_RIG_IMAGE_SIZE,
    height: int = DEFAULT_RIG_IMAGE_SIZE,
) -> list[Camera]:
    """24 fixed look-at cameras on a sphere around the origin.

    8 azimuths x 3 elevations, ordered azimuth-major with elevation inner:
    ``(0, -30), (0, 0), (0, 30), (45, -30), ...`` degrees.
    """
    if radius <= 0:
        raise ValueError("rig radius must be positive")
    return [
        camera_on_sphere(radius, az, el, fov_deg=fov_deg, width=width, height=height)
        for az in RIG_AZIMUTHS_DEG
        for el in RIG_ELEVATIONS_DEG
    ]


def save_cameras(cams: list[Camera], path) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        json.dump([c.to_json_dict() for c in cams], fp, indent=2)


def load_cameras(path) -> list[Camera]:
    with open(path, "r", encoding="utf-8") as fp:
        data = json.load(fp)
    if isinstance(data, dict):
        data = [data]
    return [Camera.from_json_dict(d) for d in data]

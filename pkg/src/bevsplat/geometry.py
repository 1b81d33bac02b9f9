"""Camera models, pixel back-projection, and the metric BEV grid.

World frame (OpenCV convention, right-handed): +X to the camera's right,
+Y down, +Z along the camera's forward view. The BEV camera sits above
the scene (numerically smaller Y) looking along +Y, so the BEV image
plane is the world XZ plane: grid rows run along +Z, columns along +X,
and a point's Y coordinate is its depth from the BEV camera.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


@dataclass(frozen=True)
class PanoramaGeometry:
    """Equirectangular panorama; pixels map to (azimuth, polar) angles."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError(f"panorama needs width,height >= 2, got {self.width}x{self.height}")


Camera = PinholeIntrinsics | PanoramaGeometry


@dataclass(frozen=True)
class BevGridSpec:
    """Square metric grid on the world XZ plane.

    ``origin`` is the world (x, z) of the center of cell (0, 0); cell
    (r, c) is centered at x = origin_x + c*beta, z = origin_z + r*beta.
    """

    size: int
    beta: float  # meters per cell
    origin_x: float
    origin_z: float

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.size < 1:
            raise ValueError(f"size must be >= 1, got {self.size}")

    @classmethod
    def centered(cls, size: int, beta: float) -> "BevGridSpec":
        """Grid with the camera (world origin) at cell (size/2, size/2)."""
        half = beta * size / 2.0
        return cls(size=size, beta=beta, origin_x=-half, origin_z=-half)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World (x, z) coordinates of all cell centers, each [size, size]."""
        idx = np.arange(self.size, dtype=np.float64)
        z = self.origin_z + idx * self.beta
        x = self.origin_x + idx * self.beta
        zz, xx = np.meshgrid(z, x, indexing="ij")
        return xx, zz


def backproject_pinhole(u, v, depth, k: PinholeIntrinsics):
    """Lift pixel (u, v) at Z-depth ``depth`` to a world point.

    Returns K^-1 * depth * [u, v, 1]^T; accepts scalars or arrays.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (u - k.cx) / k.fx * depth
    y = (v - k.cy) / k.fy * depth
    return np.stack(np.broadcast_arrays(x, y, depth), axis=-1)


def panorama_direction(u_ang, v_ang):
    """Unit ray direction for azimuth ``u_ang`` and polar angle ``v_ang``.

    v_ang = 0 points straight up (-Y), v_ang = pi straight down.
    """
    u_ang = np.asarray(u_ang, dtype=np.float64)
    v_ang = np.asarray(v_ang, dtype=np.float64)
    sv = np.sin(v_ang)
    x = -sv * np.cos(u_ang)
    y = -np.cos(v_ang)
    z = -sv * np.sin(u_ang)
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def backproject_panorama(u_ang, v_ang, depth):
    """Scale the panorama ray direction by ``depth`` (euclidean range)."""
    v_arr = np.asarray(v_ang, dtype=np.float64)
    if np.any(v_arr < 0) or np.any(v_arr > math.pi):
        raise ValueError(f"polar angle must lie in [0, pi], got {v_ang}")
    d = panorama_direction(u_ang, v_arr)
    return d * np.asarray(depth, dtype=np.float64)[..., None]


def panorama_pixel_to_angles(u_px, v_px, g: PanoramaGeometry):
    """Pixel-center mapping: u_ang = 2*pi*(u+0.5)/W, v_ang = pi*(v+0.5)/H."""
    u_px = np.asarray(u_px, dtype=np.float64)
    v_px = np.asarray(v_px, dtype=np.float64)
    if np.any(u_px < 0) or np.any(u_px >= g.width) or np.any(v_px < 0) or np.any(v_px >= g.height):
        raise ValueError(f"pixel outside {g.width}x{g.height} panorama")
    u_ang = 2.0 * math.pi * (u_px + 0.5) / g.width
    v_ang = math.pi * (v_px + 0.5) / g.height
    return u_ang, v_ang


def world_to_bev_cell(p, grid: BevGridSpec):
    """Orthographic drop to continuous (row, col) cell coordinates.

    Ignores Y; results may lie outside [0, size).
    """
    p = np.asarray(p, dtype=np.float64)
    row = (p[..., 2] - grid.origin_z) / grid.beta
    col = (p[..., 0] - grid.origin_x) / grid.beta
    return np.stack(np.broadcast_arrays(row, col), axis=-1)


def camera_rays(camera: Camera, height: int | None = None, width: int | None = None):
    """Per-pixel ray directions [H, W, 3] plus the depth convention.

    Pinhole directions have unit Z (depth = Z distance); panorama
    directions are unit norm (depth = euclidean range).
    """
    if isinstance(camera, PanoramaGeometry):
        h, w = camera.height, camera.width
        uu, vv = np.meshgrid(np.arange(w), np.arange(h))
        u_ang, v_ang = panorama_pixel_to_angles(uu, vv, camera)
        return panorama_direction(u_ang, v_ang)
    if height is None or width is None:
        raise ValueError("pinhole cameras need explicit image height and width")
    uu, vv = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack(
        [(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones_like(uu)], axis=-1
    )


def backproject_map(camera: Camera, depth: np.ndarray) -> np.ndarray:
    """Lift a full H x W depth map to world points [H, W, 3]."""
    h, w = depth.shape
    rays = camera_rays(camera, height=h, width=w)
    return rays * np.asarray(depth, dtype=np.float64)[..., None]


def camera_from_config(cfg: dict) -> Camera:
    kind = cfg.get("kind")
    if kind == "pinhole":
        return PinholeIntrinsics(fx=cfg["fx"], fy=cfg["fy"], cx=cfg["cx"], cy=cfg["cy"])
    if kind == "panorama":
        return PanoramaGeometry(width=int(cfg["width"]), height=int(cfg["height"]))
    raise ValueError(f"camera.kind must be 'pinhole' or 'panorama', got {kind!r}")


def grid_from_config(cfg: dict) -> BevGridSpec:
    size = int(cfg["size"])
    beta = float(cfg["beta"])
    if "origin_x" in cfg or "origin_z" in cfg:
        return BevGridSpec(size=size, beta=beta, origin_x=float(cfg["origin_x"]),
                           origin_z=float(cfg["origin_z"]))
    return BevGridSpec.centered(size, beta)


def load_config(path: str | Path) -> dict:
    with open(path) as f:
        return json.load(f)

"""Comparison BEV synthesis methods: flat-ground IPM and direct projection.

IPM assumes every ground pixel lies on the plane Y = +cam_height and
back-casts BEV cell centers into the camera; direct projection drops each
primitive's mean into a single cell with a highest-point-wins z-buffer.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import BevGridSpec, Camera, PanoramaGeometry, PinholeIntrinsics
from .primitives import PrimitiveSet


def bilinear_sample(
    features: np.ndarray, u: np.ndarray, v: np.ndarray, wrap_u: bool = False
) -> np.ndarray:
    """Sample [C, H, W] features at continuous pixel coords (u, v) -> [C, ...].

    v must lie in [0, H-1]; u may wrap around the azimuth seam when
    ``wrap_u`` is set, otherwise it must lie in [0, W-1].
    """
    _, h, w = features.shape
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0
    v0 = np.clip(v0, 0, h - 1)
    v1 = np.clip(v0 + 1, 0, h - 1)
    if wrap_u:
        u0 = np.mod(u0, w)
        u1 = np.mod(u0 + 1, w)
    else:
        u0 = np.clip(u0, 0, w - 1)
        u1 = np.clip(u0 + 1, 0, w - 1)
    f00 = features[:, v0, u0]
    f01 = features[:, v0, u1]
    f10 = features[:, v1, u0]
    f11 = features[:, v1, u1]
    return (
        f00 * (1 - fu) * (1 - fv)
        + f01 * fu * (1 - fv)
        + f10 * (1 - fu) * fv
        + f11 * fu * fv
    )


def ipm_pixel_coords(
    camera: Camera, cam_height: float, grid: BevGridSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image coordinates (u, v) of each BEV cell's ground-plane point.

    Returns (u, v, valid), each [S, S]. Pinhole cells are valid when the
    plane point has positive forward depth and projects inside the image;
    panorama angles are always valid (full sphere).
    """
    if cam_height <= 0:
        raise ValueError(f"cam_height must be positive, got {cam_height}")
    xx, zz = grid.cell_centers()
    if isinstance(camera, PinholeIntrinsics):
        # plane point (x, +h, z) seen from the camera at the origin
        with np.errstate(divide="ignore", invalid="ignore"):
            u = camera.fx * xx / zz + camera.cx
            v = camera.fy * cam_height / zz + camera.cy
        valid = (zz > 0) & np.isfinite(u) & np.isfinite(v)
        return u, v, valid
    assert isinstance(camera, PanoramaGeometry)
    d = np.stack([xx, np.full_like(xx, cam_height), zz], axis=-1)
    norm = np.linalg.norm(d, axis=-1)
    norm = np.where(norm < 1e-12, 1.0, norm)
    dn = d / norm[..., None]
    v_ang = np.arccos(np.clip(-dn[..., 1], -1.0, 1.0))
    u_ang = np.mod(np.arctan2(-dn[..., 2], -dn[..., 0]), 2 * math.pi)
    u = u_ang * camera.width / (2 * math.pi) - 0.5
    v = v_ang * camera.height / math.pi - 0.5
    return u, v, np.ones_like(u, dtype=bool)


def ipm_project(
    features: np.ndarray, camera: Camera, cam_height: float, grid: BevGridSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Flat-plane inverse perspective mapping.

    Args:
        features: ground-view feature map [C, H, W].
        camera: the ground camera model.
        cam_height: camera height above the ground plane, meters.
        grid: target BEV grid.

    Returns:
        (bev [C, S, S], valid [S, S] bool); invalid cells are zero.
    """
    features = np.asarray(features, dtype=np.float64)
    _, h, w = features.shape
    u, v, valid = ipm_pixel_coords(camera, cam_height, grid)
    wrap = isinstance(camera, PanoramaGeometry)
    if wrap:
        v = np.clip(v, 0.0, h - 1.0)
    else:
        valid = valid & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u_s = np.where(valid, u, 0.0)
    v_s = np.where(valid, v, 0.0)
    out = bilinear_sample(features, u_s, v_s, wrap_u=wrap)
    out *= valid[None, :, :]
    return out, valid


def direct_project(
    points: PrimitiveSet, grid: BevGridSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Project primitive means as bare points; highest point per cell wins.

    The winning point writes its confidence-weighted feature; ties on
    height go to the smaller primitive index. Returns (map [C, S, S],
    occupancy [S, S] bool).
    """
    size = grid.size
    c_dim = points.feature_dim
    out = np.zeros((c_dim, size, size), dtype=np.float64)
    occ = np.zeros((size, size), dtype=bool)
    n = len(points)
    if n == 0:
        return out, occ
    rows = np.floor((points.means[:, 2] - grid.origin_z) / grid.beta + 0.5).astype(np.int64)
    cols = np.floor((points.means[:, 0] - grid.origin_x) / grid.beta + 0.5).astype(np.int64)
    inside = (rows >= 0) & (rows < size) & (cols >= 0) & (cols < size)
    idx = np.nonzero(inside)[0]
    if idx.size == 0:
        return out, occ
    order = np.lexsort((idx, points.means[idx, 1]))  # ascending height, then id
    ranked = idx[order]
    flat = rows[ranked] * size + cols[ranked]
    _, first = np.unique(flat, return_index=True)
    winners = ranked[first]
    feats = points.features[winners] * points.confidences[winners][:, None]
    out[:, rows[winners], cols[winners]] = feats.T
    occ[rows[winners], cols[winners]] = True
    return out, occ

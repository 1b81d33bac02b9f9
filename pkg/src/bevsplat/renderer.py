"""Orthographic BEV splatting: forward blending and the analytic backward.

Primitives are dropped onto the world XZ plane (the BEV image), sorted by
height (ascending world Y = nearest to the downward-looking BEV camera
first), and alpha-composited front to back:

    F_bev = sum_b f_b * alpha_b * T_b,   T_b = prod_{j<b} (1 - alpha_j)

with alpha_b = min(alpha_clamp, O_b * exp(-1/2 d^T Lambda d)). The
backward pass returns gradients for every splat parameter; its feature
rule is dL/df_b = upstream * T_b * alpha_b and its opacity rule follows
dL/dalpha_b = upstream * T_b * (f_b - f_behind), with the geometric
parameters chained through the Gaussian kernel derivative.

A naive per-cell reference renderer (no culling, full scan) serves as the
oracle for the tiled path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .geometry import BevGridSpec
from .primitives import PrimitiveSet, covariance_backward, build_covariance
from .tensor_io import save_tensor

PROJECTION_DILATION = 0.3  # cell^2 low-pass added to the projected covariance
FOOTPRINT_SIGMAS = 3.0  # Splat2D.radius is this many std devs of the largest axis


@dataclass(frozen=True)
class RenderConfig:
    """Culling thresholds for the tiled renderer.

    Defaults keep culling losses below the 1e-5 oracle-agreement budget;
    ``classic()`` gives the conventional splatting constants (1/255 alpha
    floor, 1e-4 transmittance stop, hard 3-sigma footprint), which trade
    oracle agreement for a little speed.
    """

    alpha_clamp: float = 0.99
    alpha_floor: float = 1e-8
    transmittance_floor: float = 1e-10
    footprint_sigma: float | None = None  # None: derive footprint from alpha_floor

    @classmethod
    def classic(cls) -> "RenderConfig":
        return cls(alpha_floor=1.0 / 255.0, transmittance_floor=1e-4, footprint_sigma=3.0)


DEFAULT_CONFIG = RenderConfig()


@dataclass(frozen=True)
class Splat2D:
    """A primitive projected onto the BEV plane, in cell units."""

    mean2: np.ndarray  # (row, col) continuous cell coordinates
    inv_cov2: np.ndarray  # [2, 2] symmetric positive-definite, cell^-2
    base_opacity: float
    feature: np.ndarray  # [C]
    confidence: float
    sort_key: float  # world Y of the 3D mean
    radius: float  # 3-sigma footprint bound, cells
    id: int


class SplatBatch:
    """Packed arrays for a set of Splat2D, in source-primitive order."""

    def __init__(self, mean2, cov2, conic, opacity, features, confidences, sort_key, radius, ids):
        self.mean2 = mean2  # [N, 2] (row, col)
        self.cov2 = cov2  # [N, 2, 2] projected covariance incl. dilation
        self.conic = conic  # [N, 3] = (a, b, c) of the inverse covariance
        self.opacity = opacity  # [N]
        self.features = features  # [N, C]
        self.confidences = confidences  # [N]
        self.sort_key = sort_key  # [N]
        self.radius = radius  # [N]
        self.ids = ids  # [N]

    def __len__(self) -> int:
        return self.mean2.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def inv_cov_matrices(self) -> np.ndarray:
        a, b, c = self.conic[:, 0], self.conic[:, 1], self.conic[:, 2]
        out = np.empty((len(self), 2, 2), dtype=np.float64)
        out[:, 0, 0] = a
        out[:, 0, 1] = b
        out[:, 1, 0] = b
        out[:, 1, 1] = c
        return out

    def __getitem__(self, i: int) -> Splat2D:
        return Splat2D(
            mean2=self.mean2[i].copy(),
            inv_cov2=self.inv_cov_matrices()[i],
            base_opacity=float(self.opacity[i]),
            feature=self.features[i].copy(),
            confidence=float(self.confidences[i]),
            sort_key=float(self.sort_key[i]),
            radius=float(self.radius[i]),
            id=int(self.ids[i]),
        )

    def permuted(self, perm: np.ndarray) -> "SplatBatch":
        """Reordered copy; ids travel with their splats."""
        return SplatBatch(
            self.mean2[perm],
            self.cov2[perm],
            self.conic[perm],
            self.opacity[perm],
            self.features[perm],
            self.confidences[perm],
            self.sort_key[perm],
            self.radius[perm],
            self.ids[perm],
        )


@dataclass
class BevOutput:
    f_bev: np.ndarray  # [C, S, S]
    c_bev: np.ndarray  # [S, S]
    final_t: np.ndarray  # [S, S] residual transmittance


@dataclass
class GradientBundle:
    """Per-splat gradients, aligned with the source primitive order."""

    d_feature: np.ndarray  # [N, C]
    d_confidence: np.ndarray  # [N]
    d_opacity_base: np.ndarray  # [N]
    d_mean2: np.ndarray  # [N, 2]
    d_inv_cov2: np.ndarray  # [N, 2, 2] symmetric


def _project_arrays(means, scales, quats, grid: BevGridSpec):
    """Shared projection math; returns (mean2, cov2, conic, radius)."""
    beta2 = grid.beta * grid.beta
    mean2 = np.stack(
        [(means[:, 2] - grid.origin_z) / grid.beta, (means[:, 0] - grid.origin_x) / grid.beta],
        axis=1,
    )
    cov3 = build_covariance(scales, quats)
    cov3 = cov3 if cov3.ndim == 3 else cov3[None]
    # orthographic top-down view: keep the XZ block (rows are z, cols x)
    cov2 = np.empty((cov3.shape[0], 2, 2), dtype=np.float64)
    cov2[:, 0, 0] = cov3[:, 2, 2] / beta2 + PROJECTION_DILATION
    cov2[:, 0, 1] = cov3[:, 2, 0] / beta2
    cov2[:, 1, 0] = cov3[:, 0, 2] / beta2
    cov2[:, 1, 1] = cov3[:, 0, 0] / beta2 + PROJECTION_DILATION
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = FOOTPRINT_SIGMAS * np.sqrt(lam_max)
    return mean2, cov2, conic, radius


def project_batch(pset: PrimitiveSet, grid: BevGridSpec) -> SplatBatch:
    """Project a whole PrimitiveSet orthographically onto the BEV grid."""
    mean2, cov2, conic, radius = _project_arrays(pset.means, pset.scales, pset.quats, grid)
    return SplatBatch(
        mean2=mean2,
        cov2=cov2,
        conic=conic,
        opacity=pset.opacities.astype(np.float64),
        features=np.ascontiguousarray(pset.features, dtype=np.float64),
        confidences=pset.confidences.astype(np.float64),
        sort_key=pset.means[:, 1].astype(np.float64),
        radius=radius,
        ids=np.arange(len(pset), dtype=np.int64),
    )


def project_to_bev(p, grid: BevGridSpec, id: int = 0) -> Splat2D:
    """Project one GaussianPrimitive; see project_batch for whole sets."""
    mean2, cov2, conic, radius = _project_arrays(
        p.mean[None, :], p.scale[None, :], p.rotation[None, :], grid
    )
    inv_cov2 = np.array(
        [[conic[0, 0], conic[0, 1]], [conic[0, 1], conic[0, 2]]], dtype=np.float64
    )
    return Splat2D(
        mean2=mean2[0],
        inv_cov2=inv_cov2,
        base_opacity=float(p.opacity),
        feature=np.asarray(p.feature, dtype=np.float64),
        confidence=float(p.confidence),
        sort_key=float(p.mean[1]),
        radius=float(radius[0]),
        id=id,
    )


def _coerce_batch(splats, feature_dim: int | None) -> SplatBatch:
    if isinstance(splats, SplatBatch):
        return splats
    items: Sequence[Splat2D] = list(splats)
    if not items:
        if feature_dim is None:
            raise ValueError("feature_dim is required for an empty splat list")
        empty = np.zeros((0, feature_dim), dtype=np.float64)
        z = np.zeros(0, dtype=np.float64)
        return SplatBatch(
            np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, 3)), z, empty, z, z, z,
            np.zeros(0, dtype=np.int64),
        )
    mean2 = np.stack([s.mean2 for s in items]).astype(np.float64)
    inv = np.stack([s.inv_cov2 for s in items]).astype(np.float64)
    conic = np.stack(
        [inv[:, 0, 0], 0.5 * (inv[:, 0, 1] + inv[:, 1, 0]), inv[:, 1, 1]], axis=1
    )
    cov2 = np.linalg.inv(0.5 * (inv + inv.transpose(0, 2, 1)))
    return SplatBatch(
        mean2=mean2,
        cov2=cov2,
        conic=conic,
        opacity=np.array([s.base_opacity for s in items], dtype=np.float64),
        features=np.stack([s.feature for s in items]).astype(np.float64),
        confidences=np.array([s.confidence for s in items], dtype=np.float64),
        sort_key=np.array([s.sort_key for s in items], dtype=np.float64),
        radius=np.array([s.radius for s in items], dtype=np.float64),
        ids=np.array([s.id for s in items], dtype=np.int64),
    )


def _feature_dim(batch: SplatBatch, feature_dim: int | None) -> int:
    if feature_dim is not None and len(batch) and feature_dim != batch.feature_dim:
        raise ValueError(
            f"feature_dim {feature_dim} disagrees with splat features {batch.feature_dim}"
        )
    return batch.feature_dim if len(batch) else (feature_dim or batch.feature_dim)


def _depth_order(batch: SplatBatch) -> np.ndarray:
    """Front-to-back order: ascending sort key, ties by ascending id."""
    return np.lexsort((batch.ids, batch.sort_key))


def _cull_radius(batch: SplatBatch, config: RenderConfig, size: int) -> np.ndarray:
    """Per-splat footprint radius in cells for the given culling config."""
    sigma_max = batch.radius / FOOTPRINT_SIGMAS
    if config.footprint_sigma is not None:
        return config.footprint_sigma * sigma_max
    if config.alpha_floor <= 0.0:
        return np.full(len(batch), size * math.sqrt(2.0) + 1.0)
    ratio = batch.opacity / config.alpha_floor
    r = np.zeros(len(batch), dtype=np.float64)
    live = ratio > 1.0
    r[live] = sigma_max[live] * np.sqrt(2.0 * np.log(ratio[live]))
    return r


def _bin_tiles(batch: SplatBatch, order, cull_r, size: int):
    """Assign sorted splats to 16x16 tiles; entries stay depth-sorted per tile."""
    n_tiles_c = (size + _kernels.TILE - 1) // _kernels.TILE
    n_tiles = n_tiles_c * n_tiles_c
    mr = batch.mean2[order, 0]
    mc = batch.mean2[order, 1]
    rad = cull_r[order]
    tr0 = np.floor((mr - rad) / _kernels.TILE).astype(np.int64)
    tr1 = np.floor((mr + rad) / _kernels.TILE).astype(np.int64)
    tc0 = np.floor((mc - rad) / _kernels.TILE).astype(np.int64)
    tc1 = np.floor((mc + rad) / _kernels.TILE).astype(np.int64)
    dead = (rad <= 0) | (tr1 < 0) | (tc1 < 0) | (tr0 >= n_tiles_c) | (tc0 >= n_tiles_c)
    tr0 = np.clip(tr0, 0, n_tiles_c - 1)
    tr1 = np.clip(tr1, 0, n_tiles_c - 1)
    tc0 = np.clip(tc0, 0, n_tiles_c - 1)
    tc1 = np.clip(tc1, 0, n_tiles_c - 1)
    tr1 = np.where(dead, tr0 - 1, tr1)  # empty rect for dead splats
    counts = np.maximum(tr1 - tr0 + 1, 0) * np.maximum(tc1 - tc0 + 1, 0)
    offsets = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    tile_ids = np.empty(total, dtype=np.int64)
    entry_idx = np.empty(total, dtype=np.int64)
    if total:
        _kernels.fill_tile_entries(tr0, tr1, tc0, tc1, offsets[:-1], n_tiles_c, tile_ids, entry_idx)
        perm = np.argsort(tile_ids, kind="stable")
        tile_ids = tile_ids[perm]
        entry_idx = entry_idx[perm]
    tile_starts = np.searchsorted(tile_ids, np.arange(n_tiles + 1)).astype(np.int64)
    return n_tiles_c, tile_starts, entry_idx


def _sorted_arrays(batch: SplatBatch, order):
    return (
        np.ascontiguousarray(batch.mean2[order, 0]),
        np.ascontiguousarray(batch.mean2[order, 1]),
        np.ascontiguousarray(batch.conic[order, 0]),
        np.ascontiguousarray(batch.conic[order, 1]),
        np.ascontiguousarray(batch.conic[order, 2]),
        np.ascontiguousarray(batch.opacity[order]),
        np.ascontiguousarray(batch.features[order]),
        np.ascontiguousarray(batch.confidences[order]),
    )


def render_forward(
    splats,
    grid: BevGridSpec,
    feature_dim: int | None = None,
    config: RenderConfig = DEFAULT_CONFIG,
) -> BevOutput:
    """Tiled front-to-back alpha blending of splats into BEV maps.

    Accepts a SplatBatch or any iterable of Splat2D. The output depends
    only on the depth-sorted order, never on input order or worker count.
    """
    batch = _coerce_batch(splats, feature_dim)
    size = grid.size
    n_ch = _feature_dim(batch, feature_dim)
    f_out = np.zeros((size, size, n_ch), dtype=np.float64)
    c_out = np.zeros((size, size), dtype=np.float64)
    t_out = np.ones((size, size), dtype=np.float64)
    if len(batch):
        order = _depth_order(batch)
        cull_r = _cull_radius(batch, config, size)
        n_tiles_c, tile_starts, entries = _bin_tiles(batch, order, cull_r, size)
        mr, mc, ca, cb, cc, op, ft, cf = _sorted_arrays(batch, order)
        _kernels.forward_tiled(
            mr, mc, ca, cb, cc, op, ft, cf,
            np.ascontiguousarray(cull_r[order] ** 2),
            tile_starts, entries, size, n_tiles_c,
            config.alpha_clamp, config.alpha_floor, config.transmittance_floor,
            f_out, c_out, t_out,
        )
    return BevOutput(
        f_bev=np.ascontiguousarray(f_out.transpose(2, 0, 1)), c_bev=c_out, final_t=t_out
    )


def render_reference(
    splats,
    grid: BevGridSpec,
    feature_dim: int | None = None,
    config: RenderConfig = DEFAULT_CONFIG,
) -> BevOutput:
    """Oracle renderer: per-cell full scan, no tiling, no culling, no early
    stop; only the alpha clamp is kept."""
    batch = _coerce_batch(splats, feature_dim)
    size = grid.size
    n_ch = _feature_dim(batch, feature_dim)
    f_out = np.zeros((size, size, n_ch), dtype=np.float64)
    c_out = np.zeros((size, size), dtype=np.float64)
    t_out = np.ones((size, size), dtype=np.float64)
    if len(batch):
        order = _depth_order(batch)
        mr, mc, ca, cb, cc, op, ft, cf = _sorted_arrays(batch, order)
        _kernels.forward_reference(
            mr, mc, ca, cb, cc, op, ft, cf, size, config.alpha_clamp, f_out, c_out, t_out
        )
    return BevOutput(
        f_bev=np.ascontiguousarray(f_out.transpose(2, 0, 1)), c_bev=c_out, final_t=t_out
    )


def render_backward(
    splats,
    grid: BevGridSpec,
    dl_df: np.ndarray,
    dl_dc: np.ndarray,
    config: RenderConfig = DEFAULT_CONFIG,
) -> GradientBundle:
    """Analytic gradients of the tiled forward pass.

    ``dl_df`` is [C, S, S], ``dl_dc`` [S, S]. Returns per-splat gradients
    aligned with the input splat order. The traversal (sorting, culling,
    early stop) replays the forward pass exactly, so the bundle
    differentiates precisely what render_forward computed.
    """
    batch = _coerce_batch(splats, None)
    size = grid.size
    n = len(batch)
    n_ch = batch.feature_dim
    bundle = GradientBundle(
        d_feature=np.zeros((n, n_ch)),
        d_confidence=np.zeros(n),
        d_opacity_base=np.zeros(n),
        d_mean2=np.zeros((n, 2)),
        d_inv_cov2=np.zeros((n, 2, 2)),
    )
    if n == 0 or (not np.any(dl_df) and not np.any(dl_dc)):
        return bundle
    order = _depth_order(batch)
    cull_r = _cull_radius(batch, config, size)
    n_tiles_c, tile_starts, entries = _bin_tiles(batch, order, cull_r, size)
    mr, mc, ca, cb, cc, op, ft, cf = _sorted_arrays(batch, order)
    chunks = _kernels.BACKWARD_CHUNKS
    g_feat = np.zeros((chunks, n, n_ch))
    g_conf = np.zeros((chunks, n))
    g_opac = np.zeros((chunks, n))
    g_mean = np.zeros((chunks, n, 2))
    g_conic = np.zeros((chunks, n, 3))
    _kernels.backward_tiled(
        mr, mc, ca, cb, cc, op, ft, cf,
        np.ascontiguousarray(cull_r[order] ** 2),
        tile_starts, entries, size, n_tiles_c,
        config.alpha_clamp, config.alpha_floor, config.transmittance_floor,
        np.ascontiguousarray(np.asarray(dl_df, dtype=np.float64).transpose(1, 2, 0)),
        np.ascontiguousarray(dl_dc, dtype=np.float64),
        g_feat, g_conf, g_opac, g_mean, g_conic,
    )
    # fixed-order reduction over chunks, then back to input order
    sf = g_feat.sum(axis=0)
    sc = g_conf.sum(axis=0)
    so = g_opac.sum(axis=0)
    sm = g_mean.sum(axis=0)
    sic = g_conic.sum(axis=0)
    bundle.d_feature[order] = sf
    bundle.d_confidence[order] = sc
    bundle.d_opacity_base[order] = so
    bundle.d_mean2[order] = sm
    inv = np.empty((n, 2, 2))
    inv[:, 0, 0] = sic[:, 0]
    inv[:, 0, 1] = 0.5 * sic[:, 1]
    inv[:, 1, 0] = 0.5 * sic[:, 1]
    inv[:, 1, 1] = sic[:, 2]
    bundle.d_inv_cov2[order] = inv
    return bundle


@dataclass
class PrimitiveGradients:
    """Gradients on 3D primitive parameters, in primitive order."""

    d_means: np.ndarray  # [N, 3]
    d_scales: np.ndarray  # [N, 3]
    d_quats: np.ndarray  # [N, 4] w.r.t. the unit quaternion
    d_opacities: np.ndarray  # [N]
    d_features: np.ndarray  # [N, C] per primitive (sum slots for per-pixel)
    d_confidences: np.ndarray  # [N]


def project_backward(
    pset: PrimitiveSet, batch: SplatBatch, bundle: GradientBundle, grid: BevGridSpec
) -> PrimitiveGradients:
    """Chain splat-space gradients back to 3D primitive parameters."""
    beta = grid.beta
    n = len(pset)
    d_means = np.zeros((n, 3))
    d_means[:, 0] = bundle.d_mean2[:, 1] / beta
    d_means[:, 2] = bundle.d_mean2[:, 0] / beta
    # through the matrix inverse: dSigma2 = -Lambda G Lambda
    lam = batch.inv_cov_matrices()
    d_cov2 = -lam @ bundle.d_inv_cov2 @ lam
    d_cov3 = np.zeros((n, 3, 3))
    beta2 = beta * beta
    d_cov3[:, 2, 2] = d_cov2[:, 0, 0] / beta2
    d_cov3[:, 2, 0] = d_cov2[:, 0, 1] / beta2
    d_cov3[:, 0, 2] = d_cov2[:, 1, 0] / beta2
    d_cov3[:, 0, 0] = d_cov2[:, 1, 1] / beta2
    d_scales, d_quats = covariance_backward(pset.scales, pset.quats, d_cov3)
    return PrimitiveGradients(
        d_means=d_means,
        d_scales=d_scales,
        d_quats=d_quats,
        d_opacities=bundle.d_opacity_base.copy(),
        d_features=bundle.d_feature.copy(),
        d_confidences=bundle.d_confidence.copy(),
    )


def save_bev_output(out_dir: str | Path, out: BevOutput) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_tensor(out_dir / "f_bev.bvt", out.f_bev)
    save_tensor(out_dir / "c_bev.bvt", out.c_bev)
    save_tensor(out_dir / "final_t.bvt", out.final_t)

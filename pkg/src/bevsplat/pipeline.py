"""End-to-end chains: ground inputs to localization, and loss to raw-attribute
gradients.

The forward route is generate primitives -> splat to BEV -> confidence-weight
-> sliding cosine similarity -> peaks -> metric losses. The backward route
retraces it analytically: peak selections are fixed-argmax, the similarity
cosine and the blending pass have closed-form gradients, and the projection /
activation chains map splat gradients back onto the raw attribute maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BevGridSpec, Camera
from .losses import LossConfig, LossReport, gps_backward, gps_peaks, total_loss, weakly_backward, weakly_loss
from .matching import (
    PeakResult,
    SimilarityMap,
    peak,
    similarity_backward,
    similarity_map,
    weight_features,
    weight_features_backward,
)
from .primitives import (
    ActivatedAttributes,
    PrimitiveSet,
    RawAttributes,
    activate_attributes,
    activate_backward,
    assemble_primitives,
    degenerate_raw_attributes,
    DEFAULT_MAX_OFFSET,
    DEFAULT_MAX_SCALE,
    DEFAULT_N_P,
)
from .renderer import (
    BevOutput,
    DEFAULT_CONFIG,
    RenderConfig,
    SplatBatch,
    project_backward,
    project_batch,
    render_backward,
    render_forward,
)


@dataclass(frozen=True)
class GroundInputs:
    """Per-query ground-view maps."""

    depth: np.ndarray  # [H, W] meters
    features: np.ndarray  # [C, H, W]
    confidence: np.ndarray  # [H, W]


@dataclass(frozen=True)
class PipelineConfig:
    n_p: int = DEFAULT_N_P
    max_offset: float = DEFAULT_MAX_OFFSET
    max_scale: float = DEFAULT_MAX_SCALE
    render: RenderConfig = DEFAULT_CONFIG
    # +-28 m at the 100 m / 128 cell resolution (half the 56 m search range)
    search_radius: int = 35
    loss: LossConfig = field(default_factory=LossConfig)


def splat_bev(
    ground: GroundInputs,
    camera: Camera,
    grid: BevGridSpec,
    raw: RawAttributes | None = None,
    cfg: PipelineConfig = PipelineConfig(),
) -> tuple[BevOutput, PrimitiveSet, SplatBatch]:
    """Render ground inputs into BEV maps via feature Gaussians."""
    h, w = ground.depth.shape
    if raw is None:
        raw = degenerate_raw_attributes(cfg.n_p, h, w, max_scale=cfg.max_scale)
    act = activate_attributes(raw, cfg.max_offset, cfg.max_scale)
    pset = assemble_primitives(act, ground.depth, ground.features, ground.confidence,
                               camera, cfg.n_p)
    batch = project_batch(pset, grid)
    bev = render_forward(batch, grid, config=cfg.render)
    return bev, pset, batch


def localize(
    ground: GroundInputs,
    satellite: np.ndarray,
    camera: Camera,
    grid: BevGridSpec,
    raw: RawAttributes | None = None,
    cfg: PipelineConfig = PipelineConfig(),
) -> tuple[PeakResult, SimilarityMap, BevOutput]:
    """Full single-query localization against a satellite feature map."""
    bev, _, _ = splat_bev(ground, camera, grid, raw, cfg)
    weighted = weight_features(bev.f_bev, bev.c_bev)
    sim = similarity_map(satellite, weighted, cfg.search_radius, grid.beta)
    return peak(sim), sim, bev


@dataclass
class LossCache:
    """Everything the analytic backward pass needs from a loss forward."""

    raw: RawAttributes
    act: ActivatedAttributes
    pset: PrimitiveSet
    batch: SplatBatch
    bev: BevOutput
    weighted: np.ndarray
    sat_pos: np.ndarray
    sat_negs: list[np.ndarray]
    p_pos: SimilarityMap
    peak_pos: PeakResult
    neg_peaks: list[PeakResult]
    label: tuple[int, int] | None
    grid: BevGridSpec
    cfg: PipelineConfig
    report: LossReport


@dataclass
class RawGradients:
    """Loss gradients on the optimizable inputs."""

    d_raw: RawAttributes  # [n_p, 11, H, W]
    d_features: np.ndarray  # [C, H, W] per-pixel (slots summed)
    d_confidence: np.ndarray  # [H, W]


def loss_forward(
    raw: RawAttributes,
    ground: GroundInputs,
    camera: Camera,
    grid: BevGridSpec,
    sat_pos: np.ndarray,
    sat_negs: list[np.ndarray],
    label: tuple[int, int] | None,
    cfg: PipelineConfig,
) -> LossCache:
    """Evaluate the combined objective, caching intermediates for backward."""
    act = activate_attributes(raw, cfg.max_offset, cfg.max_scale)
    pset = assemble_primitives(act, ground.depth, ground.features, ground.confidence,
                               camera, cfg.n_p)
    batch = project_batch(pset, grid)
    bev = render_forward(batch, grid, config=cfg.render)
    weighted = weight_features(bev.f_bev, bev.c_bev)
    p_pos = similarity_map(sat_pos, weighted, cfg.search_radius, grid.beta)
    peak_pos = peak(p_pos)
    neg_peaks = [
        peak(similarity_map(s, weighted, cfg.search_radius, grid.beta)) for s in sat_negs
    ]
    l_w = weakly_loss(peak_pos.value, [p.value for p in neg_peaks], cfg.loss.alpha)
    l_g = 0.0
    if cfg.loss.lambda1:
        if label is None:
            raise ValueError("lambda1=1 requires a location label")
        _, _, g_val, w_val = gps_peaks(p_pos, label, cfg.loss.d)
        l_g = abs(g_val - w_val)
    report = LossReport(
        l_weakly=l_w,
        l_gps=l_g,
        l_total=total_loss(l_w, l_g, cfg.loss.lambda1),
        lambda1=cfg.loss.lambda1,
        alpha=cfg.loss.alpha,
        d=cfg.loss.d,
    )
    return LossCache(
        raw=raw, act=act, pset=pset, batch=batch, bev=bev, weighted=weighted,
        sat_pos=sat_pos, sat_negs=list(sat_negs), p_pos=p_pos, peak_pos=peak_pos,
        neg_peaks=neg_peaks, label=label, grid=grid, cfg=cfg, report=report,
    )


def loss_backward(cache: LossCache) -> RawGradients:
    """Analytic gradient of the cached loss w.r.t. raw attributes and inputs."""
    cfg = cache.cfg
    d_pos, d_negs = weakly_backward(
        cache.peak_pos.value, [p.value for p in cache.neg_peaks], cfg.loss.alpha
    )
    # gradient field over the positive similarity map: the weak loss hits the
    # global argmax, the GPS loss adds +-1 at its two selected cells
    d_p_pos = np.zeros_like(cache.p_pos.values)
    rad = cache.p_pos.search_radius
    pr, pc = cache.peak_pos.offset
    d_p_pos[pr + rad, pc + rad] += d_pos
    if cfg.loss.lambda1 and cache.label is not None:
        d_p_pos += gps_backward(cache.p_pos, cache.label, cfg.loss.d)
    d_weighted = np.zeros_like(cache.weighted)
    for (r, c) in zip(*np.nonzero(d_p_pos)):
        offset = (int(r) - rad, int(c) - rad)
        d_weighted += similarity_backward(
            cache.sat_pos, cache.weighted, offset, float(d_p_pos[r, c])
        )
    for sat_neg, pk, dv in zip(cache.sat_negs, cache.neg_peaks, d_negs):
        d_weighted += similarity_backward(sat_neg, cache.weighted, pk.offset, float(dv))
    d_f_bev, d_c_bev = weight_features_backward(cache.bev.f_bev, cache.bev.c_bev, d_weighted)
    bundle = render_backward(cache.batch, cache.grid, d_f_bev, d_c_bev, cfg.render)
    pgrads = project_backward(cache.pset, cache.batch, bundle, cache.grid)
    d_raw = activate_backward(
        cache.act,
        d_offsets=pgrads.d_means,
        d_scales=pgrads.d_scales,
        d_quats=pgrads.d_quats,
        d_opacities=pgrads.d_opacities,
        n_p=cfg.n_p,
        image_shape=cache.pset.image_shape,
    )
    h, w = cache.pset.image_shape
    n_pix = h * w
    c_dim = cache.pset.feature_dim
    d_feat_pix = pgrads.d_features.reshape(n_pix, cfg.n_p, c_dim).sum(axis=1)
    d_conf_pix = pgrads.d_confidences.reshape(n_pix, cfg.n_p).sum(axis=1)
    return RawGradients(
        d_raw=d_raw,
        d_features=d_feat_pix.T.reshape(c_dim, h, w),
        d_confidence=d_conf_pix.reshape(h, w),
    )

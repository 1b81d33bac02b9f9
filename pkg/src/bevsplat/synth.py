"""Synthetic scene oracle for end-to-end localization and optimization tests.

A scene is a flat ground plane tiled with fixed random unit feature
patches plus axis-aligned boxes (each box carries one unit feature on all
faces, so ground-view sides and satellite-view tops correlate). The
ground view is produced by exact ray casting, the satellite map by exact
top-down rasterization of the static surfaces shifted by a planted
offset, which localization should recover. Dynamic boxes get confidence
zero in the ground view and are absent from the satellite map.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .baselines import direct_project, ipm_project
from .geometry import BevGridSpec, Camera, PanoramaGeometry, PinholeIntrinsics, camera_rays
from .matching import peak, similarity_map, weight_features
from .pipeline import (
    GroundInputs,
    PipelineConfig,
    RawGradients,
    loss_backward,
    loss_forward,
    splat_bev,
)
from .primitives import RawAttributes, degenerate_raw_attributes, generate_primitives
from .tensor_io import save_tensor

_CAMERA_CLEARANCE = 2.5  # meters kept box-free around the camera


@dataclass(frozen=True)
class SceneSpec:
    """Description of one synthetic world and its query configuration."""

    seed: int = 0
    extent: float = 60.0  # box placement region, meters per side
    n_boxes: int = 10
    box_size_range: tuple[float, float] = (2.0, 6.0)
    box_height_range: tuple[float, float] = (2.0, 5.0)
    feature_dim: int = 16
    dynamic_fraction: float = 0.0
    cam_height: float = 1.6  # ground plane sits at Y = +cam_height
    ground_patch_m: float = 4.0
    camera_kind: str = "panorama"
    image_height: int = 48
    image_width: int = 160
    grid_size: int = 128
    beta: float = 0.546875  # 70 m / 128 cells
    search_range_m: float = 20.0
    tall_occluders: bool = False

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ValueError("dynamic_fraction must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        data = json.loads(text)
        for key in ("box_size_range", "box_height_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def camera(self) -> Camera:
        if self.camera_kind == "panorama":
            return PanoramaGeometry(width=self.image_width, height=self.image_height)
        if self.camera_kind == "pinhole":
            f = 0.6 * self.image_width
            return PinholeIntrinsics(
                fx=f, fy=f, cx=(self.image_width - 1) / 2.0, cy=(self.image_height - 1) / 2.0
            )
        raise ValueError(f"unknown camera kind {self.camera_kind!r}")

    def grid(self) -> BevGridSpec:
        return BevGridSpec.centered(self.grid_size, self.beta)


@dataclass(frozen=True)
class LocalizationRecord:
    planted_m: tuple[float, float]  # (dz, dx)
    estimated_m: tuple[float, float]
    error_m: float
    peak_value: float


@dataclass
class Scene:
    spec: SceneSpec
    ground: GroundInputs
    satellite: np.ndarray  # [C, S, S]
    planted_m: tuple[float, float]  # camera offset from the patch prior, (dz, dx)
    world: "_World | None" = None  # kept for re-rasterization (hard negatives)


@dataclass
class _World:
    patch_feats: np.ndarray  # [n, n, C] unit vectors
    half_world: float
    patch_m: float
    box_min: np.ndarray  # [B, 3] (x, y, z) mins
    box_max: np.ndarray  # [B, 3]
    box_feats: np.ndarray  # [B, C]
    box_dynamic: np.ndarray  # [B] bool


def _unit_rows(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _build_world(spec: SceneSpec, rng: np.random.Generator) -> _World:
    half_world = spec.beta * spec.grid_size / 2.0 + spec.search_range_m + 2 * spec.ground_patch_m
    n_side = int(math.ceil(2 * half_world / spec.ground_patch_m)) + 2
    if spec.tall_occluders:
        # repetitive ground texture: with only a few distinct patch
        # features, corrupted BEV content can outvote the true alignment
        vocab = _unit_rows(rng, (4, spec.feature_dim))
        patch_feats = vocab[rng.integers(0, 4, size=(n_side, n_side))]
    else:
        patch_feats = _unit_rows(rng, (n_side, n_side, spec.feature_dim))
    if spec.tall_occluders:
        n_boxes = max(spec.n_boxes, 14)
        size_range = (4.0, 10.0)
        height_range = (12.0, 20.0)
    else:
        n_boxes = spec.n_boxes
        size_range = spec.box_size_range
        height_range = spec.box_height_range
    sizes = rng.uniform(size_range[0], size_range[1], size=(n_boxes, 2))
    heights = rng.uniform(height_range[0], height_range[1], size=n_boxes)
    centers = np.zeros((n_boxes, 2))
    for b in range(n_boxes):
        clearance = _CAMERA_CLEARANCE + float(np.max(sizes[b])) / 2.0
        while True:
            if spec.tall_occluders:
                # dense ring of close occluders: corrupts flat-plane
                # projection hardest while walls stay splattable
                ang = rng.uniform(0.0, 2 * math.pi)
                rad = rng.uniform(clearance, clearance + 8.0)
                cand = np.array([rad * math.cos(ang), rad * math.sin(ang)])
            else:
                cand = rng.uniform(-spec.extent / 2.0, spec.extent / 2.0, size=2)
            if np.max(np.abs(cand)) > clearance:
                centers[b] = cand
                break
    box_feats = _unit_rows(rng, (n_boxes, spec.feature_dim))
    n_dyn = int(round(spec.dynamic_fraction * n_boxes))
    perm = rng.permutation(n_boxes)
    dynamic = np.zeros(n_boxes, dtype=bool)
    dynamic[perm[:n_dyn]] = True
    box_min = np.stack(
        [centers[:, 0] - sizes[:, 0] / 2, spec.cam_height - heights, centers[:, 1] - sizes[:, 1] / 2],
        axis=1,
    )
    box_max = np.stack(
        [centers[:, 0] + sizes[:, 0] / 2, np.full(n_boxes, spec.cam_height), centers[:, 1] + sizes[:, 1] / 2],
        axis=1,
    )
    return _World(
        patch_feats=patch_feats,
        half_world=half_world,
        patch_m=spec.ground_patch_m,
        box_min=box_min,
        box_max=box_max,
        box_feats=box_feats,
        box_dynamic=dynamic,
    )


def _patch_features(world: _World, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    n = world.patch_feats.shape[0]
    ix = np.clip(((x + world.half_world) / world.patch_m).astype(np.int64), 0, n - 1)
    iz = np.clip(((z + world.half_world) / world.patch_m).astype(np.int64), 0, n - 1)
    return world.patch_feats[iz, ix]


def _raycast_ground(spec: SceneSpec, world: _World, camera: Camera):
    h, w = spec.image_height, spec.image_width
    dirs = camera_rays(camera, height=h, width=w).reshape(-1, 3)
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    kind = np.full(n, -1, dtype=np.int64)  # -1 none, -2 ground, >=0 box index
    dy = dirs[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = np.where(dy > 1e-9, spec.cam_height / dy, np.inf)
    better = t_plane < t_best
    t_best[better] = t_plane[better]
    kind[better] = -2
    for b in range(world.box_min.shape[0]):
        t_near = np.full(n, -np.inf)
        t_far = np.full(n, np.inf)
        ok = np.ones(n, dtype=bool)
        for axis in range(3):
            d = dirs[:, axis]
            lo = world.box_min[b, axis]
            hi = world.box_max[b, axis]
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = lo / d
                t2 = hi / d
            tn = np.minimum(t1, t2)
            tf = np.maximum(t1, t2)
            degenerate = np.abs(d) < 1e-12
            inside = (lo <= 0.0) & (0.0 <= hi)
            tn = np.where(degenerate, np.where(inside, -np.inf, np.inf), tn)
            tf = np.where(degenerate, np.where(inside, np.inf, -np.inf), tf)
            t_near = np.maximum(t_near, tn)
            t_far = np.minimum(t_far, tf)
        ok &= (t_near <= t_far) & (t_near > 1e-6)
        better = ok & (t_near < t_best)
        t_best[better] = t_near[better]
        kind[better] = b
    depth = np.where(np.isfinite(t_best), t_best, 0.0)
    feats = np.zeros((n, spec.feature_dim))
    conf = np.zeros(n)
    ground_hit = kind == -2
    if np.any(ground_hit):
        px = depth[ground_hit] * dirs[ground_hit, 0]
        pz = depth[ground_hit] * dirs[ground_hit, 2]
        feats[ground_hit] = _patch_features(world, px, pz)
        conf[ground_hit] = 1.0
    box_hit = kind >= 0
    if np.any(box_hit):
        idx = kind[box_hit]
        feats[box_hit] = world.box_feats[idx]
        conf[box_hit] = np.where(world.box_dynamic[idx], 0.0, 1.0)
    return (
        depth.reshape(h, w),
        feats.reshape(h, w, spec.feature_dim).transpose(2, 0, 1),
        conf.reshape(h, w),
    )


def _rasterize_satellite(
    spec: SceneSpec, world: _World, grid: BevGridSpec, planted: tuple[float, float]
) -> np.ndarray:
    """Exact top-down map of static surfaces, sampled at grid points shifted
    so the camera sits ``planted`` meters from the patch center."""
    xx, zz = grid.cell_centers()
    x = xx - planted[1]
    z = zz - planted[0]
    feats = _patch_features(world, x, z)
    top = np.full(x.shape, spec.cam_height)
    for b in range(world.box_min.shape[0]):
        if world.box_dynamic[b]:
            continue
        inside = (
            (x >= world.box_min[b, 0])
            & (x <= world.box_max[b, 0])
            & (z >= world.box_min[b, 2])
            & (z <= world.box_max[b, 2])
        )
        higher = inside & (world.box_min[b, 1] < top)
        top[higher] = world.box_min[b, 1]
        feats[higher] = world.box_feats[b]
    return np.ascontiguousarray(feats.transpose(2, 0, 1))


def make_scene(spec: SceneSpec, planted: tuple[float, float] | None = None) -> Scene:
    """Generate matched ground inputs and a planted-offset satellite map.

    Deterministic in (spec, planted); when ``planted`` is omitted it is
    drawn uniformly within +-search_range_m per axis.
    """
    rng = np.random.default_rng(spec.seed)
    world = _build_world(spec, rng)
    drawn = rng.uniform(-spec.search_range_m, spec.search_range_m, size=2)
    if planted is None:
        planted = (float(drawn[0]), float(drawn[1]))
    camera = spec.camera()
    grid = spec.grid()
    depth, features, conf = _raycast_ground(spec, world, camera)
    satellite = _rasterize_satellite(spec, world, grid, planted)
    return Scene(
        spec=spec,
        ground=GroundInputs(depth=depth, features=features, confidence=conf),
        satellite=satellite,
        planted_m=planted,
        world=world,
    )


def _search_radius_cells(spec: SceneSpec) -> int:
    return int(math.ceil(spec.search_range_m / spec.beta))


def make_point_field(
    seed: int,
    grid: BevGridSpec,
    points_per_cell: float = 8.0,
    patch_m: float = 8.0,
    feature_dim: int = 8,
) -> PrimitiveSet:
    """Dense random point cloud over a piecewise-constant feature field.

    Every grid cell receives points on average, so a near-opaque tiny-scale
    splatting of this set should coincide with its direct projection up to
    footprint blur at patch boundaries.
    """
    from .primitives import PrimitiveSet

    rng = np.random.default_rng(seed)
    extent = grid.size * grid.beta
    n = int(points_per_cell * grid.size * grid.size)
    x = grid.origin_x + rng.uniform(-0.5 * grid.beta, extent - 0.5 * grid.beta, n)
    z = grid.origin_z + rng.uniform(-0.5 * grid.beta, extent - 0.5 * grid.beta, n)
    y = rng.uniform(-2.0, 0.0, n)
    n_patch = int(math.ceil(extent / patch_m)) + 2
    table = _unit_rows(rng, (n_patch, n_patch, feature_dim))
    ix = np.clip(((x - grid.origin_x) / patch_m).astype(np.int64) + 1, 0, n_patch - 1)
    iz = np.clip(((z - grid.origin_z) / patch_m).astype(np.int64) + 1, 0, n_patch - 1)
    feats = table[iz, ix]
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return PrimitiveSet(
        means=np.stack([x, y, z], axis=1),
        scales=np.full((n, 3), 0.1),
        quats=quats,
        opacities=np.ones(n),
        pixel_features=feats,
        pixel_confidences=np.ones(n),
        n_p=1,
        image_shape=(1, n),
    )


def smooth_field(
    seed: int, feature_dim: int, n_waves: int = 4, wavelength_range: tuple[float, float] = (35.0, 70.0)
) -> "callable":
    """Band-limited random feature field over the ground plane.

    Returns f(x, z) -> [..., C]. Wavelengths are long relative to a BEV
    cell so that point-sampled reconstructions (bilinear IPM, splat
    blending) agree to first order.
    """
    rng = np.random.default_rng(seed)
    wavelengths = rng.uniform(*wavelength_range, size=(feature_dim, n_waves))
    theta = rng.uniform(0.0, 2 * math.pi, size=(feature_dim, n_waves))
    phase = rng.uniform(0.0, 2 * math.pi, size=(feature_dim, n_waves))
    amp = rng.uniform(0.4, 1.0, size=(feature_dim, n_waves))
    # constant term keeps channel magnitudes away from zero
    bias = rng.uniform(1.2, 2.0, size=feature_dim) * rng.choice([-1.0, 1.0], size=feature_dim)

    def field(x: np.ndarray, z: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[..., None, None]
        z = np.asarray(z, dtype=np.float64)[..., None, None]
        k = 2 * math.pi / wavelengths
        arg = k * (np.cos(theta) * x + np.sin(theta) * z) + phase
        return np.sum(amp * np.sin(arg), axis=-1) + bias

    return field


def make_flat_pinhole_scene(
    seed: int,
    grid_size: int = 32,
    beta: float = 0.5,
    image_height: int = 96,
    image_width: int = 256,
    cam_height: float = 1.6,
    feature_dim: int = 8,
) -> tuple[GroundInputs, PinholeIntrinsics, BevGridSpec, float]:
    """Ground-plane-only pinhole scene with dense near-field sampling.

    The camera is horizontal with the horizon near the top image row, so
    plane samples stay denser than the grid resolution out to the grid
    edge. Features come from a band-limited field; used for the
    flat-scene IPM-vs-splatting agreement check.
    """
    field = smooth_field(seed, feature_dim)
    f = 200.0
    camera = PinholeIntrinsics(
        fx=f, fy=f, cx=(image_width - 1) / 2.0, cy=image_height * 0.2
    )
    grid = BevGridSpec.centered(grid_size, beta)
    vv, uu = np.meshgrid(
        np.arange(image_height, dtype=np.float64),
        np.arange(image_width, dtype=np.float64),
        indexing="ij",
    )
    dv = vv - camera.cy
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(dv > 0.5, cam_height * camera.fy / dv, 0.0)
    x = (uu - camera.cx) / camera.fx * depth
    z = depth
    feats = np.ascontiguousarray(np.moveaxis(field(x, z), -1, 0))
    conf = (depth > 0).astype(np.float64)
    feats *= conf[None]
    return GroundInputs(depth=depth, features=feats, confidence=conf), camera, grid, cam_height


def pipeline_weighted_bev(
    scene: Scene,
    pipeline: str,
    raw: RawAttributes | None = None,
    cfg: PipelineConfig | None = None,
) -> np.ndarray:
    """Confidence-weighted BEV features for one of {bevsplat, ipm, direct}."""
    spec = scene.spec
    camera = spec.camera()
    grid = spec.grid()
    cfg = cfg or PipelineConfig(search_radius=_search_radius_cells(spec))
    if pipeline == "bevsplat":
        bev, _, _ = splat_bev(scene.ground, camera, grid, raw, cfg)
        return weight_features(bev.f_bev, bev.c_bev)
    if pipeline == "ipm":
        bev, valid = ipm_project(scene.ground.features, camera, spec.cam_height, grid)
        conf_bev, _ = ipm_project(
            scene.ground.confidence[None, :, :], camera, spec.cam_height, grid
        )
        return bev * conf_bev[0][None, :, :] * valid[None, :, :]
    if pipeline == "direct":
        h, w = scene.ground.depth.shape
        r = raw if raw is not None else degenerate_raw_attributes(cfg.n_p, h, w)
        pset = generate_primitives(
            scene.ground.depth, scene.ground.features, scene.ground.confidence,
            r, camera, cfg.n_p, cfg.max_offset, cfg.max_scale,
        )
        out, _ = direct_project(pset, grid)
        return out
    raise ValueError(f"unknown pipeline {pipeline!r}")


def localize_scene(
    scene: Scene,
    pipeline: str = "bevsplat",
    raw: RawAttributes | None = None,
    cfg: PipelineConfig | None = None,
) -> LocalizationRecord:
    """Run one scene through a pipeline and score the pose estimate."""
    spec = scene.spec
    cfg = cfg or PipelineConfig(search_radius=_search_radius_cells(spec))
    weighted = pipeline_weighted_bev(scene, pipeline, raw, cfg)
    sim = similarity_map(scene.satellite, weighted, cfg.search_radius, spec.beta)
    pk = peak(sim)
    est = pk.offset_m
    err = math.hypot(est[0] - scene.planted_m[0], est[1] - scene.planted_m[1])
    return LocalizationRecord(
        planted_m=scene.planted_m, estimated_m=est, error_m=err, peak_value=pk.value
    )


def evaluate_localization(
    n_scenes: int,
    pipeline: str,
    spec: SceneSpec,
    base_seed: int = 0,
    occluder_fraction: float = 0.0,
) -> tuple[dict, list[LocalizationRecord]]:
    """Aggregate localization quality over seeded scenes.

    The first round(occluder_fraction * n_scenes) scenes use the
    tall-occluder variant. Returns (summary, per-scene records).
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    n_tall = int(round(occluder_fraction * n_scenes))
    records = []
    for i in range(n_scenes):
        sp = replace(spec, seed=base_seed + i, tall_occluders=i < n_tall)
        records.append(localize_scene(make_scene(sp), pipeline))
    errors = np.array([r.error_m for r in records])
    summary = {
        "pipeline": pipeline,
        "n_scenes": n_scenes,
        "mean_error_m": float(np.mean(errors)),
        "median_error_m": float(np.median(errors)),
        "recall_at_1m": float(np.mean(errors <= 1.0)),
        "recall_at_3m": float(np.mean(errors <= 3.0)),
    }
    return summary, records


def scene_negatives(spec: SceneSpec, m: int, base_seed: int = 9000) -> list[np.ndarray]:
    """Satellite maps of unrelated scenes, used as negative samples."""
    return [
        make_scene(replace(spec, seed=base_seed + j)).satellite for j in range(m)
    ]


def hard_negative(scene: Scene, shift_m: tuple[float, float]) -> np.ndarray:
    """Satellite of the same world at a displaced planted offset.

    Its peak competes closely with the positive's, keeping the weak-loss
    margin active during optimization.
    """
    if scene.world is None:
        raise ValueError("scene was built without world data")
    planted = (scene.planted_m[0] + shift_m[0], scene.planted_m[1] + shift_m[1])
    return _rasterize_satellite(scene.spec, scene.world, scene.spec.grid(), planted)


@dataclass
class OptimizationResult:
    trace: list[float]  # l_total per step (including the final state)
    record: LocalizationRecord
    grad_max_abs: float  # max |d raw| at the final state
    raw: RawAttributes


def optimize_primitives(
    scene: Scene,
    steps: int,
    step_size: float,
    cfg: PipelineConfig | None = None,
    negatives: list[np.ndarray] | None = None,
    raw0: RawAttributes | None = None,
) -> OptimizationResult:
    """Plain gradient descent on raw attributes through render-match-loss.

    Records l_total at every step; aborts on non-finite loss with the
    step index in the error message.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    spec = scene.spec
    camera = spec.camera()
    grid = spec.grid()
    cfg = cfg or PipelineConfig(search_radius=_search_radius_cells(spec))
    if negatives is None:
        negatives = scene_negatives(spec, cfg.loss.negatives)
    label = (
        int(round(scene.planted_m[0] / spec.beta)),
        int(round(scene.planted_m[1] / spec.beta)),
    )
    h, w = scene.ground.depth.shape
    raw = raw0 if raw0 is not None else RawAttributes.zeros(cfg.n_p, h, w)
    trace: list[float] = []
    grads: RawGradients | None = None
    for step in range(steps + 1):
        cache = loss_forward(
            raw, scene.ground, camera, grid, scene.satellite, negatives, label, cfg
        )
        if not math.isfinite(cache.report.l_total):
            raise FloatingPointError(f"loss diverged at step {step}")
        trace.append(cache.report.l_total)
        if step == steps:
            grads = loss_backward(cache)
            break
        grads = loss_backward(cache)
        raw = RawAttributes(raw.data - step_size * grads.d_raw.data)
    record = localize_scene(scene, "bevsplat", raw=raw, cfg=cfg)
    return OptimizationResult(
        trace=trace,
        record=record,
        grad_max_abs=float(np.max(np.abs(grads.d_raw.data))),
        raw=raw,
    )


def save_scene(scene: Scene, out_dir) -> None:
    """Write a scene's maps as `.bvt` plus the spec and planted offset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "depth.bvt", scene.ground.depth)
    save_tensor(out / "features.bvt", scene.ground.features)
    save_tensor(out / "confidence.bvt", scene.ground.confidence)
    save_tensor(out / "satellite.bvt", scene.satellite)
    (out / "scene.json").write_text(
        json.dumps({"spec": json.loads(scene.spec.to_json()), "planted_m": scene.planted_m})
    )

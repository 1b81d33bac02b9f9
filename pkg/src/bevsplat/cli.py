"""Command-line entry point wiring the modules into batch workflows.

Exit codes: 0 success, 1 numeric or assertion failure, 2 usage errors
(unknown flags, malformed or missing files).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from ._threads import set_threads
from .bench import AGREEMENT_TOL, run_bench
from .baselines import direct_project, ipm_project
from .geometry import BevGridSpec, camera_from_config, grid_from_config, load_config
from .gradcheck import REL_TOL, run_gradcheck
from .losses import LossConfig
from .matching import save_similarity_map
from .pipeline import GroundInputs, PipelineConfig, localize
from .primitives import (
    PrimitiveSet,
    RawAttributes,
    degenerate_raw_attributes,
    generate_primitives,
)
from .renderer import BevOutput, project_batch, render_forward, save_bev_output
from .synth import (
    SceneSpec,
    evaluate_localization,
    make_scene,
    optimize_primitives,
    save_scene,
    scene_negatives,
)
from .tensor_io import TensorFormatError, load_tensor, save_tensor


def write_ppm(path: str | Path, gray: np.ndarray) -> None:
    """Plain-text PPM dump of a [H, W] map scaled to [0, 255] gray."""
    g = np.asarray(gray, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    q = np.round((g - lo) * scale).astype(np.int64)
    h, w = q.shape
    with open(path, "w") as f:
        f.write(f"P3\n{w} {h}\n255\n")
        for row in q:
            f.write(" ".join(f"{v} {v} {v}" for v in row))
            f.write("\n")


def _grid_from_doc(doc: dict) -> BevGridSpec:
    return grid_from_config(doc["grid"] if "grid" in doc else doc)


def _pipeline_config(doc: dict) -> PipelineConfig:
    pipe = doc.get("pipeline", {})
    match = doc.get("match", {})
    base = PipelineConfig()
    return PipelineConfig(
        n_p=int(pipe.get("n_p", base.n_p)),
        max_offset=float(pipe.get("max_offset", base.max_offset)),
        max_scale=float(pipe.get("max_scale", base.max_scale)),
        search_radius=int(match.get("search_radius", base.search_radius)),
        loss=LossConfig.from_json(doc.get("loss", {})),
    )


def _load_primitives(path: str, feature_dim: int) -> PrimitiveSet:
    """Packed primitive rows [N, 12+C]: mean3, scale3, quat4, opacity,
    confidence, feature C. A zero-byte file is the empty set."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(path)
    if p.stat().st_size == 0:
        return _empty_primitives(feature_dim)
    arr = np.asarray(load_tensor(p), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 13:
        raise TensorFormatError(
            f"primitives tensor must be [N, 12+C] with C >= 1, got {arr.shape}"
        )
    n = arr.shape[0]
    return PrimitiveSet(
        means=arr[:, 0:3],
        scales=arr[:, 3:6],
        quats=arr[:, 6:10],
        opacities=arr[:, 10],
        pixel_confidences=arr[:, 11],
        pixel_features=arr[:, 12:],
        n_p=1,
        image_shape=(1, n),
    )


def _empty_primitives(feature_dim: int) -> PrimitiveSet:
    return PrimitiveSet(
        means=np.zeros((0, 3)),
        scales=np.zeros((0, 3)),
        quats=np.zeros((0, 4)),
        opacities=np.zeros(0),
        pixel_features=np.zeros((0, feature_dim)),
        pixel_confidences=np.zeros(0),
        n_p=1,
        image_shape=(1, 0),
    )


def save_primitives(path: str | Path, pset: PrimitiveSet) -> None:
    """Inverse of the packed layout accepted by `render --primitives`."""
    rows = np.concatenate(
        [
            pset.means,
            pset.scales,
            pset.quats,
            pset.opacities[:, None],
            pset.confidences[:, None],
            pset.features,
        ],
        axis=1,
    )
    save_tensor(path, rows)


def _load_ground(ground_dir: str) -> tuple[GroundInputs, RawAttributes | None]:
    d = Path(ground_dir)
    ground = GroundInputs(
        depth=np.asarray(load_tensor(d / "depth.bvt"), dtype=np.float64),
        features=np.asarray(load_tensor(d / "features.bvt"), dtype=np.float64),
        confidence=np.asarray(load_tensor(d / "confidence.bvt"), dtype=np.float64),
    )
    raw_path = d / "raw.bvt"
    raw = None
    if raw_path.exists():
        raw = RawAttributes(np.asarray(load_tensor(raw_path), dtype=np.float64))
    return ground, raw


def _cmd_render(args) -> int:
    doc = load_config(args.grid)
    grid = _grid_from_doc(doc)
    dim = args.dim if args.dim is not None else int(doc.get("feature_dim", 4))
    pset = _load_primitives(args.primitives, dim)
    if len(pset):
        out = render_forward(project_batch(pset, grid), grid)
    else:
        out = BevOutput(
            f_bev=np.zeros((dim, grid.size, grid.size)),
            c_bev=np.zeros((grid.size, grid.size)),
            final_t=np.ones((grid.size, grid.size)),
        )
    save_bev_output(args.out, out)
    if args.ppm:
        write_ppm(Path(args.out) / "c_bev.ppm", out.c_bev)
    print(f"rendered {len(pset)} primitives onto {grid.size}x{grid.size} -> {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    result = run_gradcheck(
        seed=args.seed, n_splats=args.splats, c_dim=args.dim,
        samples_per_class=args.samples, lambda1=args.lambda1,
    )
    for name, err in result.per_class.items():
        print(f"{name:12s} max rel err {err:.3e}")
    print(f"max rel err {result.max_rel_err:.3e} over {result.n_checks} checks "
          f"(tolerance {REL_TOL:g})")
    return 0 if result.passed else 1


def _cmd_localize(args) -> int:
    doc = load_config(args.config)
    camera = camera_from_config(doc["camera"])
    grid = _grid_from_doc(doc)
    cfg = _pipeline_config(doc)
    ground, raw = _load_ground(args.ground_dir)
    satellite = np.asarray(load_tensor(args.sat), dtype=np.float64)
    pk, sim, _ = localize(ground, satellite, camera, grid, raw, cfg)
    result = {
        "offset_cells": list(pk.offset),
        "offset_m": list(pk.offset_m),
        "peak_value": pk.value,
        "search_radius": cfg.search_radius,
        "beta": grid.beta,
    }
    Path(args.out).write_text(json.dumps(result, indent=2))
    if args.save_similarity:
        save_similarity_map(args.save_similarity, sim)
    print(f"peak {pk.value:.4f} at offset {pk.offset} cells = {tuple(round(v, 3) for v in pk.offset_m)} m")
    return 0


def _cmd_baseline(args) -> int:
    doc = load_config(args.config)
    camera = camera_from_config(doc["camera"])
    grid = _grid_from_doc(doc)
    ground, raw = _load_ground(args.ground_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.method == "ipm":
        cam_height = float(doc.get("cam_height", 1.65))
        bev, valid = ipm_project(ground.features, camera, cam_height, grid)
        save_tensor(out_dir / "bev.bvt", bev)
        save_tensor(out_dir / "valid.bvt", valid.astype(np.float64))
    else:
        cfg = _pipeline_config(doc)
        h, w = ground.depth.shape
        if raw is None:
            raw = degenerate_raw_attributes(cfg.n_p, h, w, max_scale=cfg.max_scale)
        pset = generate_primitives(
            ground.depth, ground.features, ground.confidence, raw, camera,
            cfg.n_p, cfg.max_offset, cfg.max_scale,
        )
        bev, occ = direct_project(pset, grid)
        save_tensor(out_dir / "bev.bvt", bev)
        save_tensor(out_dir / "occupancy.bvt", occ.astype(np.float64))
    print(f"{args.method} baseline written to {out_dir}")
    return 0


def _cmd_synth(args) -> int:
    spec = SceneSpec.from_json(Path(args.spec).read_text())
    summary, records = evaluate_localization(
        args.n, args.pipeline, spec, base_seed=args.base_seed,
        occluder_fraction=args.occluders,
    )
    out = Path(args.out)
    out.write_text(json.dumps(summary, indent=2))
    lines = out.parent / (out.stem + ".jsonl")  # summary.json -> summary.jsonl
    with open(lines, "w") as f:
        for rec in records:
            f.write(json.dumps(asdict(rec)) + "\n")
    print(json.dumps(summary))
    return 0


def _cmd_optimize(args) -> int:
    spec = SceneSpec.from_json(Path(args.spec).read_text())
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    scene = make_scene(spec)
    loss = LossConfig(lambda1=args.lambda1, negatives=args.negatives)
    cfg = PipelineConfig(
        search_radius=int(np.ceil(spec.search_range_m / spec.beta)), loss=loss
    )
    negatives = scene_negatives(spec, args.negatives)
    result = optimize_primitives(
        scene, steps=args.steps, step_size=args.lr, cfg=cfg, negatives=negatives
    )
    payload = {
        "trace": result.trace,
        "grad_max_abs": result.grad_max_abs,
        "final": asdict(result.record),
        "steps": args.steps,
        "step_size": args.lr,
        "lambda1": args.lambda1,
    }
    Path(args.out).write_text(json.dumps(payload, indent=2))
    print(
        f"l_total {result.trace[0]:.6f} -> {result.trace[-1]:.6f} "
        f"({'decreased' if result.trace[-1] < result.trace[0] else 'did not decrease'})"
    )
    return 0


def _cmd_bench(args) -> int:
    result = run_bench(
        n_splats=args.splats, grid_size=args.size, threads=args.threads,
        c_dim=args.dim, seed=args.seed,
    )
    print(f"splats {result.n_splats}  grid {result.grid_size}  threads {result.threads}")
    print(f"tiled     {result.tiled_cells_per_s:12.0f} cells/s")
    print(f"reference {result.reference_cells_per_s:12.0f} cells/s")
    print(f"speedup   {result.speedup:12.2f}x")
    print(f"max |tiled - reference| = {result.max_abs_diff:.3e} (tolerance {AGREEMENT_TOL:g})")
    return 0 if result.agreement_ok else 1


def _cmd_scene(args) -> int:
    spec = SceneSpec.from_json(Path(args.spec).read_text())
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    scene = make_scene(spec)
    save_scene(scene, args.out)
    print(f"scene (planted {tuple(round(v, 3) for v in scene.planted_m)} m) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevsplat",
        description="Feature-Gaussian BEV splatting, matching, and localization tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="splat a primitive file into BEV maps")
    p.add_argument("--primitives", required=True, help=".bvt primitive rows [N, 12+C]")
    p.add_argument("--grid", required=True, help="JSON config with grid settings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dim", type=int, default=None, help="feature dim for empty inputs")
    p.add_argument("--ppm", action="store_true", help="also dump c_bev as plain PPM")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("gradcheck", help="analytic backward vs finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splats", type=int, default=64)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--samples", type=int, default=8, help="checks per parameter class")
    p.add_argument("--lambda1", type=int, default=1, choices=(0, 1))
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("localize", help="one query against a satellite feature map")
    p.add_argument("--sat", required=True, help="satellite features .bvt [C,S,S]")
    p.add_argument("--ground-dir", required=True,
                   help="directory with depth/features/confidence(.bvt), optional raw.bvt")
    p.add_argument("--config", required=True, help="JSON config (camera, grid, match)")
    p.add_argument("--out", required=True, help="result JSON path")
    p.add_argument("--save-similarity", default=None, help="optional similarity .bvt path")
    p.set_defaults(func=_cmd_localize)

    p = sub.add_parser("baseline", help="IPM or direct-projection BEV synthesis")
    p.add_argument("--method", required=True, choices=("ipm", "direct"))
    p.add_argument("--ground-dir", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("synth", help="synthetic localization evaluation")
    p.add_argument("--spec", required=True, help="SceneSpec JSON")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--pipeline", default="bevsplat", choices=("bevsplat", "ipm", "direct"))
    p.add_argument("--out", required=True, help="summary JSON path (records to .jsonl)")
    p.add_argument("--occluders", type=float, default=0.0,
                   help="fraction of scenes with tall occluders")
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("optimize", help="gradient descent on raw attributes")
    p.add_argument("--spec", required=True, help="SceneSpec JSON")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--lambda1", type=int, default=0, choices=(0, 1))
    p.add_argument("--negatives", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="trace JSON path")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("bench", help="tiled vs reference renderer throughput")
    p.add_argument("--splats", type=int, default=49152)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("scene", help="generate and save one synthetic scene")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_scene)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        set_threads(getattr(args, "threads", None))  # $BEVSPLAT_THREADS fallback
        return args.func(args)
    except (FileNotFoundError, TensorFormatError, json.JSONDecodeError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Throughput benchmark: tiled renderer against the naive reference."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ._threads import set_threads
from .geometry import BevGridSpec
from .renderer import RenderConfig, DEFAULT_CONFIG, SplatBatch, render_forward, render_reference

AGREEMENT_TOL = 1e-5


def random_splat_batch(seed: int, n: int, grid: BevGridSpec, c_dim: int = 32) -> SplatBatch:
    """Seeded random splats spread over the grid, 3DGS-like parameter ranges."""
    rng = np.random.default_rng(seed)
    mean2 = rng.uniform(-2.0, grid.size + 2.0, (n, 2))
    scales_m = rng.uniform(0.05, 0.5, (n, 2))
    ang = rng.uniform(0.0, np.pi, n)
    ca, sa = np.cos(ang), np.sin(ang)
    rot = np.stack([np.stack([ca, -sa], -1), np.stack([sa, ca], -1)], -2)
    cov = rot @ (np.eye(2) * (scales_m[:, None, :] / grid.beta) ** 2) @ rot.transpose(0, 2, 1)
    cov += 0.3 * np.eye(2)
    inv = np.linalg.inv(cov)
    conic = np.stack([inv[:, 0, 0], inv[:, 0, 1], inv[:, 1, 1]], axis=1)
    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam = mid + np.sqrt(0.25 * (cov[:, 0, 0] - cov[:, 1, 1]) ** 2 + cov[:, 0, 1] ** 2)
    return SplatBatch(
        mean2=mean2,
        cov2=cov,
        conic=conic,
        opacity=rng.uniform(0.2, 0.95, n),
        features=rng.normal(size=(n, c_dim)),
        confidences=rng.uniform(0.0, 1.0, n),
        sort_key=rng.normal(0.0, 3.0, n),
        radius=3.0 * np.sqrt(lam),
        ids=np.arange(n, dtype=np.int64),
    )


@dataclass
class BenchResult:
    n_splats: int
    grid_size: int
    threads: int
    tiled_cells_per_s: float
    reference_cells_per_s: float
    speedup: float
    max_abs_diff: float

    @property
    def agreement_ok(self) -> bool:
        return self.max_abs_diff <= AGREEMENT_TOL


def run_bench(
    n_splats: int = 49152,
    grid_size: int = 128,
    threads: int | None = None,
    c_dim: int = 32,
    seed: int = 0,
    config: RenderConfig = DEFAULT_CONFIG,
) -> BenchResult:
    """Time both renderers on one seeded scene and check their agreement."""
    eff = set_threads(threads)
    grid = BevGridSpec.centered(grid_size, 0.546875)
    batch = random_splat_batch(seed, n_splats, grid, c_dim)
    # warm the compiled kernels on a small slice before timing
    warm = random_splat_batch(seed + 1, 64, grid, c_dim)
    render_forward(warm, grid, config=config)
    render_reference(warm, grid, config=config)
    t0 = time.perf_counter()
    tiled = render_forward(batch, grid, config=config)
    t_tiled = time.perf_counter() - t0
    t0 = time.perf_counter()
    ref = render_reference(batch, grid, config=config)
    t_ref = time.perf_counter() - t0
    diff = max(
        float(np.max(np.abs(tiled.f_bev - ref.f_bev))),
        float(np.max(np.abs(tiled.c_bev - ref.c_bev))),
        float(np.max(np.abs(tiled.final_t - ref.final_t))),
    )
    cells = grid_size * grid_size
    return BenchResult(
        n_splats=n_splats,
        grid_size=grid_size,
        threads=eff,
        tiled_cells_per_s=cells / t_tiled,
        reference_cells_per_s=cells / t_ref,
        speedup=t_ref / t_tiled,
        max_abs_diff=diff,
    )

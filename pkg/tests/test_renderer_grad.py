"""Backward pass of the splatting renderer against finite differences."""

import numpy as np
import pytest

from bevsplat.bench import random_splat_batch
from bevsplat.geometry import BevGridSpec
from bevsplat.renderer import SplatBatch, render_backward, render_forward


def _scene(seed, n=48, c=3, size=16):
    grid = BevGridSpec.centered(size, 1.0)
    batch = random_splat_batch(seed, n, grid, c_dim=c)
    # well separated heights so the depth order is FD-stable
    rng = np.random.default_rng(seed + 1)
    batch.sort_key[:] = np.linspace(-3.0, 3.0, n)[rng.permutation(n)]
    # keep alpha off the 0.99 clamp
    batch.opacity[:] = np.clip(batch.opacity, 0.05, 0.9)
    rng2 = np.random.default_rng(seed + 2)
    dl_df = rng2.normal(size=(c, size, size))
    dl_dc = rng2.normal(size=(size, size))
    return grid, batch, dl_df, dl_dc


def _loss(batch, grid, dl_df, dl_dc):
    out = render_forward(batch, grid)
    return float(np.sum(out.f_bev * dl_df) + np.sum(out.c_bev * dl_dc))


def _clone(batch):
    return SplatBatch(
        batch.mean2.copy(), batch.cov2.copy(), batch.conic.copy(), batch.opacity.copy(),
        batch.features.copy(), batch.confidences.copy(), batch.sort_key.copy(),
        batch.radius.copy(), batch.ids.copy(),
    )


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences(seed):
    grid, batch, dl_df, dl_dc = _scene(seed)
    bundle = render_backward(batch, grid, dl_df, dl_dc)
    rng = np.random.default_rng(seed + 100)
    h = 1e-5
    for _ in range(24):
        j = int(rng.integers(len(batch)))
        kind = int(rng.integers(5))
        plus, minus = _clone(batch), _clone(batch)
        if kind == 0:
            ch = int(rng.integers(batch.feature_dim))
            plus.features[j, ch] += h
            minus.features[j, ch] -= h
            ana = bundle.d_feature[j, ch]
        elif kind == 1:
            plus.confidences[j] += h
            minus.confidences[j] -= h
            ana = bundle.d_confidence[j]
        elif kind == 2:
            plus.opacity[j] += h
            minus.opacity[j] -= h
            ana = bundle.d_opacity_base[j]
        elif kind == 3:
            k = int(rng.integers(2))
            plus.mean2[j, k] += h
            minus.mean2[j, k] -= h
            ana = bundle.d_mean2[j, k]
        else:
            k = int(rng.integers(3))
            r, c = [(0, 0), (0, 1), (1, 1)][k]
            plus.conic[j, k] += h
            minus.conic[j, k] -= h
            # packed off-diagonal feeds both symmetric entries
            ana = bundle.d_inv_cov2[j, r, c] * (2.0 if k == 1 else 1.0)
        fd = (_loss(plus, grid, dl_df, dl_dc) - _loss(minus, grid, dl_df, dl_dc)) / (2 * h)
        err = abs(ana - fd)
        assert err < 1e-6 or err / max(abs(ana), abs(fd)) < 1e-3


def test_single_splat_feature_gradient_is_alpha_weighted():
    # with one splat, T_b = 1 everywhere: dL/df = sum_cells upstream * alpha
    from bevsplat.renderer import Splat2D

    grid = BevGridSpec(size=8, beta=1.0, origin_x=0.0, origin_z=0.0)
    s = Splat2D(
        mean2=np.array([3.5, 4.5]), inv_cov2=np.eye(2) * 0.8, base_opacity=0.6,
        feature=np.array([2.0]), confidence=0.5, sort_key=0.0, radius=8.0, id=0,
    )
    rng = np.random.default_rng(0)
    dl_df = rng.normal(size=(1, 8, 8))
    bundle = render_backward([s], grid, dl_df, np.zeros((8, 8)))
    rr, cc = np.meshgrid(np.arange(8.0), np.arange(8.0), indexing="ij")
    d2 = (rr - 3.5) ** 2 + (cc - 4.5) ** 2
    alpha = 0.6 * np.exp(-0.5 * 0.8 * d2)
    expected = float(np.sum(dl_df[0] * alpha))
    assert bundle.d_feature[0, 0] == pytest.approx(expected, rel=1e-9)


def test_zero_upstream_gives_zero_bundle():
    grid = BevGridSpec.centered(16, 1.0)
    batch = random_splat_batch(4, 40, grid, c_dim=3)
    bundle = render_backward(batch, grid, np.zeros((3, 16, 16)), np.zeros((16, 16)))
    for arr in (bundle.d_feature, bundle.d_confidence, bundle.d_opacity_base,
                bundle.d_mean2, bundle.d_inv_cov2):
        assert not arr.any()


def test_classic_config_backward_respects_alpha_floor():
    # under the classic preset, cells where alpha < 1/255 contribute nothing
    # to the forward pass and must contribute nothing to the gradient
    from bevsplat.renderer import RenderConfig, Splat2D

    grid = BevGridSpec(size=8, beta=1.0, origin_x=0.0, origin_z=0.0)
    sigma = np.sqrt(1 / 0.8)  # radius contract: 3 std devs of the largest axis
    s = Splat2D(
        mean2=np.array([3.5, 4.5]), inv_cov2=np.eye(2) * 0.8, base_opacity=0.6,
        feature=np.array([2.0]), confidence=0.5, sort_key=0.0, radius=3 * sigma, id=0,
    )
    rng = np.random.default_rng(1)
    dl_df = rng.normal(size=(1, 8, 8))
    cfg = RenderConfig.classic()
    bundle = render_backward([s], grid, dl_df, np.zeros((8, 8)), cfg)
    rr, cc = np.meshgrid(np.arange(8.0), np.arange(8.0), indexing="ij")
    d2 = (rr - 3.5) ** 2 + (cc - 4.5) ** 2
    alpha = 0.6 * np.exp(-0.5 * 0.8 * d2)
    alpha[d2 > (3 * sigma) ** 2] = 0.0
    alpha[alpha < 1 / 255] = 0.0
    assert bundle.d_feature[0, 0] == pytest.approx(float(np.sum(dl_df[0] * alpha)), rel=1e-9)


def test_clamped_alpha_kills_geometry_gradients_only():
    from bevsplat.renderer import Splat2D

    grid = BevGridSpec(size=8, beta=1.0, origin_x=0.0, origin_z=0.0)
    s = Splat2D(
        mean2=np.array([3.0, 4.0]), inv_cov2=np.eye(2), base_opacity=1.0,
        feature=np.array([1.0]), confidence=1.0, sort_key=0.0, radius=6.0, id=0,
    )
    dl_df = np.zeros((1, 8, 8))
    dl_df[0, 3, 4] = 1.0  # only the clamped center cell carries upstream
    bundle = render_backward([s], grid, dl_df, np.zeros((8, 8)))
    assert bundle.d_feature[0, 0] == pytest.approx(0.99)
    assert bundle.d_opacity_base[0] == 0.0
    assert not bundle.d_mean2.any()
    assert not bundle.d_inv_cov2.any()

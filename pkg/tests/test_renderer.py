"""Forward splatting: projection, blending contracts, oracle agreement."""

import numpy as np
import pytest

from bevsplat._threads import set_threads
from bevsplat.bench import random_splat_batch
from bevsplat.geometry import BevGridSpec
from bevsplat.primitives import GaussianPrimitive
from bevsplat.renderer import (
    PROJECTION_DILATION,
    RenderConfig,
    Splat2D,
    project_to_bev,
    render_forward,
    render_reference,
)

GRID8 = BevGridSpec(size=8, beta=1.0, origin_x=0.0, origin_z=0.0)


def prim(mean, scale=(1.0, 1.0, 1.0), quat=(1.0, 0, 0, 0), opacity=0.5, feat=(1.0,), conf=1.0):
    return GaussianPrimitive(
        mean=np.array(mean, dtype=np.float64),
        scale=np.array(scale, dtype=np.float64),
        rotation=np.array(quat, dtype=np.float64),
        opacity=opacity,
        feature=np.array(feat, dtype=np.float64),
        confidence=conf,
        source=(0, 0),
    )


def splat_at(row, col, opacity=0.5, feat=(1.0,), conf=1.0, key=0.0, sid=0, inv=None):
    return Splat2D(
        mean2=np.array([row, col], dtype=np.float64),
        inv_cov2=np.eye(2) if inv is None else inv,
        base_opacity=opacity,
        feature=np.array(feat, dtype=np.float64),
        confidence=conf,
        sort_key=key,
        radius=6.0,
        id=sid,
    )


class TestProjection:
    def test_isotropic(self):
        s = project_to_bev(prim([0.0, 0.0, 0.0], scale=(0.7, 0.7, 0.7)), GRID8)
        var = 0.49 + PROJECTION_DILATION
        np.testing.assert_allclose(np.linalg.inv(s.inv_cov2), var * np.eye(2), atol=1e-12)
        assert s.radius == pytest.approx(3 * np.sqrt(var))

    def test_axis_selection_drops_y(self):
        s = project_to_bev(prim([0.0, 0.0, 0.0], scale=(2.0, 1.0, 1.0)), GRID8)
        cov = np.linalg.inv(s.inv_cov2)
        # row axis is z (variance 1 + dilation), col axis is x (variance 4 + dilation)
        np.testing.assert_allclose(cov, np.diag([1.3, 4.3]), atol=1e-12)

    def test_height_only_changes_sort_key(self):
        a = project_to_bev(prim([0.0, -10.0, 0.0]), GRID8)
        b = project_to_bev(prim([0.0, 10.0, 0.0]), GRID8)
        np.testing.assert_array_equal(a.mean2, b.mean2)
        assert a.sort_key == -10.0 and b.sort_key == 10.0

    def test_beta_converts_to_cell_units(self):
        g = BevGridSpec(size=8, beta=0.5, origin_x=0.0, origin_z=0.0)
        s = project_to_bev(prim([1.0, 0.0, 2.0], scale=(0.5, 0.5, 0.5)), g)
        np.testing.assert_allclose(s.mean2, [4.0, 2.0])
        cov = np.linalg.inv(s.inv_cov2)
        np.testing.assert_allclose(cov, (1.0 + PROJECTION_DILATION) * np.eye(2), atol=1e-12)


class TestForward:
    def test_empty_scene(self):
        out = render_forward([], GRID8, feature_dim=3)
        assert not out.f_bev.any()
        np.testing.assert_array_equal(out.final_t, 1.0)

    def test_single_splat_blending(self):
        out = render_forward([splat_at(3, 4, opacity=0.5, feat=(1.0, 2.0), conf=0.8)], GRID8)
        np.testing.assert_allclose(out.f_bev[:, 3, 4], [0.5, 1.0])
        assert out.c_bev[3, 4] == pytest.approx(0.4)
        assert out.final_t[3, 4] == pytest.approx(0.5)

    def test_two_term_expansion(self):
        front = splat_at(3, 4, opacity=0.5, feat=(1.0, 0.0), key=-1.0, sid=0)
        back = splat_at(3, 4, opacity=0.8, feat=(0.0, 1.0), key=1.0, sid=1)
        out = render_forward([front, back], GRID8)
        np.testing.assert_allclose(out.f_bev[:, 3, 4], [0.5, 0.4])
        assert out.final_t[3, 4] == pytest.approx(0.5 * 0.2)

    def test_alpha_clamp(self):
        out = render_forward([splat_at(3, 4, opacity=1.0)], GRID8)
        assert out.f_bev[0, 3, 4] == pytest.approx(0.99)

    def test_input_order_irrelevant_bitwise(self):
        grid = BevGridSpec.centered(32, 0.75)
        batch = random_splat_batch(11, 300, grid, c_dim=4)
        out = render_forward(batch, grid)
        rng = np.random.default_rng(1)
        shuffled = batch.permuted(rng.permutation(len(batch)))
        out2 = render_forward(shuffled, grid)
        assert out.f_bev.tobytes() == out2.f_bev.tobytes()
        assert out.c_bev.tobytes() == out2.c_bev.tobytes()
        assert out.final_t.tobytes() == out2.final_t.tobytes()

    def test_equal_keys_tie_break_by_id(self):
        a = splat_at(3, 4, opacity=0.5, feat=(1.0,), key=0.0, sid=0)
        b = splat_at(3, 4, opacity=0.5, feat=(0.0,), key=0.0, sid=1)
        out = render_forward([b, a], GRID8)
        # id 0 blends first regardless of list order
        assert out.f_bev[0, 3, 4] == pytest.approx(0.5)


class TestNormalization:
    def test_weight_plus_transmittance_is_one(self):
        grid = BevGridSpec.centered(24, 0.75)
        for seed in range(5):
            batch = random_splat_batch(seed, 200, grid, c_dim=3)
            batch.confidences[:] = 1.0  # c_bev then accumulates sum(alpha*T)
            out = render_forward(batch, grid)
            np.testing.assert_allclose(out.c_bev + out.final_t, 1.0, atol=1e-6)
            ref = render_reference(batch, grid)
            np.testing.assert_allclose(ref.c_bev + ref.final_t, 1.0, atol=1e-12)

    def test_confidence_below_one_never_exceeds_coverage(self):
        grid = BevGridSpec.centered(24, 0.75)
        batch = random_splat_batch(7, 200, grid, c_dim=3)
        out = render_forward(batch, grid)
        assert np.all(out.c_bev <= 1.0 - out.final_t + 1e-9)


def test_occlusion_monotonicity():
    grid = BevGridSpec.centered(16, 1.0)
    batch = random_splat_batch(3, 80, grid, c_dim=2)
    base = render_forward(batch, grid)
    blocker = splat_at(
        8, 8, opacity=1.0, feat=(0.0, 0.0), conf=0.0, key=-100.0, sid=10_000,
        inv=np.eye(2) / 1e6,  # huge footprint: alpha = 0.99 everywhere
    )
    blocked = render_forward(list(batch[i] for i in range(len(batch))) + [blocker], grid)
    # every later splat's contribution is scaled by (1 - 0.99)
    np.testing.assert_allclose(blocked.f_bev, 0.01 * base.f_bev, atol=1e-9)
    np.testing.assert_allclose(blocked.c_bev, 0.01 * base.c_bev, atol=1e-9)


class TestOracleAgreement:
    def test_twenty_seeded_scenes(self):
        grid = BevGridSpec.centered(32, 0.6)
        worst = 0.0
        for seed in range(20):
            batch = random_splat_batch(seed, 400, grid, c_dim=4)
            a = render_forward(batch, grid)
            b = render_reference(batch, grid)
            worst = max(
                worst,
                float(np.max(np.abs(a.f_bev - b.f_bev))),
                float(np.max(np.abs(a.c_bev - b.c_bev))),
                float(np.max(np.abs(a.final_t - b.final_t))),
            )
        assert worst < 1e-5

    def test_thread_count_does_not_change_bits(self):
        grid = BevGridSpec.centered(48, 0.6)
        batch = random_splat_batch(5, 600, grid, c_dim=4)
        outputs = []
        for req in (1, 4, 8):
            set_threads(req)
            out = render_forward(batch, grid)
            outputs.append(out.f_bev.tobytes() + out.c_bev.tobytes() + out.final_t.tobytes())
        set_threads(None)
        assert outputs[0] == outputs[1] == outputs[2]


def test_classic_config_keeps_spec_constants():
    cfg = RenderConfig.classic()
    assert cfg.alpha_floor == pytest.approx(1 / 255)
    assert cfg.transmittance_floor == pytest.approx(1e-4)
    assert cfg.footprint_sigma == 3.0
    # a splat whose alpha stays below 1/255 contributes nothing under classic
    weak = splat_at(3, 4, opacity=0.003)
    out = render_forward([weak], GRID8, config=cfg)
    assert not out.f_bev.any()
    assert render_forward([weak], GRID8).f_bev[0, 3, 4] > 0  # default keeps it

"""End-to-end chain: localization wiring and full-loss gradients."""

import numpy as np
import pytest

from bevsplat.gradcheck import make_gradcheck_scene, run_gradcheck
from bevsplat.pipeline import PipelineConfig, localize, loss_backward, loss_forward
from bevsplat.synth import SceneSpec, make_scene


def test_end_to_end_gradcheck_small():
    for seed in (0, 1):
        result = run_gradcheck(seed, n_splats=32, c_dim=4, samples_per_class=4)
        assert result.passed, result.per_class
        assert set(result.per_class) == {
            "offset", "scale", "rotation", "opacity", "feature", "confidence",
        }


def test_gradcheck_exercises_both_gps_branches():
    even = make_gradcheck_scene(0, 32, 4)
    odd = make_gradcheck_scene(1, 32, 4)
    even_cache = loss_forward(
        even.raw, even.ground, even.camera, even.grid,
        even.sat_pos, even.sat_negs, even.label, even.cfg,
    )
    odd_cache = loss_forward(
        odd.raw, odd.ground, odd.camera, odd.grid,
        odd.sat_pos, odd.sat_negs, odd.label, odd.cfg,
    )
    assert even_cache.report.l_gps == 0.0
    assert odd_cache.report.l_gps > 0.0


def test_loss_backward_shapes_and_finiteness():
    scene = make_gradcheck_scene(3, 24, 4)
    cache = loss_forward(
        scene.raw, scene.ground, scene.camera, scene.grid,
        scene.sat_pos, scene.sat_negs, scene.label, scene.cfg,
    )
    grads = loss_backward(cache)
    assert grads.d_raw.data.shape == scene.raw.data.shape
    assert grads.d_features.shape == scene.ground.features.shape
    assert grads.d_confidence.shape == scene.ground.confidence.shape
    for arr in (grads.d_raw.data, grads.d_features, grads.d_confidence):
        assert np.all(np.isfinite(arr))
    assert np.abs(grads.d_raw.data).max() > 0


def test_lambda1_requires_label():
    scene = make_gradcheck_scene(0, 16, 4)
    with pytest.raises(ValueError):
        loss_forward(
            scene.raw, scene.ground, scene.camera, scene.grid,
            scene.sat_pos, scene.sat_negs, None, scene.cfg,
        )


def test_localize_returns_consistent_peak():
    spec = SceneSpec(
        seed=9, image_height=32, image_width=96, grid_size=64, beta=0.546875,
        search_range_m=6.0, n_boxes=5, extent=26.0, feature_dim=8,
    )
    scene = make_scene(spec)
    cfg = PipelineConfig(search_radius=12)
    pk, sim, bev = localize(
        scene.ground, scene.satellite, spec.camera(), spec.grid(), cfg=cfg
    )
    assert sim.values.shape == (25, 25)
    assert pk.value == sim.values.max()
    assert bev.f_bev.shape == (8, 64, 64)
    est = np.array(pk.offset_m)
    assert np.hypot(*(est - np.array(scene.planted_m))) < 2 * spec.beta

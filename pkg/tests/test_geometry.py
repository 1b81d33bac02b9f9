"""Camera back-projection, angle conventions, and the BEV grid mapping."""

import math

import numpy as np
import pytest

from bevsplat.geometry import (
    BevGridSpec,
    PanoramaGeometry,
    PinholeIntrinsics,
    backproject_panorama,
    backproject_pinhole,
    camera_from_config,
    grid_from_config,
    panorama_pixel_to_angles,
    world_to_bev_cell,
)


class TestPinhole:
    def test_principal_ray(self):
        k = PinholeIntrinsics(1, 1, 0, 0)
        np.testing.assert_allclose(backproject_pinhole(0, 0, 1, k), [0, 0, 1])

    def test_diagonal_intrinsics(self):
        k = PinholeIntrinsics(2, 2, 0, 0)
        np.testing.assert_allclose(backproject_pinhole(2, 0, 1, k), [1, 0, 1])

    def test_zero_depth_maps_to_origin(self):
        k = PinholeIntrinsics(3, 5, 7, 2)
        np.testing.assert_allclose(backproject_pinhole(11, -4, 0, k), [0, 0, 0])

    def test_linear_in_depth(self):
        k = PinholeIntrinsics(2.3, 1.7, 0.4, -0.9)
        a = backproject_pinhole(5.0, 3.0, 2.0, k)
        b = backproject_pinhole(5.0, 3.0, 4.0, k)
        np.testing.assert_allclose(b, 2 * a)

    def test_invalid_focal_rejected(self):
        with pytest.raises(ValueError):
            PinholeIntrinsics(0, 1, 0, 0)


class TestPanorama:
    def test_azimuth_zero_horizontal(self):
        np.testing.assert_allclose(
            backproject_panorama(0.0, math.pi / 2, 2.0), [-2, 0, 0], atol=1e-15
        )

    def test_pole_points_up(self):
        # +Y is down, so the v=0 pole is -Y
        np.testing.assert_allclose(
            backproject_panorama(1.234, 0.0, 1.0), [0, -1, 0], atol=1e-15
        )

    def test_quarter_turn(self):
        np.testing.assert_allclose(
            backproject_panorama(math.pi / 2, math.pi / 2, 1.0), [0, 0, -1], atol=1e-15
        )

    def test_polar_domain_enforced(self):
        with pytest.raises(ValueError):
            backproject_panorama(0.0, -0.1, 1.0)
        with pytest.raises(ValueError):
            backproject_panorama(0.0, math.pi + 0.1, 1.0)

    def test_norm_equals_depth_on_grid(self):
        u = np.linspace(0, 2 * math.pi, 32, endpoint=False)
        v = np.linspace(0.01, math.pi - 0.01, 16)
        uu, vv = np.meshgrid(u, v)
        depth = 3.7
        pts = backproject_panorama(uu, vv, np.full_like(uu, depth))
        np.testing.assert_allclose(np.linalg.norm(pts, axis=-1), depth, rtol=1e-12)


class TestPixelAngles:
    def test_pixel_center_convention(self):
        g = PanoramaGeometry(width=4, height=2)
        u_ang, v_ang = panorama_pixel_to_angles(0, 0, g)
        assert u_ang == pytest.approx(math.pi / 4)
        assert v_ang == pytest.approx(math.pi / 4)

    def test_last_column(self):
        g = PanoramaGeometry(width=8, height=4)
        u_ang, _ = panorama_pixel_to_angles(7, 0, g)
        assert u_ang == pytest.approx(2 * math.pi - math.pi / 8)

    def test_out_of_range_rejected(self):
        g = PanoramaGeometry(width=4, height=2)
        with pytest.raises(ValueError):
            panorama_pixel_to_angles(4, 0, g)
        with pytest.raises(ValueError):
            panorama_pixel_to_angles(0, -1, g)


class TestBevGrid:
    def test_orthographic_drop_ignores_y(self):
        g = BevGridSpec(size=8, beta=0.5, origin_x=0, origin_z=0)
        np.testing.assert_allclose(world_to_bev_cell(np.array([0.0, -5.0, 0.0]), g), [0, 0])
        rng = np.random.default_rng(0)
        p = rng.normal(size=(20, 3))
        q = p.copy()
        q[:, 1] = rng.normal(size=20)
        np.testing.assert_array_equal(world_to_bev_cell(p, g), world_to_bev_cell(q, g))

    def test_linear_scaling(self):
        g = BevGridSpec(size=8, beta=0.5, origin_x=0, origin_z=0)
        np.testing.assert_allclose(world_to_bev_cell(np.array([1.0, 0.0, 2.0]), g), [4, 2])

    def test_unit_cell(self):
        g = BevGridSpec(size=8, beta=0.25, origin_x=1.0, origin_z=-1.0)
        p = np.array([1.0 + 0.25, 3.0, -1.0 + 0.25])
        np.testing.assert_allclose(world_to_bev_cell(p, g), [1, 1])

    def test_centered_grid_puts_camera_mid_grid(self):
        g = BevGridSpec.centered(128, 0.546875)
        np.testing.assert_allclose(world_to_bev_cell(np.zeros(3), g), [64, 64])


def test_config_parsing():
    cam = camera_from_config({"kind": "pinhole", "fx": 10, "fy": 12, "cx": 1, "cy": 2})
    assert isinstance(cam, PinholeIntrinsics) and cam.fy == 12
    cam = camera_from_config({"kind": "panorama", "width": 64, "height": 32})
    assert isinstance(cam, PanoramaGeometry) and cam.width == 64
    with pytest.raises(ValueError):
        camera_from_config({"kind": "fisheye"})
    g = grid_from_config({"size": 16, "beta": 0.5, "origin_x": -1.0, "origin_z": 2.0})
    assert (g.origin_x, g.origin_z) == (-1.0, 2.0)
    g = grid_from_config({"size": 16, "beta": 0.5})
    assert g.origin_x == -4.0 and g.origin_z == -4.0

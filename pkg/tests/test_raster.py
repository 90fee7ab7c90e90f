"""Rasterizer: forward compositing, the brute-force oracle, the backward pass."""

import numpy as np
import pytest

from svscene.errors import TapeMissing
from svscene.fields import _C0, softplus
from svscene.grid import GridConfig, SparseVoxelGrid
from svscene.raster import Camera, backward, brute_force_render, render

from conftest import axis_camera, oracle_scene, orbit_camera, random_grid


def _one_voxel_grid(density=1e4, color=(1.0, 0.0, 0.0), k=2):
    cfg = GridConfig([0, 0, 0], 2.0, L_max=4)
    g = SparseVoxelGrid(cfg, n_d=0, k=k)
    v_sh = np.zeros((1, 1, 3))
    v_sh[0, 0] = np.asarray(color) / _C0
    g.insert([1], [[0, 0, 0]], np.full((1, 8), density), v_sh,
             np.full((1, k), 0.7), [1.3])
    return g


class TestCamera:
    def test_rejects_bad_rotation(self):
        with pytest.raises(ValueError):
            Camera(fx=10, fy=10, cx=4, cy=4, R=np.eye(3) * 1.001, t=np.zeros(3), width=8, height=8)

    def test_rays_are_unit_and_z_scale_converts(self):
        cam = axis_camera(res=8)
        origin, dirs, z_scale = cam.rays()
        assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
        # depth along the ray times z_scale equals camera z
        p = origin + dirs * (2.0 / z_scale)[:, None]
        p_cam = p @ cam.R.T + cam.t
        assert np.allclose(p_cam[:, 2], 2.0, atol=1e-9)


class TestRenderForward:
    def test_single_opaque_voxel_center_pixel(self):
        g = _one_voxel_grid()
        res = 9
        cam = Camera(fx=res * 2.0, fy=res * 2.0, cx=res / 2, cy=res / 2,
                     R=np.eye(3), t=np.array([0.5, 0.5, 3.0]), width=res, height=res)
        b = render(g, cam)
        cy, cx = res // 2, res // 2
        assert b.rgb[cy, cx] == pytest.approx([1.0, 0.0, 0.0], abs=1e-6)
        # fully opaque: all weight on the first of the K=3 segment samples,
        # whose depth is entry + delta/6
        assert b.t_fin[cy, cx, 0] < 1e-12
        assert b.depth[cy, cx, 0] == pytest.approx(2.0 + 1.0 / 6.0, abs=1e-3)
        assert b.feat[cy, cx] == pytest.approx([0.7, 0.7], abs=1e-6)
        assert b.conf[cy, cx, 0] == pytest.approx(1.3, abs=1e-6)

    def test_empty_grid_is_pure_background(self):
        cfg = GridConfig([0, 0, 0], 2.0, L_max=4)
        g = SparseVoxelGrid(cfg, n_d=0, k=2)
        b = render(g, axis_camera())
        assert b.empty_grid
        for m in (b.rgb, b.feat, b.conf, b.depth, b.normal):
            assert np.all(m == 0.0)
        assert np.all(b.t_fin == 1.0)

    def test_weight_normalization_per_pixel(self, small_grid, small_camera):
        b = render(small_grid, small_camera)
        tape = b.tape
        hw = small_camera.width * small_camera.height
        sums = np.bincount(tape.pix_s, weights=tape.w_s, minlength=hw)
        assert np.max(np.abs(sums + tape.t_fin - 1.0)) < 1e-6

    def test_feature_map_linear_in_v_f(self, small_grid, small_camera):
        b1 = render(small_grid, small_camera, with_tape=False)
        small_grid.v_f *= 2.0
        small_grid._touch()
        b2 = render(small_grid, small_camera, with_tape=False)
        assert np.max(np.abs(b2.feat - 2.0 * b1.feat)) < 1e-12

    def test_order_sensitivity_two_voxels(self):
        cfg = GridConfig([0, 0, 0], 2.0, L_max=4)
        g = SparseVoxelGrid(cfg, n_d=0, k=1)
        sh = np.zeros((2, 1, 3))
        sh[0, 0, 0] = 3.0
        sh[1, 0, 1] = 3.0
        g.insert([1, 1], [[0, 0, 0], [1, 0, 0]], np.full((2, 8), 1.0), sh,
                 np.zeros((2, 1)), [0.0, 0.0])
        cam_a = Camera(fx=16, fy=16, cx=0.5, cy=0.5, R=np.eye(3),
                       t=np.array([0.0, 0.5, 3.0]), width=1, height=1)
        flip = np.diag([1.0, -1.0, -1.0])  # looking back along -z
        cam_b = Camera(fx=16, fy=16, cx=0.5, cy=0.5, R=flip,
                       t=flip @ np.array([0.0, 0.5, 3.0]) * -1.0, width=1, height=1)
        ba = render(g, cam_a, with_tape=False)
        bb = render(g, cam_b, with_tape=False)
        # same two voxels composited in opposite orders give different colors
        assert abs(ba.rgb[0, 0, 0] - bb.rgb[0, 0, 0]) > 1e-3

    def test_early_termination_soundness(self, small_grid, small_camera):
        b_cut = render(small_grid, small_camera, t_cutoff=1e-4, with_tape=False)
        b_full = render(small_grid, small_camera, t_cutoff=0.0, with_tape=False)
        for name in ("rgb", "feat", "conf", "depth"):
            assert np.max(np.abs(getattr(b_cut, name) - getattr(b_full, name))) < 1e-3


class TestBruteForceOracle:
    def test_constant_density_closed_form(self):
        density = 1.25
        g = _one_voxel_grid(density=density, k=1)
        res = 5
        cam = Camera(fx=res * 40.0, fy=res * 40.0, cx=res / 2, cy=res / 2,
                     R=np.eye(3), t=np.array([0.5, 0.5, 3.0]), width=res, height=res)
        b = brute_force_render(g, cam, n_steps=100000)
        # center ray crosses the unit voxel: alpha = 1 - exp(-softplus(d) * length)
        expect = 1.0 - np.exp(-float(softplus(np.array(density))) * 1.0)
        assert 1.0 - b.t_fin[res // 2, res // 2, 0] == pytest.approx(expect, abs=1e-4)

    def test_empty_grid_zeros(self):
        cfg = GridConfig([0, 0, 0], 2.0, L_max=4)
        g = SparseVoxelGrid(cfg, n_d=0, k=1)
        b = brute_force_render(g, axis_camera(res=4), n_steps=2000)
        assert np.all(b.rgb == 0) and np.all(b.t_fin == 1.0)

    def test_requires_enough_steps(self, small_grid):
        with pytest.raises(ValueError):
            brute_force_render(small_grid, axis_camera(res=4), n_steps=10)

    def test_render_matches_oracle(self):
        g = oracle_scene(seed=21)
        cam = orbit_camera(0.7, res=16)
        b = render(g, cam, with_tape=False)
        bf = brute_force_render(g, cam, n_steps=30000)
        for name in ("rgb", "feat", "conf", "depth", "normal", "t_fin"):
            assert np.max(np.abs(getattr(b, name) - getattr(bf, name))) < 1e-3, name


class TestBackward:
    def test_tape_missing(self, small_grid, small_camera):
        b = render(small_grid, small_camera, with_tape=False)
        with pytest.raises(TapeMissing):
            backward(b, {})

    def test_zero_upstream_zero_grads(self, small_grid, small_camera):
        b = render(small_grid, small_camera)
        g = backward(b, {})
        for arr in (g.v_geo, g.v_sh, g.v_f, g.v_conf):
            assert np.all(arr == 0.0)

    def test_confidence_gradient_is_weight(self):
        g = _one_voxel_grid(density=0.8, k=1)
        cam = Camera(fx=8, fy=8, cx=0.5, cy=0.5, R=np.eye(3),
                     t=np.array([0.5, 0.5, 3.0]), width=1, height=1)
        b = render(g, cam)
        up = np.ones((1, 1, 1))
        grads = backward(b, {"conf": up})
        total_w = float(np.sum(b.tape.w_s))
        assert grads.v_conf[0] == pytest.approx(total_w, abs=1e-12)

    def test_full_finite_difference_jacobian(self):
        rng = np.random.default_rng(31)
        g = random_grid(seed=31, n=14, level=2, k=3, dens_loc=-0.2, dens_std=0.5)
        cam = axis_camera(res=6, dist=2.9)
        up = {
            "rgb": rng.normal(size=(6, 6, 3)),
            "feat": rng.normal(size=(6, 6, 3)),
            "conf": rng.normal(size=(6, 6, 1)),
            "depth": rng.normal(size=(6, 6, 1)),
            "normal": rng.normal(size=(6, 6, 3)),
        }

        def loss():
            g._touch()
            b = render(g, cam, with_tape=False)
            return (
                np.sum(up["rgb"] * b.rgb) + np.sum(up["feat"] * b.feat)
                + np.sum(up["conf"] * b.conf) + np.sum(up["depth"] * b.depth)
                + np.sum(up["normal"] * b.normal)
            )

        bundle = render(g, cam)
        an = backward(bundle, up)
        h = 1e-4
        for arr, ga in ((g.v_geo, an.v_geo), (g.v_sh, an.v_sh), (g.v_f, an.v_f), (g.v_conf, an.v_conf)):
            flat, gflat = arr.reshape(-1), ga.reshape(-1)
            idxs = rng.choice(flat.size, size=min(40, flat.size), replace=False)
            for i in idxs:
                old = flat[i]
                flat[i] = old + h
                lp = loss()
                flat[i] = old - h
                lm = loss()
                flat[i] = old
                fd = (lp - lm) / (2 * h)
                err = abs(fd - gflat[i])
                assert err < 1e-4 * max(abs(fd), abs(gflat[i]), 1.0) or err < 1e-6
        g._touch()

    def test_deterministic_given_fixed_order(self, small_grid, small_camera):
        rng = np.random.default_rng(0)
        up = {"rgb": rng.normal(size=(16, 16, 3))}
        b = render(small_grid, small_camera)
        g1 = backward(b, up)
        g2 = backward(b, up)
        assert np.array_equal(g1.v_sh, g2.v_sh)

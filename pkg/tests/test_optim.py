"""Adam optimizer, grid initialization, training loop behavior."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from svscene.distill import TeacherBundle
from svscene.errors import DatasetEmpty, NonFiniteGradient, TeacherMismatch
from svscene.grid import GridConfig
from svscene.optim import AdamState, TrainConfig, adam_step, evaluate_view, init_grid, train
from svscene.modulate import ModulationNet

from conftest import orbit_camera


class TestAdam:
    def test_zero_grad_keeps_params_moments(self):
        p = np.array([1.0, -2.0])
        st_ = AdamState.for_array(p)
        st_.step(p, np.zeros(2), 0.1)
        assert np.array_equal(p, [1.0, -2.0])
        assert np.all(st_.m == 0.0) and np.all(st_.v == 0.0)

    def test_first_step_identity(self):
        p = np.zeros(1)
        st_ = AdamState.for_array(p)
        adam_step(p, np.ones(1), st_, 0.1)
        assert p[0] == pytest.approx(-0.1, abs=1e-8)

    def test_bitwise_match_with_scalar_reference(self):
        def reference(theta, steps, lr=0.02, b1=0.9, b2=0.999, eps=1e-8):
            m = v = 0.0
            for t in range(1, steps + 1):
                g = 2.0 * theta
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                m_hat = m / (1 - b1 ** t)
                v_hat = v / (1 - b2 ** t)
                theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
            return theta

        theta = np.array([1.0])
        st_ = AdamState.for_array(theta)
        for _ in range(10):
            st_.step(theta, 2.0 * theta, 0.02)
        assert theta[0].hex() == reference(1.0, 10).hex()

    def test_nonfinite_gradient_skips_group(self):
        p = np.array([1.0])
        st_ = AdamState.for_array(p)
        assert not st_.step(p, np.array([np.nan]), 0.1)
        assert p[0] == 1.0 and st_.t == 0
        with pytest.raises(NonFiniteGradient):
            adam_step(p, np.array([np.inf]), st_, 0.1)

    @given(st.integers(0, 2 ** 31), st.floats(0.25, 1000.0))
    def test_scale_free_first_step(self, seed, c):
        rng = np.random.default_rng(seed)
        g = rng.normal(size=7)
        g = np.where(np.abs(g) < 0.01, 0.01, g)  # the invariant holds up to eps effects
        p1 = np.zeros(7)
        s1 = AdamState.for_array(p1)
        s1.step(p1, g, 0.1)
        p2 = np.zeros(7)
        s2 = AdamState.for_array(p2)
        s2.step(p2, c * g, 0.1)
        assert np.max(np.abs(p1 - p2)) < 1e-6


def _tiny_problem(n_views=2, res=12, k=6, seed=0, with_teachers=True):
    rng = np.random.default_rng(seed)
    views, teachers = [], []
    for i in range(n_views):
        cam = orbit_camera(0.9 * i + 0.3, res=res)
        img = rng.random((res, res, 3)) * 0.6
        views.append((img, cam))
        teachers.append(
            TeacherBundle(
                m_a=rng.normal(size=(res, res, k)),
                d_d=rng.uniform(1.5, 4.0, size=(res, res, 1)),
                m_g=rng.normal(size=(res, res, 4)),
            )
        )
    return views, (teachers if with_teachers else None)


def _tiny_config(**kw):
    base = dict(
        iterations=12, k=6, embed_slots=6, init_level=2, seed=3,
        subdivide_every=5, prune_every=5, voxel_budget=3000,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_smoke_descent_single_view(self):
        views, teachers = _tiny_problem(n_views=1)
        cfg = _tiny_config(iterations=60, subdivide_every=0, prune_every=0)
        res = train(views, teachers, cfg)
        assert all(np.isfinite(r.l_total) for r in res.log)
        assert res.log[-1].l_r < res.log[0].l_r

    def test_dataset_empty(self):
        with pytest.raises(DatasetEmpty):
            train([], None, _tiny_config())

    def test_teacher_mismatch(self):
        views, teachers = _tiny_problem(n_views=2)
        with pytest.raises(TeacherMismatch):
            train(views, [teachers[0], None], _tiny_config())

    def test_deterministic_given_seed(self):
        views, teachers = _tiny_problem(n_views=2)
        r1 = train(views, teachers, _tiny_config())
        r2 = train(views, teachers, _tiny_config())
        assert np.array_equal(r1.grid.v_geo, r2.grid.v_geo)
        assert np.array_equal(r1.grid.v_f, r2.grid.v_f)
        assert np.array_equal(r1.net.f_e1, r2.net.f_e1)
        assert [r.l_total for r in r1.log] == [r.l_total for r in r2.log]

    def test_no_teacher_degeneracy_bitwise(self):
        views, teachers = _tiny_problem(n_views=2)
        cfg_off = _tiny_config(
            lambda1=0.0, enable_feature=False, enable_confidence=False,
            enable_depth=False, enable_pattern=False,
        )
        with_teachers = train(views, teachers, cfg_off)
        without = train(views, None, cfg_off)
        assert np.array_equal(with_teachers.grid.v_geo, without.grid.v_geo)
        assert np.array_equal(with_teachers.grid.v_sh, without.grid.v_sh)
        assert np.array_equal(with_teachers.net.f_e2, without.net.f_e2)

    def test_log_is_json_lines(self, tmp_path):
        views, teachers = _tiny_problem(n_views=2)
        log = tmp_path / "loss.jsonl"
        train(views, teachers, _tiny_config(), log_file=log)
        import json

        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert len(lines) == 12
        assert set(lines[0]) == {"step", "lr", "l_r", "l_f", "l_c", "l_d", "l_p", "l_total", "n_voxels"}


class TestSubdivisionPreservesLoss:
    def test_loss_unchanged_across_event(self):
        views, teachers = _tiny_problem(n_views=1, res=10)
        cfg = _tiny_config(iterations=6, subdivide_every=0, prune_every=0)
        res = train(views, teachers, cfg)
        grid, net = res.grid, res.net
        img, cam = views[0]
        before = evaluate_view(grid, cam, img, teachers[0], net, cfg, want_grads=False)
        rows = np.argsort(-np.linalg.norm(grid.v_geo, axis=1))[:3]
        grid.subdivide_rows(rows)
        after = evaluate_view(grid, cam, img, teachers[0], net, cfg, want_grads=False)
        for key in ("l_r", "l_f", "l_c", "l_d", "l_p", "l_total"):
            assert after.report_values[key] == pytest.approx(
                before.report_values[key], abs=1e-6
            ), key


class TestInitGrid:
    def test_visible_shell_nonempty_and_uniform_level(self):
        cams = [orbit_camera(a, res=16) for a in (0.0, 2.0, 4.0)]
        cfg = _tiny_config()
        grid = init_grid(GridConfig(np.zeros(3), 2.0, 10), cfg, cams, np.random.default_rng(0))
        assert grid.n > 0
        assert np.all(grid.levels == cfg.init_level)

    def test_moment_inheritance_tracks_subdivision(self):
        views, teachers = _tiny_problem(n_views=1, res=8)
        cfg = _tiny_config(iterations=4, subdivide_every=0, prune_every=0)
        res = train(views, teachers, cfg)
        grid = res.grid
        state = AdamState.for_array(grid.v_geo)
        state.m = np.random.default_rng(1).normal(size=grid.v_geo.shape)
        state.v = np.abs(np.random.default_rng(2).normal(size=grid.v_geo.shape))
        m_before = state.m.copy()
        rec = grid.subdivide_rows([0])
        state.remap(rec, trilinear_geo=True)
        assert state.m.shape == grid.v_geo.shape
        assert np.all(state.v >= 0.0)
        # surviving rows keep their moment values
        survivor = np.flatnonzero(rec.child_octant < 0)[0]
        assert np.array_equal(state.m[survivor], m_before[rec.source_rows[survivor]])

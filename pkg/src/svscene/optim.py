"""Adam optimizer, training configuration, grid initialization and the
training loop with its view schedule and subdivision/pruning schedule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .distill import (
    LossReport,
    LossWeights,
    TeacherBundle,
    loss_confidence,
    loss_depth_corr,
    loss_feature,
    loss_pattern,
    loss_recon,
    loss_total,
)
from .errors import DatasetEmpty, DegenerateDepth, NonFiniteGradient, TeacherMismatch
from .fields import _C0
from .grid import GridConfig, MutationRecord, SparseVoxelGrid
from .modulate import ModulationNet, NetGrads, modulation_backward, run_modulation
from .raster import Camera, GridGrads, backward, render

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moment buffers and step counter for one tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_array(cls, arr, **kw):
        return cls(m=np.zeros_like(arr), v=np.zeros_like(arr), **kw)

    def step(self, param, grad, lr: float) -> bool:
        """Bias-corrected Adam update in place; skips non-finite gradients."""
        grad = np.asarray(grad)
        if not np.all(np.isfinite(grad)):
            logger.warning("non-finite gradient; skipping update for this group")
            return False
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True

    def remap(self, record: MutationRecord, trilinear_geo: bool = False):
        self.m = record.apply_to_buffer(self.m, trilinear_geo=trilinear_geo)
        self.v = record.apply_to_buffer(self.v, trilinear_geo=trilinear_geo)


def adam_step(params, grads, state: AdamState, lr: float):
    """Functional wrapper over AdamState.step; returns the updated params."""
    if not state.step(params, grads, lr):
        raise NonFiniteGradient("gradient contained NaN or Inf")
    return params


@dataclass
class TrainConfig:
    """Every knob of a training run; defaults follow the desk-scale design."""

    iterations: int = 20000
    k: int = 32
    n_d: int = 1
    embed_slots: int = 64
    n_samples: int = 3
    seed: int = 0
    # learning rates with exponential decay to lr * lr_final_scale
    lr_density: float = 0.05
    lr_sh: float = 0.01
    lr_feat: float = 0.01
    lr_conf: float = 0.01
    lr_net: float = 1e-3
    lr_final_scale: float = 0.1
    # loss weights
    lambda1: float = 0.1
    lambda2: float = 0.01
    lambda_ssim: float = 0.2
    enable_feature: bool = True
    enable_confidence: bool = True
    enable_depth: bool = True
    enable_pattern: bool = True
    # structure schedule
    init_level: int = 4
    subdivide_every: int = 1000
    subdivide_frac: float = 0.05
    prune_every: int = 500
    tau_d: float = 1e-4
    voxel_budget: int = 80000
    budget_stop_frac: float = 0.7
    # init values
    init_geo_loc: float = -4.0
    init_geo_std: float = 0.1
    init_feat_std: float = 0.01
    init_conf: float = 2.0
    init_gray: float = 0.5
    holdout: Optional[int] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2, lambda_ssim=self.lambda_ssim)

    def lr_at(self, it: int) -> float:
        return self.lr_final_scale ** (it / max(1, self.iterations))


def frustum_visible_cells(grid_cfg: GridConfig, level: int, cameras) -> np.ndarray:
    """Indices (N, 3) of level-`level` cells whose box is visible in any camera."""
    n = 1 << level
    idx = np.stack(np.meshgrid(*([np.arange(n)] * 3), indexing="ij"), axis=-1).reshape(-1, 3)
    vs = grid_cfg.w_s / n
    vmin = grid_cfg.origin[None, :] + idx * vs
    corners = vmin[:, None, :] + vs * _CORNERS[None, :, :]
    visible = np.zeros(idx.shape[0], dtype=bool)
    for cam in cameras:
        pxy, z = cam.project(corners.reshape(-1, 3))
        pxy = pxy.reshape(-1, 8, 2)
        z = z.reshape(-1, 8)
        front = z > 1e-9
        any_front = front.any(axis=1)
        straddle = any_front & ~front.all(axis=1)
        px, py = pxy[..., 0], pxy[..., 1]
        with np.errstate(invalid="ignore"):
            inx = (np.where(front, px, np.inf).min(axis=1) <= cam.width) & (
                np.where(front, px, -np.inf).max(axis=1) >= 0.0
            )
            iny = (np.where(front, py, np.inf).min(axis=1) <= cam.height) & (
                np.where(front, py, -np.inf).max(axis=1) >= 0.0
            )
        visible |= straddle | (any_front & inx & iny)
        if visible.all():
            break
    return idx[visible]


_CORNERS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.float64)


def init_grid(grid_cfg: GridConfig, cfg: TrainConfig, cameras, rng) -> SparseVoxelGrid:
    """Uniform dense shell at the initial level over the camera-visible region."""
    grid = SparseVoxelGrid(grid_cfg, n_d=cfg.n_d, k=cfg.k)
    idx = frustum_visible_cells(grid_cfg, cfg.init_level, cameras)
    if idx.shape[0] == 0:
        raise DatasetEmpty("no grid cells visible from the given cameras")
    n = idx.shape[0]
    s = grid.sh_terms
    v_geo = rng.normal(cfg.init_geo_loc, cfg.init_geo_std, size=(n, 8))
    v_sh = np.zeros((n, s, 3))
    v_sh[:, 0, :] = cfg.init_gray / _C0
    v_f = rng.normal(0.0, cfg.init_feat_std, size=(n, cfg.k))
    v_conf = np.full(n, cfg.init_conf)
    grid.insert(np.full(n, cfg.init_level), idx, v_geo, v_sh, v_f, v_conf, validate=False)
    return grid


@dataclass
class ViewEval:
    report_values: dict
    grid_grads: Optional[GridGrads]
    net_grads: Optional[NetGrads]
    n_samples_tape: int = 0
    vox: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None


def evaluate_view(
    grid: SparseVoxelGrid,
    cam: Camera,
    gt_image: np.ndarray,
    teacher: Optional[TeacherBundle],
    net: ModulationNet,
    cfg: TrainConfig,
    want_grads: bool = True,
) -> ViewEval:
    """Render one view, evaluate every enabled loss, and backpropagate to all
    grid and modulation parameters."""
    weights = cfg.weights()
    bundle = render(grid, cam, n_samples=cfg.n_samples, with_tape=want_grads, with_normals=False)
    maps = run_modulation(bundle.rgb, net, m_r=bundle.feat, with_tape=want_grads)

    l_r, recon_grads = loss_recon(bundle.rgb, maps.m_m, gt_image, cfg.lambda_ssim, want_grad=want_grads)
    l_f = l_c = l_d = l_p = 0.0
    g_mf_f = g_mc_f = g_mc_c = g_dr = g_mf_p = None
    if teacher is not None:
        if cfg.enable_feature and weights.lambda1 != 0.0:
            l_f, fg = loss_feature(maps.m_f, teacher.m_a, bundle.conf, want_grad=want_grads)
            if want_grads:
                g_mf_f, g_mc_f = fg
        if cfg.enable_confidence:
            l_c, g_mc_c = loss_confidence(bundle.conf, want_grad=want_grads)
        if cfg.enable_depth:
            try:
                l_d, g_dr = loss_depth_corr(bundle.depth, teacher.d_d, want_grad=want_grads)
            except DegenerateDepth:
                logger.warning("degenerate depth; skipping depth correlation for this view")
                l_d, g_dr = 0.0, None
        if cfg.enable_pattern:
            l_p, g_mf_p = loss_pattern(maps.m_f, teacher.m_g, want_grad=want_grads)
    total = loss_total(l_r, l_f, l_c, l_d, l_p, weights)
    values = {"l_r": l_r, "l_f": l_f, "l_c": l_c, "l_d": l_d, "l_p": l_p, "l_total": total}
    if not want_grads:
        return ViewEval(values, None, None)

    g_mi, g_mm = recon_grads
    g_mf = None
    if g_mf_f is not None:
        g_mf = weights.lambda1 * g_mf_f
    if g_mf_p is not None:
        g_mf = g_mf_p if g_mf is None else g_mf + g_mf_p
    mod_grads = modulation_backward(maps, g_mm=g_mm, g_mf=g_mf)

    g_conf = None
    if g_mc_f is not None:
        g_conf = weights.lambda1 * g_mc_f
    if g_mc_c is not None:
        g_conf = g_mc_c if g_conf is None else g_conf + g_mc_c
    raster_up = {
        "rgb": g_mi + mod_grads.m_i,
        "feat": mod_grads.m_r,
        "conf": g_conf,
        "depth": weights.lambda2 * g_dr if g_dr is not None else None,
    }
    grid_grads = backward(bundle, raster_up)
    tape = bundle.tape
    return ViewEval(values, grid_grads, mod_grads.net, vox=tape.vox_p, w=tape.w_p)


@dataclass
class TrainResult:
    grid: SparseVoxelGrid
    net: ModulationNet
    log: list
    config: TrainConfig


_GRID_GROUPS = ("v_geo", "v_sh", "v_f", "v_conf")


def train(
    views,
    teachers,
    cfg: TrainConfig,
    grid_cfg: Optional[GridConfig] = None,
    log_file=None,
    callback=None,
) -> TrainResult:
    """Optimize a fresh grid and modulation net on the given posed views.

    ``views`` is a list of (image (H,W,3) in [0,1], Camera); ``teachers`` is an
    aligned list of TeacherBundle, or None for reconstruction-only training.
    The run is fully deterministic given the config seed.
    """
    if len(views) == 0:
        raise DatasetEmpty("no training views")
    if teachers is not None:
        if len(teachers) != len(views) or any(t is None for t in teachers):
            raise TeacherMismatch("every view needs a matching teacher bundle")
        for (img, _), t in zip(views, teachers):
            t.validate(img.shape[0], img.shape[1], cfg.k)

    train_ids = [i for i in range(len(views)) if i != cfg.holdout]
    if not train_ids:
        raise DatasetEmpty("holdout leaves no training views")

    ss = np.random.SeedSequence(cfg.seed)
    rng_init, rng_sched, rng_net = (np.random.default_rng(s) for s in ss.spawn(3))
    if grid_cfg is None:
        grid_cfg = GridConfig(np.zeros(3), 2.0, L_max=12)
    grid = init_grid(grid_cfg, cfg, [views[i][1] for i in train_ids], rng_init)
    net = ModulationNet.create(cfg.k, cfg.embed_slots, rng=rng_net)

    lrs = {
        "v_geo": cfg.lr_density, "v_sh": cfg.lr_sh, "v_f": cfg.lr_feat, "v_conf": cfg.lr_conf,
    }
    grid_adam = {g: AdamState.for_array(getattr(grid, g)) for g in _GRID_GROUPS}
    net_adam = {name: AdamState.for_array(p) for name, p in net.params().items()}

    stat_grad = np.zeros(grid.n)
    stat_wmax = np.zeros(grid.n)
    log: list = []
    schedule: list = []

    fh = open(log_file, "a") if log_file is not None else None
    try:
        for it in range(1, cfg.iterations + 1):
            if not schedule:
                schedule = list(rng_sched.permutation(train_ids))
            vid = int(schedule.pop(0))
            img, cam = views[vid]
            teacher = teachers[vid] if teachers is not None else None
            ev = evaluate_view(grid, cam, img, teacher, net, cfg, want_grads=True)
            if not np.isfinite(ev.report_values["l_total"]):
                raise NonFiniteGradient(f"non-finite loss at iteration {it}")

            decay = cfg.lr_at(it)
            for gname in _GRID_GROUPS:
                grid_adam[gname].step(getattr(grid, gname), getattr(ev.grid_grads, gname), lrs[gname] * decay)
            net_params = net.params()
            net_grads = ev.net_grads.params()
            for name, p in net_params.items():
                net_adam[name].step(p, net_grads[name], cfg.lr_net * decay)

            stat_grad += np.linalg.norm(ev.grid_grads.v_geo, axis=1)
            if ev.vox is not None and ev.vox.size:
                np.maximum.at(stat_wmax, ev.vox, ev.w)

            report = LossReport(
                step=it, lr=decay, n_voxels=grid.n, **ev.report_values,
            )
            log.append(report)
            if fh is not None:
                fh.write(report.to_json_line() + "\n")
            if callback is not None:
                callback(it, report, grid, net)

            structural = False
            if cfg.prune_every and it % cfg.prune_every == 0 and it < cfg.iterations:
                removed, rec = grid.prune_rows(cfg.tau_d)
                if removed:
                    _remap_grid_state(grid_adam, rec)
                    stat_grad = rec.apply_to_buffer(stat_grad)
                    stat_wmax = rec.apply_to_buffer(stat_wmax)
                    structural = True
                    logger.info("iter %d: pruned %d voxels (%d left)", it, removed, grid.n)
            if (
                cfg.subdivide_every
                and it % cfg.subdivide_every == 0
                and it < cfg.iterations
                and grid.n < cfg.budget_stop_frac * cfg.voxel_budget
            ):
                rows = _select_subdivision_rows(grid, cfg, stat_grad * stat_wmax)
                if rows.size:
                    rec = grid.subdivide_rows(rows)
                    _remap_grid_state(grid_adam, rec)
                    structural = True
                    logger.info("iter %d: subdivided %d voxels (%d now)", it, rows.size, grid.n)
            if structural:
                stat_grad = np.zeros(grid.n)
                stat_wmax = np.zeros(grid.n)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(grid=grid, net=net, log=log, config=cfg)


def _remap_grid_state(grid_adam, rec: MutationRecord):
    for gname, state in grid_adam.items():
        state.remap(rec, trilinear_geo=(gname == "v_geo"))


def _select_subdivision_rows(grid, cfg, priority):
    eligible = np.flatnonzero(grid.levels < grid.config.L_max)
    if eligible.size == 0:
        return eligible
    want = int(np.ceil(cfg.subdivide_frac * grid.n))
    room = (cfg.voxel_budget - grid.n) // 7
    want = max(0, min(want, eligible.size, int(room)))
    if want == 0:
        return np.zeros(0, dtype=np.int64)
    p = priority[eligible]
    top = np.argsort(p, kind="stable")[::-1][:want]
    rows = eligible[top]
    return rows[p[top] > 0.0]

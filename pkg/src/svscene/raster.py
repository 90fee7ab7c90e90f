"""Differentiable forward rendering of sparse voxel scenes plus the matching
reverse-mode backward pass and a brute-force ray-marching oracle.

Compositing follows front-to-back alpha blending at sample granularity: each
ray/voxel segment is cut into K equal sub-segments sampled at their midpoints,
every sample contributes alpha_s = 1 - exp(-softplus(d_s) * delta/K) and
weight w_s = alpha_s * T_s with T the running transmittance.  Color, feature,
confidence, depth (z-depth of the sample point) and density normals all share
the same weights; color/feature/confidence are constant within a segment, so
their accumulation runs at segment (pair) granularity.  The background
contributes zero color/feature/confidence and depth t_far * T_fin, with t_far
the ray's exit from the octree box.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit as sigmoid

from .errors import TapeMissing
from .fields import sh_basis, softplus, trilinear_grad_weights, trilinear_weights
from .grid import SparseVoxelGrid

logger = logging.getLogger(__name__)

T_CUTOFF = 1e-4
_Z_EPS = 1e-9


@dataclass
class Camera:
    """Pinhole camera: world-to-camera rotation/translation, pixel intrinsics.

    Convention is right handed with +z into the screen (x right, y down);
    p_cam = R @ p_world + t and pixel x = fx * X/Z + cx.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be >= 1")
        if np.max(np.abs(self.R @ self.R.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal within 1e-9")

    @property
    def position(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def rays(self):
        """Unit world-space ray directions through all pixel centers.

        Returns (origin (3,), dirs (H*W, 3), z_scale (H*W,)) where z_scale
        converts a ray parameter (world distance) into camera z-depth.
        """
        xs = (np.arange(self.width, dtype=np.float64) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height, dtype=np.float64) + 0.5 - self.cy) / self.fy
        u, v = np.meshgrid(xs, ys)
        d_cam = np.stack([u, v, np.ones_like(u)], axis=-1).reshape(-1, 3)
        norm = np.linalg.norm(d_cam, axis=1)
        d_cam /= norm[:, None]
        dirs = d_cam @ self.R  # R^T @ d for each row
        return self.position, dirs, 1.0 / norm

    def project(self, pts):
        """World points to (pixel xy (N,2), camera depth z (N,))."""
        p = np.asarray(pts, dtype=np.float64).reshape(-1, 3) @ self.R.T + self.t
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.fx * p[:, 0] / z + self.cx
            py = self.fy * p[:, 1] / z + self.cy
        return np.stack([px, py], axis=1), z


@dataclass
class RenderTape:
    """Compositing record retained for the backward pass.

    Sample-level arrays (suffix _s) hold the K sub-segment samples that
    survived the transmittance cutoff; pair-level arrays (suffix _p) hold one
    entry per contributing ray/voxel segment.
    """

    # sample level, sorted by (pixel, t)
    pix_s: np.ndarray
    pair_s: np.ndarray           # index into the pair arrays
    t_s: np.ndarray
    dt_s: np.ndarray
    u_s: np.ndarray
    raw_d: np.ndarray
    log_one_m_alpha: np.ndarray  # log(1 - alpha) = -sigma * dt
    t_before: np.ndarray
    w_s: np.ndarray
    starts_s: np.ndarray         # pixel-group starts into sample arrays
    # pair level, sorted by (pixel, t_entry)
    vox_p: np.ndarray
    pix_p: np.ndarray
    w_p: np.ndarray              # sum of surviving sample weights
    c_pre_p: np.ndarray          # (Mp, 3) pre-clamp color
    pair_starts: np.ndarray      # sample-group starts per pair
    starts_p: np.ndarray         # pixel-group starts into pair arrays
    group_pix: np.ndarray        # pixel of each pair group
    # per pixel
    basis: np.ndarray
    t_fin: np.ndarray
    t_far_z: np.ndarray
    z_scale: np.ndarray
    # normals (sample level), present when rendered with normals
    n_grad: Optional[np.ndarray]
    n_valid: Optional[np.ndarray]
    grid: SparseVoxelGrid = None
    n_samples: int = 3
    cutoff: float = T_CUTOFF


@dataclass
class RenderBundle:
    """All maps rendered for one view plus the backward tape."""

    rgb: np.ndarray       # (H, W, 3)
    feat: np.ndarray      # (H, W, k)
    conf: np.ndarray      # (H, W, 1)
    depth: np.ndarray     # (H, W, 1) camera z-depth
    normal: np.ndarray    # (H, W, 3)
    t_fin: np.ndarray     # (H, W, 1)
    camera: Camera = None
    tape: Optional[RenderTape] = None
    empty_grid: bool = False


@dataclass
class GridGrads:
    """Gradient buffers aligned with the grid's payload arrays."""

    v_geo: np.ndarray
    v_sh: np.ndarray
    v_f: np.ndarray
    v_conf: np.ndarray

    @classmethod
    def zeros_like(cls, grid: SparseVoxelGrid):
        return cls(
            v_geo=np.zeros_like(grid.v_geo),
            v_sh=np.zeros_like(grid.v_sh),
            v_f=np.zeros_like(grid.v_f),
            v_conf=np.zeros_like(grid.v_conf),
        )


def _ray_box(origin, dirs, bmin, bmax):
    """Slab test of many rays against one box: (t0, t1) with t0 <= t1 on hit."""
    t0 = np.full(dirs.shape[0], -np.inf)
    t1 = np.full(dirs.shape[0], np.inf)
    for ax in range(3):
        d = dirs[:, ax]
        o = origin[ax]
        nz = d != 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            a = (bmin[ax] - o) / d
            b = (bmax[ax] - o) / d
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        inside = (o >= bmin[ax]) & (o <= bmax[ax])
        lo = np.where(nz, lo, np.where(inside, -np.inf, np.inf))
        hi = np.where(nz, hi, np.where(inside, np.inf, -np.inf))
        t0 = np.maximum(t0, lo)
        t1 = np.minimum(t1, hi)
    return t0, t1


def _pairs_ray_box(origins_ax, dirs, bmin, bmax):
    """Slab test per (ray, box) pair: dirs (M,3), bmin/bmax (M,3)."""
    t0 = np.full(dirs.shape[0], -np.inf)
    t1 = np.full(dirs.shape[0], np.inf)
    for ax in range(3):
        d = dirs[:, ax]
        o = origins_ax[ax]
        nz = d != 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            a = (bmin[:, ax] - o) / d
            b = (bmax[:, ax] - o) / d
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        inside = (o >= bmin[:, ax]) & (o <= bmax[:, ax])
        lo = np.where(nz, lo, np.where(inside, -np.inf, np.inf))
        hi = np.where(nz, hi, np.where(inside, np.inf, -np.inf))
        t0 = np.maximum(t0, lo)
        t1 = np.minimum(t1, hi)
    return t0, t1


def _empty_tape(grid, hw, s_terms):
    z = np.zeros(0)
    zi = np.zeros(0, np.int64)
    return RenderTape(
        pix_s=zi, pair_s=zi, t_s=z, dt_s=z, u_s=np.zeros((0, 3)), raw_d=z,
        log_one_m_alpha=z, t_before=z, w_s=z, starts_s=zi,
        vox_p=zi, pix_p=zi, w_p=z, c_pre_p=np.zeros((0, 3)), pair_starts=zi,
        starts_p=zi, group_pix=zi,
        basis=np.zeros((hw, s_terms)), t_fin=np.ones(hw),
        t_far_z=np.zeros(hw), z_scale=np.ones(hw),
        n_grad=None, n_valid=None, grid=grid,
    )


def _empty_bundle(grid, cam, with_tape):
    h, w = cam.height, cam.width
    k = grid.k if grid is not None else 0
    tape = _empty_tape(grid, h * w, grid.sh_terms if grid else 1) if with_tape else None
    return RenderBundle(
        rgb=np.zeros((h, w, 3)), feat=np.zeros((h, w, k)), conf=np.zeros((h, w, 1)),
        depth=np.zeros((h, w, 1)), normal=np.zeros((h, w, 3)),
        t_fin=np.ones((h, w, 1)), camera=cam, tape=tape, empty_grid=True,
    )


def _candidate_pairs(grid, cam, dirs, origin):
    """Conservative (voxel, pixel) candidates from projected voxel footprints."""
    h, w = cam.height, cam.width
    vmin, vs = grid.geometry_arrays()
    corners = vmin[:, None, :] + vs[:, None, None] * _CORNER_UNIT[None, :, :]
    flat = corners.reshape(-1, 3)
    pxy, z = cam.project(flat)
    pxy = pxy.reshape(-1, 8, 2)
    z = z.reshape(-1, 8)
    front = z > _Z_EPS
    any_front = front.any(axis=1)
    all_front = front.all(axis=1)
    x0 = np.zeros(grid.n, np.int64)
    x1 = np.full(grid.n, w - 1, np.int64)
    y0 = np.zeros(grid.n, np.int64)
    y1 = np.full(grid.n, h - 1, np.int64)
    ok = all_front
    if ok.any():
        px = pxy[ok, :, 0]
        py = pxy[ok, :, 1]
        x0[ok] = np.clip(np.ceil(px.min(axis=1) - 0.5 - 1e-9), 0, w - 1).astype(np.int64)
        x1[ok] = np.clip(np.floor(px.max(axis=1) - 0.5 + 1e-9), -1, w - 1).astype(np.int64)
        y0[ok] = np.clip(np.ceil(py.min(axis=1) - 0.5 - 1e-9), 0, h - 1).astype(np.int64)
        y1[ok] = np.clip(np.floor(py.max(axis=1) - 0.5 + 1e-9), -1, h - 1).astype(np.int64)
    visible = any_front & (x1 >= x0) & (y1 >= y0)
    vis_rows = np.flatnonzero(visible)
    if vis_rows.size == 0:
        return (np.zeros(0, np.int64),) * 2
    bw = x1[vis_rows] - x0[vis_rows] + 1
    bh = y1[vis_rows] - y0[vis_rows] + 1
    counts = bw * bh
    total = int(counts.sum())
    vox = np.repeat(vis_rows, counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    e = np.arange(total, dtype=np.int64) - np.repeat(offsets, counts)
    bw_r = np.repeat(bw, counts)
    py_i = np.repeat(y0[vis_rows], counts) + e // bw_r
    px_i = np.repeat(x0[vis_rows], counts) + e % bw_r
    pix = py_i * w + px_i
    return vox, pix


_CORNER_UNIT = np.array(
    [[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.float64
)


def _group_starts(sorted_ids):
    return np.flatnonzero(np.diff(sorted_ids, prepend=-1))


def render(
    grid: SparseVoxelGrid,
    cam: Camera,
    n_samples: int = 3,
    t_cutoff: float = T_CUTOFF,
    with_tape: bool = True,
    with_normals: bool = True,
) -> RenderBundle:
    """Forward rendering of all maps for one view.

    Hits are processed strictly front to back, compositing stops once the
    transmittance drops below ``t_cutoff``; the tape records exactly the
    samples that contributed so the backward pass is consistent.
    """
    h, w = cam.height, cam.width
    hw = h * w
    origin, dirs, z_scale = cam.rays()
    if grid.n == 0:
        logger.warning("render called on an empty grid; returning pure background")
        return _empty_bundle(grid, cam, with_tape)

    box_t0, box_t1 = _ray_box(origin, dirs, grid.config.origin, grid.config.origin + grid.config.w_s)
    box_hit = box_t1 > np.maximum(box_t0, 0.0)
    t_far_z = np.where(box_hit, box_t1 * z_scale, 0.0)
    basis = sh_basis(dirs, grid.n_d)

    vmin_all, vs_all = grid.geometry_arrays()
    vox, pix = _candidate_pairs(grid, cam, dirs, origin)
    if vox.size:
        bmin = vmin_all[vox]
        bmax = bmin + vs_all[vox, None]
        t0, t1 = _pairs_ray_box(origin, dirs[pix], bmin, bmax)
        t0 = np.maximum(t0, 0.0)
        keep = t1 > t0
        vox, pix, t0, t1 = vox[keep], pix[keep], t0[keep], t1[keep]

    if vox.size == 0:
        b = _empty_bundle(grid, cam, with_tape)
        b.empty_grid = False
        if with_tape:
            b.tape.t_far_z = t_far_z
            b.tape.z_scale = z_scale
            b.tape.basis = basis
            b.tape.n_samples = n_samples
            b.tape.cutoff = t_cutoff
        b.depth = t_far_z.reshape(h, w, 1).copy()
        return b

    order = np.lexsort((grid.keys()[vox], t0, pix))
    vox, pix, t0, t1 = vox[order], pix[order], t0[order], t1[order]

    # K midpoint samples per segment
    K = int(n_samples)
    mp0 = vox.size
    offs = (np.arange(K, dtype=np.float64) + 0.5) / K
    t_s = (t0[:, None] + (t1 - t0)[:, None] * offs[None, :]).reshape(-1)
    dt_s = np.repeat((t1 - t0) / K, K)
    pair_s = np.repeat(np.arange(mp0, dtype=np.int64), K)
    pix_s = pix[pair_s]
    vox_s = vox[pair_s]
    pts = origin[None, :] + dirs[pix_s] * t_s[:, None]
    u_s = np.clip((pts - vmin_all[vox_s]) / vs_all[vox_s, None], 0.0, 1.0)
    wts = trilinear_weights(u_s)
    raw_d = np.einsum("mc,mc->m", wts, grid.v_geo[vox_s])
    sig = softplus(raw_d)
    lg = -sig * dt_s  # log(1 - alpha)

    # grouped cumulative transmittance in log space
    csum = np.cumsum(lg)
    starts = _group_starts(pix_s)
    base = csum[starts] - lg[starts]
    counts = np.diff(np.append(starts, pix_s.size))
    log_t_incl = csum - np.repeat(base, counts)
    t_before = np.exp(log_t_incl - lg)
    active = t_before > t_cutoff

    pix_s, pair_s, t_s, dt_s, u_s, raw_d, lg, log_t_incl, t_before = (
        a[active] for a in (pix_s, pair_s, t_s, dt_s, u_s, raw_d, lg, log_t_incl, t_before)
    )
    w_s = t_before - np.exp(log_t_incl)  # alpha * T, exactly
    ms = pix_s.size

    starts_s = _group_starts(pix_s)
    t_fin = np.ones(hw)
    if ms:
        ends = np.append(starts_s[1:], ms) - 1
        t_fin[pix_s[starts_s]] = np.exp(log_t_incl[ends])

    # compact pairs to those with surviving samples
    pair_starts = _group_starts(pair_s)
    live_pairs = pair_s[pair_starts] if ms else np.zeros(0, np.int64)
    vox_p = vox[live_pairs]
    pix_p = pix[live_pairs]
    mp = vox_p.size
    pair_s = np.searchsorted(live_pairs, pair_s)  # reindex samples to live pairs

    w_p = np.add.reduceat(w_s, pair_starts) if mp else np.zeros(0)
    wt_p = np.add.reduceat(w_s * t_s * z_scale[pix_s], pair_starts) if mp else np.zeros(0)

    c_pre_p = np.einsum("ms,msc->mc", basis[pix_p], grid.v_sh[vox_p])
    color_p = np.maximum(0.0, c_pre_p)

    n_grad = n_valid = None
    wn_p = np.zeros((mp, 3))
    if with_normals and ms:
        gw = trilinear_grad_weights(u_s)
        n_grad = np.einsum("mac,mc->ma", gw, grid.v_geo[vox_p[pair_s]])
        norms = np.linalg.norm(n_grad, axis=1)
        n_valid = norms > 1e-12
        normal_s = np.where(
            n_valid[:, None], -n_grad / np.maximum(norms, 1e-300)[:, None], 0.0
        )
        wn_p = np.add.reduceat(w_s[:, None] * normal_s, pair_starts, axis=0)

    k = grid.k
    payload_p = np.concatenate(
        [
            w_p[:, None] * color_p,
            w_p[:, None] * grid.v_f[vox_p],
            (w_p * grid.v_conf[vox_p])[:, None],
            wt_p[:, None],
            wn_p,
        ],
        axis=1,
    )
    starts_p = _group_starts(pix_p)
    group_pix = pix_p[starts_p] if mp else np.zeros(0, np.int64)
    maps = np.zeros((hw, 3 + k + 1 + 1 + 3))
    if mp:
        maps[group_pix] = np.add.reduceat(payload_p, starts_p, axis=0)
    rgb = maps[:, :3].reshape(h, w, 3)
    feat = maps[:, 3:3 + k].reshape(h, w, k)
    conf = maps[:, 3 + k:4 + k].reshape(h, w, 1)
    depth = maps[:, 4 + k:5 + k].reshape(h, w, 1) + (t_fin * t_far_z).reshape(h, w, 1)
    normal = maps[:, 5 + k:].reshape(h, w, 3)

    tape = None
    if with_tape:
        tape = RenderTape(
            pix_s=pix_s, pair_s=pair_s, t_s=t_s, dt_s=dt_s, u_s=u_s, raw_d=raw_d,
            log_one_m_alpha=lg, t_before=t_before, w_s=w_s, starts_s=starts_s,
            vox_p=vox_p, pix_p=pix_p, w_p=w_p, c_pre_p=c_pre_p,
            pair_starts=_group_starts(pair_s),
            starts_p=starts_p, group_pix=group_pix,
            basis=basis, t_fin=t_fin, t_far_z=t_far_z, z_scale=z_scale,
            n_grad=n_grad, n_valid=n_valid, grid=grid, n_samples=K, cutoff=t_cutoff,
        )
    return RenderBundle(
        rgb=rgb, feat=feat, conf=conf, depth=depth, normal=normal,
        t_fin=t_fin.reshape(h, w, 1), camera=cam, tape=tape,
    )


def backward(bundle: RenderBundle, grads: dict) -> GridGrads:
    """Reverse-mode pass through compositing into per-voxel gradient buffers.

    ``grads`` maps output names ('rgb', 'feat', 'conf', 'depth', 'normal',
    't_fin') to upstream gradient arrays shaped like the bundle maps; missing
    or None entries are treated as zero.  Accumulation is deterministic for a
    fixed hit order.
    """
    tape = bundle.tape
    if tape is None:
        raise TapeMissing("render was called without a tape")
    grid = tape.grid
    g = GridGrads.zeros_like(grid)
    ms = tape.pix_s.size
    hw = tape.t_fin.size

    def _flat(name, ch):
        a = grads.get(name)
        if a is None:
            return None
        return np.asarray(a, dtype=np.float64).reshape(hw, ch)

    g_rgb = _flat("rgb", 3)
    g_feat = _flat("feat", grid.k)
    g_conf = _flat("conf", 1)
    g_depth = _flat("depth", 1)
    g_normal = _flat("normal", 3)
    g_tfin = _flat("t_fin", 1)

    # background (post-sample) contribution per pixel
    bgq = np.zeros(hw)
    if g_depth is not None:
        bgq += g_depth[:, 0] * tape.t_far_z * tape.t_fin
    if g_tfin is not None:
        bgq += g_tfin[:, 0] * tape.t_fin

    if ms == 0:
        return g

    # payload-dot-upstream per pair (constant within a segment) ...
    q_p = np.zeros(tape.vox_p.size)
    color_p = np.maximum(0.0, tape.c_pre_p)
    if g_rgb is not None:
        q_p += np.einsum("mc,mc->m", g_rgb[tape.pix_p], color_p)
    if g_feat is not None:
        q_p += np.einsum("mc,mc->m", g_feat[tape.pix_p], grid.v_f[tape.vox_p])
    if g_conf is not None:
        q_p += g_conf[tape.pix_p, 0] * grid.v_conf[tape.vox_p]
    # ... plus the per-sample depth/normal parts
    q_s = q_p[tape.pair_s]
    if g_depth is not None:
        q_s = q_s + g_depth[tape.pix_s, 0] * tape.t_s * tape.z_scale[tape.pix_s]
    normal_s = None
    if g_normal is not None and tape.n_grad is not None:
        norms = np.linalg.norm(tape.n_grad, axis=1)
        normal_s = np.where(
            tape.n_valid[:, None], -tape.n_grad / np.maximum(norms, 1e-300)[:, None], 0.0
        )
        q_s = q_s + np.einsum("mc,mc->m", g_normal[tape.pix_s], normal_s)

    # d(loss)/d(alpha_i) = T_i q_i - (suffix_j>i w_j q_j + background) / (1-alpha_i)
    a = tape.w_s * q_s
    csum = np.cumsum(a)
    base = csum[tape.starts_s] - a[tape.starts_s]
    counts = np.diff(np.append(tape.starts_s, ms))
    incl = csum - np.repeat(base, counts)
    totals = incl[np.append(tape.starts_s[1:], ms) - 1]
    suffix = np.repeat(totals, counts) - incl + bgq[tape.pix_s]

    one_m_alpha = np.exp(tape.log_one_m_alpha)
    d_alpha = tape.t_before * q_s - suffix / one_m_alpha
    d_sigma = d_alpha * one_m_alpha * tape.dt_s
    d_raw = d_sigma * sigmoid(tape.raw_d)

    n = grid.n
    vox_s = tape.vox_p[tape.pair_s]
    wts = trilinear_weights(tape.u_s)
    for c in range(8):
        g.v_geo[:, c] += np.bincount(vox_s, weights=d_raw * wts[:, c], minlength=n)

    if g_rgb is not None:
        dc = np.where(tape.c_pre_p > 0.0, tape.w_p[:, None] * g_rgb[tape.pix_p], 0.0)
        basis_p = tape.basis[tape.pix_p]
        for s in range(grid.sh_terms):
            for ch in range(3):
                g.v_sh[:, s, ch] += np.bincount(
                    tape.vox_p, weights=basis_p[:, s] * dc[:, ch], minlength=n
                )

    if g_feat is not None:
        gf = tape.w_p[:, None] * g_feat[tape.pix_p]
        order = np.argsort(tape.vox_p, kind="stable")
        vs_sorted = tape.vox_p[order]
        vstarts = _group_starts(vs_sorted)
        sums = np.add.reduceat(gf[order], vstarts, axis=0)
        g.v_f[vs_sorted[vstarts]] += sums

    if g_conf is not None:
        g.v_conf += np.bincount(tape.vox_p, weights=tape.w_p * g_conf[tape.pix_p, 0], minlength=n)

    if g_normal is not None and tape.n_grad is not None and tape.n_valid.any():
        norms = np.linalg.norm(tape.n_grad, axis=1)
        r = np.maximum(norms, 1e-300)
        ghat = tape.n_grad / r[:, None]
        dldn = tape.w_s[:, None] * g_normal[tape.pix_s]
        proj = np.einsum("mc,mc->m", ghat, dldn)
        dg = np.where(
            tape.n_valid[:, None], (-dldn + ghat * proj[:, None]) / r[:, None], 0.0
        )
        gw = trilinear_grad_weights(tape.u_s)
        dcorner = np.einsum("ma,mac->mc", dg, gw)
        for c in range(8):
            g.v_geo[:, c] += np.bincount(vox_s, weights=dcorner[:, c], minlength=n)

    return g


def brute_force_render(
    grid: SparseVoxelGrid,
    cam: Camera,
    n_steps: int,
    with_normals: bool = True,
    chunk_px: Optional[int] = None,
) -> RenderBundle:
    """Uniform ray-marching reference renderer (no tape, test oracle only)."""
    if n_steps < 1000:
        raise ValueError("brute_force_render needs n_steps >= 1000")
    h, w = cam.height, cam.width
    origin, dirs, z_scale = cam.rays()
    if grid.n == 0:
        return _empty_bundle(grid, cam, with_tape=False)

    box_t0, box_t1 = _ray_box(origin, dirs, grid.config.origin, grid.config.origin + grid.config.w_s)
    t_lo = np.maximum(box_t0, 0.0)
    box_hit = box_t1 > t_lo
    t_far_z = np.where(box_hit, box_t1 * z_scale, 0.0)

    k = grid.k
    basis = sh_basis(dirs, grid.n_d)
    rgb = np.zeros((h * w, 3))
    feat = np.zeros((h * w, k))
    conf = np.zeros((h * w, 1))
    depth = np.zeros((h * w, 1))
    normal = np.zeros((h * w, 3))
    t_fin = np.ones(h * w)

    if chunk_px is None:
        chunk_px = max(1, int(4_000_000 // n_steps))
    px_ids = np.flatnonzero(box_hit)
    for lo in range(0, px_ids.size, chunk_px):
        ids = px_ids[lo:lo + chunk_px]
        p = ids.size
        tlo = t_lo[ids][:, None]
        thi = box_t1[ids][:, None]
        dt = (thi - tlo) / n_steps
        t_j = tlo + (np.arange(n_steps)[None, :] + 0.5) * dt
        pts = origin[None, None, :] + dirs[ids][:, None, :] * t_j[..., None]
        rows = grid.point_rows(pts.reshape(-1, 3)).reshape(p, n_steps)
        hit = rows >= 0
        sig = np.zeros((p, n_steps))
        if hit.any():
            hrows = rows[hit]
            vmin, vs = grid.geometry_arrays()
            u = (pts[hit] - vmin[hrows]) / vs[hrows, None]
            u = np.clip(u, 0.0, 1.0)
            raw = np.einsum("mc,mc->m", trilinear_weights(u), grid.v_geo[hrows])
            sig[hit] = softplus(raw)
        lg = -sig * dt
        csum = np.cumsum(lg, axis=1)
        t_before = np.exp(csum - lg)
        w_j = t_before - np.exp(csum)
        t_fin[ids] = np.exp(csum[:, -1])

        pay = np.zeros((p, n_steps, 3 + k + 1 + 3))
        if hit.any():
            hrows = rows[hit]
            b = np.broadcast_to(basis[ids][:, None, :], (p, n_steps, basis.shape[1]))[hit]
            c_pre = np.einsum("ms,msc->mc", b, grid.v_sh[hrows])
            pay[hit, :3] = np.maximum(0.0, c_pre)
            pay[hit, 3:3 + k] = grid.v_f[hrows]
            pay[hit, 3 + k] = grid.v_conf[hrows]
            if with_normals:
                gvec = np.einsum("mac,mc->ma", trilinear_grad_weights(u), grid.v_geo[hrows])
                norms = np.linalg.norm(gvec, axis=1)
                ok = norms > 1e-12
                pay[hit, 4 + k:] = np.where(
                    ok[:, None], -gvec / np.maximum(norms, 1e-300)[:, None], 0.0
                )
        acc = np.einsum("pj,pjc->pc", w_j, pay)
        rgb[ids] = acc[:, :3]
        feat[ids] = acc[:, 3:3 + k]
        conf[ids, 0] = acc[:, 3 + k]
        tz = t_j * z_scale[ids][:, None]
        depth[ids, 0] = np.einsum("pj,pj->p", w_j, tz)
        normal[ids] = acc[:, 4 + k:]
    depth[:, 0] += t_fin * t_far_z

    return RenderBundle(
        rgb=rgb.reshape(h, w, 3), feat=feat.reshape(h, w, k),
        conf=conf.reshape(h, w, 1), depth=depth.reshape(h, w, 1),
        normal=normal.reshape(h, w, 3), t_fin=t_fin.reshape(h, w, 1),
        camera=cam, tape=None,
    )

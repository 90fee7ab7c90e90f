"""Per-voxel field evaluation: trilinear density, alpha, SH color, density normals.

Corner arrays are flat length-8 in x-major order: corner (ix, iy, iz) sits at
index ix*4 + iy*2 + iz, matching ``v_geo.reshape(2, 2, 2)[ix, iy, iz]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.special import expit as sigmoid  # noqa: F401  (re-exported)

if TYPE_CHECKING:
    from .grid import GridConfig, OctreeAddress, VoxelHit, VoxelPayload

NORMAL_EPS = 1e-12


def softplus(x):
    """Numerically stable log(1 + exp(x))."""
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def trilinear_weights(u):
    """Interpolation weights of the 8 cube corners at local coords u in [0,1]^3.

    Returns (..., 8) in x-major corner order.
    """
    u = np.asarray(u, dtype=np.float64)
    ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
    wx = np.stack([1.0 - ux, ux], axis=-1)
    wy = np.stack([1.0 - uy, uy], axis=-1)
    wz = np.stack([1.0 - uz, uz], axis=-1)
    w = wx[..., :, None, None] * wy[..., None, :, None] * wz[..., None, None, :]
    return w.reshape(u.shape[:-1] + (8,))


def trilinear_grad_weights(u):
    """d(weight_c)/d(u_axis): (..., 3, 8) tensor of corner-weight gradients."""
    u = np.asarray(u, dtype=np.float64)
    ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
    wx = np.stack([1.0 - ux, ux], axis=-1)
    wy = np.stack([1.0 - uy, uy], axis=-1)
    wz = np.stack([1.0 - uz, uz], axis=-1)
    one = np.ones_like(ux)
    dx = np.stack([-one, one], axis=-1)
    gx = dx[..., :, None, None] * wy[..., None, :, None] * wz[..., None, None, :]
    gy = wx[..., :, None, None] * dx[..., None, :, None] * wz[..., None, None, :]
    gz = wx[..., :, None, None] * wy[..., None, :, None] * dx[..., None, None, :]
    g = np.stack([gx, gy, gz], axis=-4)
    return g.reshape(u.shape[:-1] + (3, 8))


def sample_density(payload, u):
    """Trilinear interpolation of the raw corner densities at u in [0,1]^3."""
    corners = np.asarray(payload.v_geo, dtype=np.float64).reshape(8)
    return float(trilinear_weights(u) @ corners)


def density_normal(payload, u) -> Optional[np.ndarray]:
    """Unit normal -grad(d)/|grad(d)| of the trilinear field, or None if flat.

    The gradient is taken in local cube coordinates; for cubic voxels the
    direction equals the world-space one.
    """
    corners = np.asarray(payload.v_geo, dtype=np.float64).reshape(8)
    g = trilinear_grad_weights(u) @ corners
    norm = np.linalg.norm(g)
    if norm <= NORMAL_EPS:
        return None
    return -g / norm


@dataclass
class RaySample:
    """One density sample along a ray inside a voxel."""

    addr: "OctreeAddress"
    u: np.ndarray
    t: float
    delta: float


def segment_samples(hit, origin, direction, cfg, n_samples):
    """Local coordinates and t values of the midpoint samples of a hit segment."""
    from .grid import voxel_geometry

    v_c, v_s = voxel_geometry(hit.address, cfg)
    delta = hit.t_exit - hit.t_entry
    offs = (np.arange(n_samples, dtype=np.float64) + 0.5) / n_samples
    t = hit.t_entry + offs * delta
    pts = np.asarray(origin)[None, :] + np.asarray(direction)[None, :] * t[:, None]
    u = np.clip((pts - v_c[None, :]) / v_s, 0.0, 1.0)
    return u, t, delta


def segment_alpha(payload, hit, origin, direction, cfg, n_samples: int) -> float:
    """Opacity of one voxel segment: 1 - exp(-sum softplus(d_s) * delta / K)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    u, _, delta = segment_samples(hit, origin, direction, cfg, n_samples)
    if delta <= 0:
        return 0.0
    corners = np.asarray(payload.v_geo, dtype=np.float64).reshape(8)
    d = trilinear_weights(u) @ corners
    tau = float(np.sum(softplus(d)) * delta / n_samples)
    return float(-np.expm1(-tau))


# ---------------------------------------------------------------------- real SH

# Textbook real spherical harmonics (no Condon-Shortley phase), degrees 0..3.
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
       1.0925484305920792, 0.5462742152960396)
_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
       0.3731763325901154, 0.4570457994644658, 1.445305721320277,
       0.5900435899266435)


def sh_basis(dirs, n_d: int):
    """Real SH basis values for unit directions: (..., (n_d+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full(x.shape, _C0)]
    if n_d >= 1:
        out += [_C1 * y, _C1 * z, _C1 * x]
    if n_d >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            _C2[0] * x * y,
            _C2[1] * y * z,
            _C2[2] * (3.0 * zz - 1.0),
            _C2[3] * x * z,
            _C2[4] * (xx - yy),
        ]
    if n_d >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            _C3[0] * y * (3.0 * xx - yy),
            _C3[1] * x * y * z,
            _C3[2] * y * (5.0 * zz - 1.0),
            _C3[3] * z * (5.0 * zz - 3.0),
            _C3[4] * x * (5.0 * zz - 1.0),
            _C3[5] * z * (xx - yy),
            _C3[6] * x * (xx - 3.0 * yy),
        ]
    return np.stack(out, axis=-1)


def eval_sh(v_sh, direction):
    """View-dependent color max(0, sum coeff * Y(dir)) per channel."""
    v_sh = np.asarray(v_sh, dtype=np.float64)
    n_terms = v_sh.shape[-2]
    n_d = int(round(np.sqrt(n_terms))) - 1
    if (n_d + 1) ** 2 != n_terms:
        raise ValueError("SH coefficient count must be a square")
    basis = sh_basis(direction, n_d)
    pre = np.einsum("...s,...sc->...c", basis, v_sh)
    return np.maximum(0.0, pre)

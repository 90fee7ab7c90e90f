"""Training losses: reconstruction, confidence-masked feature distillation,
confidence regularization, depth correlation, pattern consistency, and the
weighted total, each with its reverse-mode contribution.

All losses are mean-reduced so the weight coefficients are resolution
independent.  Standard deviation and vector-norm denominators are guarded
with max(value, 1e-8) so the documented invariances (affine invariance of the
depth term, unit similarity of constant maps) hold to tight tolerances.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit as sigmoid

from .errors import DegenerateDepth, ShapeMismatch
from .fields import softplus
from .metrics import ssim_with_grad

logger = logging.getLogger(__name__)

EPS_GUARD = 1e-8
EPS_STD = 1e-8
LAMBDA_SSIM = 0.2

_NEIGHBOR_OFFSETS = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


@dataclass
class TeacherBundle:
    """Per-view supervision: latent language features, prior depth, geometry features."""

    m_a: np.ndarray  # (H, W, k)
    d_d: np.ndarray  # (H, W, 1)
    m_g: np.ndarray  # (H, W, C_g)

    def validate(self, h, w, k):
        if self.m_a.shape != (h, w, k):
            raise ShapeMismatch(f"m_a must be ({h}, {w}, {k}), got {self.m_a.shape}")
        if self.d_d.shape != (h, w, 1):
            raise ShapeMismatch(f"d_d must be ({h}, {w}, 1), got {self.d_d.shape}")
        if self.m_g.ndim != 3 or self.m_g.shape[:2] != (h, w):
            raise ShapeMismatch(f"m_g must be ({h}, {w}, C), got {self.m_g.shape}")
        for a in (self.m_a, self.d_d, self.m_g):
            if not np.all(np.isfinite(a)):
                raise ShapeMismatch("teacher maps must be finite")


@dataclass
class LossWeights:
    """Coefficients of the total objective."""

    lambda1: float = 0.1
    lambda2: float = 0.01
    lambda_ssim: float = LAMBDA_SSIM


@dataclass
class LossReport:
    step: int
    lr: float
    l_r: float
    l_f: float
    l_c: float
    l_d: float
    l_p: float
    l_total: float
    n_voxels: int

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "step": self.step, "lr": self.lr, "l_r": self.l_r, "l_f": self.l_f,
                "l_c": self.l_c, "l_d": self.l_d, "l_p": self.l_p,
                "l_total": self.l_total, "n_voxels": self.n_voxels,
            },
            sort_keys=True,
        )


def _l1_with_grad(x, y):
    diff = x - y
    val = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return val, grad


def loss_recon(m_i, m_m, gt, lambda_ssim: float = LAMBDA_SSIM, want_grad: bool = False):
    """Reconstruction loss (1-l)L1 + l(1-SSIM), averaged over m_i and m_m."""
    m_i = np.asarray(m_i, dtype=np.float64)
    m_m = np.asarray(m_m, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if m_i.shape != gt.shape or m_m.shape != gt.shape:
        raise ShapeMismatch("reconstruction inputs must share a shape")
    vals = []
    grads = []
    for img in (m_i, m_m):
        l1, g_l1 = _l1_with_grad(img, gt)
        s, g_s = ssim_with_grad(img, gt)
        vals.append((1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s))
        if want_grad:
            grads.append(0.5 * ((1.0 - lambda_ssim) * g_l1 - lambda_ssim * g_s))
    val = 0.5 * (vals[0] + vals[1])
    if not want_grad:
        return val, None
    return val, (grads[0], grads[1])


def loss_feature(m_f, m_a, m_c, want_grad: bool = False):
    """Confidence-masked distillation: mean |sigmoid(m_c) m_f - sigmoid(m_c) m_a|.

    Gradient flows to both the features and the confidence map (no detach).
    """
    m_f = np.asarray(m_f, dtype=np.float64)
    m_a = np.asarray(m_a, dtype=np.float64)
    m_c = np.asarray(m_c, dtype=np.float64)
    if m_f.shape != m_a.shape:
        raise ShapeMismatch("m_f and m_a must share a shape")
    if m_c.shape[:2] != m_f.shape[:2]:
        raise ShapeMismatch("m_c must be spatially aligned with m_f")
    mask = sigmoid(m_c.reshape(m_f.shape[0], m_f.shape[1], 1))
    diff = mask * m_f - mask * m_a
    val = float(np.mean(np.abs(diff)))
    if not want_grad:
        return val, None
    s = np.sign(diff) / diff.size
    g_mf = s * mask
    g_mc = np.sum(s * (m_f - m_a), axis=-1, keepdims=True) * mask * (1.0 - mask)
    return val, (g_mf, g_mc.reshape(m_c.shape))


def loss_confidence(m_c, want_grad: bool = False):
    """Confidence regularization mean(-log sigmoid(m_c)); pulls the mask to 1."""
    m_c = np.asarray(m_c, dtype=np.float64)
    val = float(np.mean(softplus(-m_c)))
    if not want_grad:
        return val, None
    grad = -sigmoid(-m_c) / m_c.size
    return val, grad


def _standardize(x):
    mu = x.mean()
    cen = x - mu
    sd = float(np.sqrt(np.mean(cen * cen)))
    return cen, sd


def loss_depth_corr(d_r, d_d, want_grad: bool = False):
    """Depth correlation 1 - Pearson(D_r, D_d); invariant to positive affine maps."""
    x = np.asarray(d_r, dtype=np.float64).reshape(-1)
    y = np.asarray(d_d, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ShapeMismatch("depth maps must be the same size")
    cx, sx = _standardize(x)
    cy, sy = _standardize(y)
    if sx <= EPS_STD or sy <= EPS_STD:
        raise DegenerateDepth("depth map has (near) zero variance")
    xh = cx / max(sx, EPS_GUARD)
    yh = cy / max(sy, EPS_GUARD)
    corr = float(np.mean(xh * yh))
    val = 1.0 - corr
    if not want_grad:
        return val, None
    n = x.size
    g = -(yh - corr * xh) / (n * sx)
    return val, g.reshape(np.asarray(d_r).shape)


def _neighbor_similarity(m, want_frames: bool = False):
    """Cosine similarity of each pixel's embedding with its 8 neighbors.

    Border slots where the neighbor falls outside the image are zero.  Also
    returns the frames needed for the backward pass when requested.
    """
    m = np.asarray(m, dtype=np.float64)
    h, w, c = m.shape
    norm = np.maximum(np.linalg.norm(m, axis=-1), EPS_GUARD)
    sims = np.zeros((h, w, 8))
    for s, (dy, dx) in enumerate(_NEIGHBOR_OFFSETS):
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        a = m[ys0:ys1, xs0:xs1]
        b = m[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
        na = norm[ys0:ys1, xs0:xs1]
        nb = norm[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
        sims[ys0:ys1, xs0:xs1, s] = np.sum(a * b, axis=-1) / (na * nb)
    if not want_frames:
        return sims
    return sims, norm


def _neighbor_similarity_backward(m, norm, sims, g_sims):
    """Accumulate d(loss)/d(m) given upstream gradients on the similarity slots."""
    h, w, c = m.shape
    raw_norm = np.linalg.norm(m, axis=-1)
    guard = raw_norm > EPS_GUARD
    grad = np.zeros_like(m)
    mhat = m / norm[..., None]
    for s, (dy, dx) in enumerate(_NEIGHBOR_OFFSETS):
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        g = g_sims[ys0:ys1, xs0:xs1, s][..., None]
        a = m[ys0:ys1, xs0:xs1]
        b = m[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
        na = norm[ys0:ys1, xs0:xs1][..., None]
        nb = norm[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx][..., None]
        sim = sims[ys0:ys1, xs0:xs1, s][..., None]
        ga = guard[ys0:ys1, xs0:xs1][..., None]
        gb = guard[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx][..., None]
        # d sim / d a = b/(na nb) - sim * a / na^2  (norm term only above the guard)
        grad[ys0:ys1, xs0:xs1] += g * (b / (na * nb) - np.where(ga, sim * a / (na * na), 0.0))
        grad[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx] += g * (
            a / (na * nb) - np.where(gb, sim * b / (nb * nb), 0.0)
        )
    return grad


def loss_pattern(m_f, m_g, want_grad: bool = False):
    """Pattern consistency: L1 between the 8-neighbor cosine-similarity maps.

    The two maps may have different channel counts; only m_f receives a
    gradient (m_g is a frozen teacher).
    """
    m_f = np.asarray(m_f, dtype=np.float64)
    m_g = np.asarray(m_g, dtype=np.float64)
    if m_f.shape[:2] != m_g.shape[:2]:
        raise ShapeMismatch("pattern maps must be spatially aligned")
    sims_f, norm_f = _neighbor_similarity(m_f, want_frames=True)
    sims_g = _neighbor_similarity(m_g)
    diff = sims_f - sims_g
    val = float(np.mean(np.abs(diff)))
    if not want_grad:
        return val, None
    g_sims = np.sign(diff) / diff.size
    grad = _neighbor_similarity_backward(m_f, norm_f, sims_f, g_sims)
    return val, grad


def loss_total(l_r, l_f, l_c, l_d, l_p, weights: LossWeights = LossWeights()) -> float:
    """Weighted objective: L_r + lambda1 L_f + L_c + L_p + lambda2 L_d."""
    return float(l_r + weights.lambda1 * l_f + l_c + l_p + weights.lambda2 * l_d)

"""Feature modulation: softmax projection of rendered features through an
embedding codebook, and per-pixel affine modulation of the rendered image by a
small convolutional head.

m_f = softmax(m_r @ f_e1) @ f_e2 per pixel, then
{alpha_c, beta_c} = conv_head(concat(m_f, m_i)) and m_m = alpha_c * m_i + beta_c.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeMismatch, TapeMissing

CONV_HIDDEN = 16


def _he_uniform(rng, shape, fan_in):
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape)


@dataclass
class ModulationNet:
    """Embedding pair plus the three-layer 3x3 conv head producing (alpha, beta)."""

    f_e1: np.ndarray               # (k, E)
    f_e2: np.ndarray               # (E, k)
    conv_w: list                   # three (C_out, C_in, 3, 3) kernels
    conv_b: list                   # three (C_out,) biases

    def __post_init__(self):
        if self.f_e1.shape[1] < 1 or self.f_e2.shape[0] != self.f_e1.shape[1]:
            raise ShapeMismatch("embedding shapes must be (k, E) and (E, k)")
        if len(self.conv_w) != 3 or len(self.conv_b) != 3:
            raise ShapeMismatch("conv head must have exactly three layers")

    @property
    def k(self) -> int:
        return self.f_e1.shape[0]

    @property
    def embed_slots(self) -> int:
        return self.f_e1.shape[1]

    @classmethod
    def create(cls, k: int, embed_slots: int = 64, rng=None, identity_head: bool = True):
        """Fresh network; the conv head starts as the identity modulation."""
        if embed_slots < 2:
            raise ValueError("embedding slot count must be >= 2")
        rng = np.random.default_rng() if rng is None else rng
        scale = 1.0 / np.sqrt(k)
        f_e1 = rng.uniform(-scale, scale, size=(k, embed_slots))
        f_e2 = rng.uniform(-scale, scale, size=(embed_slots, k))
        chans = [k + 3, CONV_HIDDEN, CONV_HIDDEN, 2]
        conv_w, conv_b = [], []
        for i in range(3):
            fan_in = chans[i] * 9
            w = _he_uniform(rng, (chans[i + 1], chans[i], 3, 3), fan_in)
            b = np.zeros(chans[i + 1])
            conv_w.append(w)
            conv_b.append(b)
        if identity_head:
            conv_w[2][:] = 0.0
            conv_b[2][:] = np.array([1.0, 0.0])
        return cls(f_e1=f_e1, f_e2=f_e2, conv_w=conv_w, conv_b=conv_b)

    def params(self):
        return {
            "f_e1": self.f_e1, "f_e2": self.f_e2,
            "conv_w0": self.conv_w[0], "conv_b0": self.conv_b[0],
            "conv_w1": self.conv_w[1], "conv_b1": self.conv_b[1],
            "conv_w2": self.conv_w[2], "conv_b2": self.conv_b[2],
        }


@dataclass
class NetGrads:
    f_e1: np.ndarray
    f_e2: np.ndarray
    conv_w: list
    conv_b: list

    @classmethod
    def zeros_like(cls, net: ModulationNet):
        return cls(
            f_e1=np.zeros_like(net.f_e1),
            f_e2=np.zeros_like(net.f_e2),
            conv_w=[np.zeros_like(w) for w in net.conv_w],
            conv_b=[np.zeros_like(b) for b in net.conv_b],
        )

    def params(self):
        return {
            "f_e1": self.f_e1, "f_e2": self.f_e2,
            "conv_w0": self.conv_w[0], "conv_b0": self.conv_b[0],
            "conv_w1": self.conv_w[1], "conv_b1": self.conv_b[1],
            "conv_w2": self.conv_w[2], "conv_b2": self.conv_b[2],
        }


def _im2col(x):
    """(H, W, C) -> (H*W, C*9) with zero padding, 3x3 windows."""
    h, w, c = x.shape
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(p, (3, 3), axis=(0, 1))
    # win: (H, W, C, 3, 3) -> flatten kernel dims with channel slowest
    return np.ascontiguousarray(win).reshape(h * w, c * 9)


def _col2im(gcols, h, w, c):
    """Adjoint of _im2col."""
    g = gcols.reshape(h, w, c, 3, 3)
    gp = np.zeros((h + 2, w + 2, c))
    for dy in range(3):
        for dx in range(3):
            gp[dy:dy + h, dx:dx + w] += g[:, :, :, dy, dx]
    return gp[1:1 + h, 1:1 + w]


def _conv_forward(x, w, b):
    h, wd, _ = x.shape
    cols = _im2col(x)
    wr = w.reshape(w.shape[0], -1)
    out = cols @ wr.T + b
    return out.reshape(h, wd, -1), cols


def _conv_backward(gout, cols, w, x_shape):
    h, wd, c = x_shape
    gflat = gout.reshape(-1, gout.shape[-1])
    wr = w.reshape(w.shape[0], -1)
    gw = (gflat.T @ cols).reshape(w.shape)
    gb = gflat.sum(axis=0)
    gcols = gflat @ wr
    return _col2im(gcols, h, wd, c), gw, gb


@dataclass
class ModulationTape:
    m_r: np.ndarray
    probs: np.ndarray
    m_f: np.ndarray
    m_i: np.ndarray
    concat: np.ndarray
    cols: list
    pre_acts: list
    alpha_c: np.ndarray
    beta_c: np.ndarray
    net: ModulationNet


@dataclass
class ModulatedMaps:
    """Modulated feature map, per-pixel affine parameters, modulated image."""

    m_f: np.ndarray      # (H, W, k)
    alpha_c: np.ndarray  # (H, W, 1)
    beta_c: np.ndarray   # (H, W, 1)
    m_m: np.ndarray      # (H, W, 3)
    tape: Optional[ModulationTape] = None


def modulate_features(m_r, net: ModulationNet):
    """Project rendered features through the codebook: softmax(m_r f_e1) f_e2."""
    m_f, _ = _modulate_features_tape(m_r, net)
    return m_f


def _modulate_features_tape(m_r, net):
    m_r = np.asarray(m_r, dtype=np.float64)
    if m_r.shape[-1] != net.k:
        raise ShapeMismatch(f"feature map has {m_r.shape[-1]} channels, net expects {net.k}")
    logits = m_r @ net.f_e1
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=-1, keepdims=True)
    return probs @ net.f_e2, probs


def modulate_image(m_f, m_i, net: ModulationNet):
    """Per-pixel affine modulation parameters from the conv head, plus m_m."""
    maps = run_modulation(m_f_precomputed=m_f, m_i=m_i, net=net)
    return maps.alpha_c, maps.beta_c, maps.m_m


def run_modulation(m_i, net: ModulationNet, m_r=None, m_f_precomputed=None, with_tape: bool = True) -> ModulatedMaps:
    """Full modulation forward pass; pass m_r for Eq.-style projection or a
    precomputed m_f to run only the image head."""
    m_i = np.asarray(m_i, dtype=np.float64)
    if m_f_precomputed is not None:
        m_f = np.asarray(m_f_precomputed, dtype=np.float64)
        probs = None
        m_r = None
    else:
        m_f, probs = _modulate_features_tape(m_r, net)
    if m_f.shape[:2] != m_i.shape[:2]:
        raise ShapeMismatch("m_f and m_i must be spatially aligned")
    x = np.concatenate([m_f, m_i], axis=-1)
    cols, pre_acts = [], []
    a = x
    for i in range(3):
        out, col = _conv_forward(a, net.conv_w[i], net.conv_b[i])
        cols.append(col)
        if i < 2:
            pre_acts.append(out)
            a = np.maximum(0.0, out)
        else:
            a = out
    alpha_c = a[..., 0:1]
    beta_c = a[..., 1:2]
    m_m = alpha_c * m_i + beta_c
    tape = None
    if with_tape:
        tape = ModulationTape(
            m_r=m_r, probs=probs, m_f=m_f, m_i=m_i, concat=x, cols=cols,
            pre_acts=pre_acts, alpha_c=alpha_c, beta_c=beta_c, net=net,
        )
    return ModulatedMaps(m_f=m_f, alpha_c=alpha_c, beta_c=beta_c, m_m=m_m, tape=tape)


@dataclass
class ModulationGrads:
    m_r: Optional[np.ndarray]   # None when the maps were built from a precomputed m_f
    m_i: np.ndarray
    m_f: np.ndarray             # gradient arriving at m_f (before the projection)
    net: NetGrads


def modulation_backward(maps: ModulatedMaps, g_mm=None, g_mf=None, g_alpha=None, g_beta=None) -> ModulationGrads:
    """Reverse pass through the modulation module (softmax Jacobian included)."""
    tape = maps.tape
    if tape is None:
        raise TapeMissing("run_modulation was called without a tape")
    net = tape.net
    h, w, _ = tape.m_i.shape
    grads = NetGrads.zeros_like(net)

    d_alpha = np.zeros_like(tape.alpha_c)
    d_beta = np.zeros_like(tape.beta_c)
    d_mi = np.zeros_like(tape.m_i)
    if g_mm is not None:
        g_mm = np.asarray(g_mm, dtype=np.float64)
        d_alpha += np.sum(g_mm * tape.m_i, axis=-1, keepdims=True)
        d_beta += np.sum(g_mm, axis=-1, keepdims=True)
        d_mi += tape.alpha_c * g_mm
    if g_alpha is not None:
        d_alpha += np.asarray(g_alpha, dtype=np.float64).reshape(d_alpha.shape)
    if g_beta is not None:
        d_beta += np.asarray(g_beta, dtype=np.float64).reshape(d_beta.shape)

    gout = np.concatenate([d_alpha, d_beta], axis=-1)
    shapes = [tape.concat.shape, (h, w, CONV_HIDDEN), (h, w, CONV_HIDDEN)]
    for i in (2, 1, 0):
        gin, gw, gb = _conv_backward(gout, tape.cols[i], net.conv_w[i], shapes[i])
        grads.conv_w[i] += gw
        grads.conv_b[i] += gb
        if i > 0:
            gin = np.where(tape.pre_acts[i - 1] > 0.0, gin, 0.0)
        gout = gin
    k = net.k
    d_mf = gout[..., :k].copy()
    d_mi += gout[..., k:]
    if g_mf is not None:
        d_mf += np.asarray(g_mf, dtype=np.float64)

    if tape.probs is None:
        return ModulationGrads(m_r=None, m_i=d_mi, m_f=d_mf, net=grads)

    # softmax projection backward
    probs = tape.probs
    flatp = probs.reshape(-1, probs.shape[-1])
    flatd = d_mf.reshape(-1, k)
    grads.f_e2 += flatp.T @ flatd
    d_probs = d_mf @ net.f_e2.T
    dot = np.sum(d_probs * probs, axis=-1, keepdims=True)
    d_logits = probs * (d_probs - dot)
    flat_mr = tape.m_r.reshape(-1, k)
    flat_dl = d_logits.reshape(-1, d_logits.shape[-1])
    grads.f_e1 += flat_mr.T @ flat_dl
    d_mr = d_logits @ net.f_e1.T
    return ModulationGrads(m_r=d_mr, m_i=d_mi, m_f=d_mf, net=grads)

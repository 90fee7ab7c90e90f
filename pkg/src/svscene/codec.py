"""Feature autoencoder: maps 512-d teacher language features to a k-dim latent
space and back.  Six linear layers per side with ReLU between layers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetEmpty, ShapeMismatch

logger = logging.getLogger(__name__)

FEATURE_DIM = 512
HIDDEN_WIDTHS = (256, 128, 64, 48, 40)
EPS_NORM = 1e-8


def _mlp_forward(x, weights, biases, keep_tape=False):
    acts = [x]
    pre = []
    a = x
    n = len(weights)
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T + b
        if i < n - 1:
            pre.append(z)
            a = np.maximum(0.0, z)
        else:
            a = z
        acts.append(a)
    if keep_tape:
        return a, (acts, pre)
    return a


def _mlp_backward(gout, tape, weights):
    acts, pre = tape
    n = len(weights)
    gws = [None] * n
    gbs = [None] * n
    g = gout
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = np.where(pre[i] > 0.0, g, 0.0)
        gws[i] = g.T @ acts[i]
        gbs[i] = g.sum(axis=0)
        g = g @ weights[i]
    return g, gws, gbs


@dataclass
class Autoencoder:
    """Mirrored six-layer encoder/decoder between 512-d features and k-d latents."""

    enc_w: list
    enc_b: list
    dec_w: list
    dec_b: list

    def __post_init__(self):
        if len(self.enc_w) != 6 or len(self.dec_w) != 6:
            raise ShapeMismatch("encoder and decoder must have six layers each")

    @property
    def k(self) -> int:
        return self.enc_w[-1].shape[0]

    @property
    def in_dim(self) -> int:
        return self.enc_w[0].shape[1]

    @classmethod
    def create(cls, k: int = 32, rng=None, in_dim: int = FEATURE_DIM, hidden=HIDDEN_WIDTHS):
        rng = np.random.default_rng() if rng is None else rng
        enc_dims = [in_dim, *hidden, k]
        dec_dims = [k, *reversed(hidden), in_dim]

        def make(dims):
            ws, bs = [], []
            for i in range(len(dims) - 1):
                std = np.sqrt(2.0 / dims[i])
                ws.append(rng.normal(0.0, std, size=(dims[i + 1], dims[i])))
                bs.append(np.zeros(dims[i + 1]))
            return ws, bs

        enc_w, enc_b = make(enc_dims)
        dec_w, dec_b = make(dec_dims)
        return cls(enc_w=enc_w, enc_b=enc_b, dec_w=dec_w, dec_b=dec_b)

    def encode(self, features):
        """512-d features (..., 512) -> latents (..., k)."""
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"expected {self.in_dim}-d features, got {x.shape[-1]}")
        flat = x.reshape(-1, self.in_dim)
        out = _mlp_forward(flat, self.enc_w, self.enc_b)
        return out.reshape(x.shape[:-1] + (self.k,))

    def decode(self, latents):
        """Latents (..., k) -> reconstructed features (..., 512)."""
        z = np.asarray(latents, dtype=np.float64)
        if z.shape[-1] != self.k:
            raise ShapeMismatch(f"expected {self.k}-d latents, got {z.shape[-1]}")
        flat = z.reshape(-1, self.k)
        out = _mlp_forward(flat, self.dec_w, self.dec_b)
        return out.reshape(z.shape[:-1] + (self.in_dim,))

    def params(self):
        out = {}
        for i in range(6):
            out[f"enc_w{i}"] = self.enc_w[i]
            out[f"enc_b{i}"] = self.enc_b[i]
            out[f"dec_w{i}"] = self.dec_w[i]
            out[f"dec_b{i}"] = self.dec_b[i]
        return out


@dataclass
class CodecReport:
    mean_l1: float
    mean_cosine: float
    epoch_losses: list


def _recon_loss_and_grad(x, xhat):
    """L1 + (1 - cosine) per sample, mean reduced; gradient w.r.t. xhat."""
    n, d = x.shape
    diff = xhat - x
    l1 = float(np.mean(np.abs(diff)))
    g = np.sign(diff) / diff.size
    nx = np.maximum(np.linalg.norm(x, axis=1), EPS_NORM)
    nh = np.maximum(np.linalg.norm(xhat, axis=1), EPS_NORM)
    dot = np.sum(x * xhat, axis=1)
    cos = dot / (nx * nh)
    cos_loss = float(np.mean(1.0 - cos))
    guard = np.linalg.norm(xhat, axis=1) > EPS_NORM
    gcos = -(x / (nx * nh)[:, None] - np.where(guard[:, None], (cos / nh ** 2)[:, None] * xhat, 0.0)) / n
    return l1 + cos_loss, l1, float(np.mean(cos)), g + gcos


def train_autoencoder(
    features,
    k: int = 32,
    epochs: int = 200,
    batch_size: int = 4096,
    lr: float = 1e-3,
    seed: int = 0,
    codec: Autoencoder = None,
):
    """Pre-train the codec on a bank of teacher features.

    Returns (Autoencoder, CodecReport) with the final reconstruction L1 and
    cosine similarity measured over the whole bank.
    """
    from .optim import AdamState

    x = np.asarray(features, dtype=np.float64).reshape(-1, FEATURE_DIM)
    if x.shape[0] < 2:
        raise DatasetEmpty("need at least 2 feature vectors to train the codec")
    rng = np.random.default_rng(seed)
    ae = Autoencoder.create(k=k, rng=rng) if codec is None else codec
    params = ae.params()
    adam = {name: AdamState.for_array(p) for name, p in params.items()}

    n = x.shape[0]
    bs = min(batch_size, n)
    epoch_losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            xb = x[idx]
            z, enc_tape = _mlp_forward(xb, ae.enc_w, ae.enc_b, keep_tape=True)
            xh, dec_tape = _mlp_forward(z, ae.dec_w, ae.dec_b, keep_tape=True)
            loss, _, _, gxh = _recon_loss_and_grad(xb, xh)
            gz, dec_gw, dec_gb = _mlp_backward(gxh, dec_tape, ae.dec_w)
            _, enc_gw, enc_gb = _mlp_backward(gz, enc_tape, ae.enc_w)
            grads = {}
            for i in range(6):
                grads[f"enc_w{i}"] = enc_gw[i]
                grads[f"enc_b{i}"] = enc_gb[i]
                grads[f"dec_w{i}"] = dec_gw[i]
                grads[f"dec_b{i}"] = dec_gb[i]
            for name, p in params.items():
                adam[name].step(p, grads[name], lr)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))

    xh = ae.decode(ae.encode(x))
    _, l1, cos, _ = _recon_loss_and_grad(x, xh)
    report = CodecReport(mean_l1=l1, mean_cosine=cos, epoch_losses=epoch_losses)
    logger.info("codec trained: L1=%.4g cosine=%.4f", l1, cos)
    return ae, report

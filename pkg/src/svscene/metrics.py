"""Image metrics: PSNR and Gaussian-window SSIM with a reverse-mode gradient.

SSIM uses the classic 11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03)
evaluated on the valid region; the window shrinks to the largest odd size that
fits when images are smaller than 11 pixels.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch

PSNR_CAP = 99.0
_K1 = 0.01
_K2 = 0.03
_SIGMA = 1.5
_WIN = 11


def psnr(img, gt, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical images."""
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise ShapeMismatch(f"psnr shapes differ: {img.shape} vs {gt.shape}")
    mse = float(np.mean((img - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range * data_range / mse))


def _gauss_kernel(win: int, sigma: float = _SIGMA):
    r = np.arange(win, dtype=np.float64) - (win - 1) / 2.0
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _valid_sep_filter(x, k):
    """Separable 'valid' correlation along the two leading axes."""
    win = k.size
    v = np.lib.stride_tricks.sliding_window_view(x, win, axis=0) @ k
    v = np.lib.stride_tricks.sliding_window_view(v, win, axis=1) @ k
    return v


def _adjoint_sep_filter(gy, k, out_shape):
    """Adjoint of _valid_sep_filter (zero-pad then valid-correlate; k symmetric)."""
    win = k.size
    pad = win - 1
    g = np.pad(gy, ((pad, pad), (pad, pad)), mode="constant")
    return _valid_sep_filter(g, k)[: out_shape[0], : out_shape[1]]


def _win_size(h, w):
    win = min(_WIN, h, w)
    if win % 2 == 0:
        win -= 1
    if win < 1:
        raise ShapeMismatch("image too small for SSIM")
    return win


def ssim(img, gt, data_range: float = 1.0) -> float:
    """Mean structural similarity over channels and the valid window region."""
    val, _ = _ssim_impl(img, gt, data_range, want_grad=False)
    return val


def ssim_with_grad(img, gt, data_range: float = 1.0):
    """SSIM value and its gradient with respect to ``img``."""
    return _ssim_impl(img, gt, data_range, want_grad=True)


def _ssim_impl(img, gt, data_range, want_grad):
    x = np.asarray(img, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"ssim shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    h, w, nch = x.shape
    win = _win_size(h, w)
    k = _gauss_kernel(win)
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2

    total = 0.0
    grad = np.zeros_like(x) if want_grad else None
    n_valid = (h - win + 1) * (w - win + 1)
    for ch in range(nch):
        xc, yc = x[..., ch], y[..., ch]
        mx = _valid_sep_filter(xc, k)
        my = _valid_sep_filter(yc, k)
        sxx = _valid_sep_filter(xc * xc, k)
        syy = _valid_sep_filter(yc * yc, k)
        sxy = _valid_sep_filter(xc * yc, k)
        vx = sxx - mx * mx
        vy = syy - my * my
        cxy = sxy - mx * my
        a = 2.0 * mx * my + c1
        b = 2.0 * cxy + c2
        c = mx * mx + my * my + c1
        d = vx + vy + c2
        s = (a * b) / (c * d)
        total += float(s.mean())
        if want_grad:
            g = 1.0 / (n_valid * nch)
            ds_da = b / (c * d)
            ds_db = a / (c * d)
            ds_dc = -a * b / (c * c * d)
            ds_dd = -a * b / (c * d * d)
            dmx = g * (ds_da * 2.0 * my + ds_db * (-2.0 * my) + ds_dc * 2.0 * mx + ds_dd * (-2.0 * mx))
            dsxx = g * ds_dd
            dsxy = g * ds_db * 2.0
            grad[..., ch] = (
                _adjoint_sep_filter(dmx, k, (h, w))
                + 2.0 * xc * _adjoint_sep_filter(dsxx, k, (h, w))
                + yc * _adjoint_sep_filter(dsxy, k, (h, w))
            )
    val = total / nch
    if want_grad and np.asarray(img).ndim == 2:
        grad = grad[..., 0]
    return val, grad

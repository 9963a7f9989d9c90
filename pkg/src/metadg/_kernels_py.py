"""Pure numpy versions of the hot kernels (convolution and 2x2 max pooling).

These are the reference fallback used when the compiled extension is not
available. Every function takes and returns float64 arrays in NCHW layout.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Max number of float64 elements in one im2col buffer (~128 MB).
_COL_BUDGET = 1 << 24


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _padded(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _cols(x, k, stride, pad, Ho, Wo):
    # (C*k*k, B*Ho*Wo) column matrix
    B, C = x.shape[:2]
    xp = _padded(x, pad)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :Ho, :Wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(C * k * k, B * Ho * Wo)


def conv2d_forward(x, w, stride, pad):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    wm = w.reshape(O, C * k * k)
    per_sample = C * k * k * Ho * Wo
    if per_sample * B <= _COL_BUDGET:
        out = wm @ _cols(x, k, stride, pad, Ho, Wo)
        return np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))
    out = np.empty((B, O, Ho, Wo))
    for b in range(B):
        if per_sample <= _COL_BUDGET:
            out[b] = (wm @ _cols(x[b:b + 1], k, stride, pad, Ho, Wo)).reshape(O, Ho, Wo)
            continue
        # one sample is still too large: accumulate over kernel taps
        xp = _padded(x[b:b + 1], pad)[0]
        acc = np.zeros((O, Ho * Wo))
        for kh in range(k):
            for kw in range(k):
                tap = xp[:, kh:kh + stride * Ho:stride, kw:kw + stride * Wo:stride]
                acc += w[:, :, kh, kw] @ tap.reshape(C, Ho * Wo)
        out[b] = acc.reshape(O, Ho, Wo)
    return out


def conv2d_backward_input(g, w, x_shape, stride, pad):
    B, C, H, W = x_shape
    O, _, k, _ = w.shape
    _, _, Ho, Wo = g.shape
    gm = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
    cols = (w.reshape(O, C * k * k).T @ gm).reshape(C, k, k, B, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for kh in range(k):
        for kw in range(k):
            xp[:, :, kh:kh + stride * Ho:stride, kw:kw + stride * Wo:stride] += \
                cols[:, kh, kw].transpose(1, 0, 2, 3)
    if pad == 0:
        return xp
    return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])


def conv2d_backward_weight(x, g, w_shape, stride, pad):
    O, C, k, _ = w_shape
    B, _, Ho, Wo = g.shape
    gm = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
    return (gm @ _cols(x, k, stride, pad, Ho, Wo).T).reshape(O, C, k, k)


def _windows(x):
    B, C, H, W = x.shape
    v = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return v.reshape(B, C, H // 2, W // 2, 4)


def maxpool2_forward(x):
    """Return (pooled, idx) where idx in 0..3 marks the argmax of each window."""
    v = _windows(x)
    idx = np.argmax(v, axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def pool_gather(x, idx):
    v = _windows(x)
    return np.take_along_axis(v, idx[..., None].astype(np.intp), axis=-1)[..., 0]


def pool_scatter(g, idx, in_shape):
    B, C, H, W = in_shape
    v = np.zeros((B, C, H // 2, W // 2, 4))
    np.put_along_axis(v, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    v = v.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return v.reshape(B, C, H, W)


def _std_axes(x):
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bshape(x):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def standardize_forward(x, scale, shift, eps):
    """Per-channel batch standardization; returns (out, xhat, inv) with inv shaped (C,)."""
    axes = _std_axes(x)
    bs = _bshape(x)
    xc = x - x.mean(axis=axes, keepdims=True)
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(bs)
    return xhat * scale.reshape(bs) + shift.reshape(bs), xhat, inv


def standardize_backward(g, xhat, inv, scale):
    """Adjoints (gx, gscale, gshift) of standardize_forward."""
    axes = _std_axes(g)
    bs = _bshape(g)
    n = g.size // g.shape[1]
    gb = g.sum(axis=axes)
    gs = (g * xhat).sum(axis=axes)
    gx = (scale * inv).reshape(bs) * (g - (gb / n).reshape(bs) - xhat * (gs / n).reshape(bs))
    return gx, gs, gb

"""Numpy layer primitives with hand-written backward passes.

Tensors are ``(N, C, H, W)`` float64 arrays.  Every ``*_forward`` returns
``(output, ctx)`` and the matching ``*_backward`` consumes ``ctx``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_forward(x, w, b):
    """Stride-1 convolution (cross-correlation) with same padding; ``w`` is ``(O, C, k, k)``."""
    k = w.shape[-1]
    pad = k // 2
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    if k == 1:
        y = np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0], optimize=True)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N C H W k k
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    y = y + b[None, :, None, None]
    return np.ascontiguousarray(y), (x, w)


def conv_backward(dy, ctx):
    x, w = ctx
    k = w.shape[-1]
    pad = k // 2
    db = dy.sum(axis=(0, 2, 3))
    if k == 1:
        w2 = w[:, :, 0, 0]
        dw = np.einsum("nohw,nchw->oc", dy, x, optimize=True)[:, :, None, None]
        dx = np.einsum("nohw,oc->nchw", dy, w2, optimize=True)
        return dx, dw, db
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # O C k k
    # input gradient: correlate padded dy with the flipped, channel-swapped kernel
    dyp = np.pad(dy, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wf = w[:, :, ::-1, ::-1]
    dwin = sliding_window_view(dyp, (k, k), axis=(2, 3))
    dx = np.tensordot(dwin, wf, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx), dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, ctx):
    return dy * ctx


def bn_forward(x, gamma, beta, running_mean, running_var, train):
    """Per-channel batch normalization.

    In train mode the batch mean and biased variance normalize ``x`` and the
    running statistics are updated in place (unbiased variance, momentum 0.1).
    In eval mode the running statistics are used.
    """
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // x.shape[1]
        running_mean *= 1.0 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1.0 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, gamma, train)


def bn_backward(dy, ctx):
    xhat, inv_std, gamma, train = ctx
    dgamma = np.sum(dy * xhat, axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if not train:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dy.size // dy.shape[1]
    mean_dxhat = dxhat.sum(axis=(0, 2, 3)) / m
    mean_dxhat_xhat = np.sum(dxhat * xhat, axis=(0, 2, 3)) / m
    dx = (dxhat - mean_dxhat[None, :, None, None] - xhat * mean_dxhat_xhat[None, :, None, None])
    return dx * inv_std[None, :, None, None], dgamma, dbeta


def maxpool_forward(x):
    """2x2 max pooling; ties go to the first element in row-major order."""
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool_backward(dy, ctx):
    idx, shape = ctx
    n, c, h, w = shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def upsample_matrix(n):
    """Linear map for 2x bilinear upsampling along one axis (half-pixel centres).

    Output sample ``i`` reads the input at ``s = (i + 0.5)/2 - 0.5`` clamped to
    ``[0, n-1]``, i.e. ``out[2k] = 0.25*in[k-1] + 0.75*in[k]`` and
    ``out[2k+1] = 0.75*in[k] + 0.25*in[k+1]`` with indices clamped at the ends.
    """
    u = np.zeros((2 * n, n))
    for i in range(2 * n):
        s = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        lo = int(np.floor(s))
        hi = min(lo + 1, n - 1)
        frac = s - lo
        u[i, lo] += 1.0 - frac
        u[i, hi] += frac
    return u


def upsample_forward(x):
    uh = upsample_matrix(x.shape[2])
    uw = upsample_matrix(x.shape[3])
    return uh @ x @ uw.T, (uh, uw)


def upsample_backward(dy, ctx):
    uh, uw = ctx
    return uh.T @ dy @ uw


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out

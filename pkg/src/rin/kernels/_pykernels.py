"""Numpy reference kernels.

Same signatures as the compiled module: every function takes 2-D
C-contiguous row-major arrays (rows x features) or flat 1-D arrays and
returns freshly allocated outputs of the input dtype.
"""
import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def layer_norm_fwd(x, scale, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    y = xhat * scale + bias
    return y.astype(x.dtype, copy=False), xhat.astype(x.dtype, copy=False), rstd[:, 0].astype(x.dtype)


def layer_norm_bwd(dy, xhat, rstd, scale):
    dscale = np.sum(dy * xhat, axis=0)
    dbias = np.sum(dy, axis=0)
    dxhat = dy * scale
    mean_d = dxhat.mean(axis=1, keepdims=True)
    mean_dx = np.mean(dxhat * xhat, axis=1, keepdims=True)
    dx = (dxhat - mean_d - xhat * mean_dx) * rstd[:, None]
    return dx.astype(dy.dtype, copy=False), dscale.astype(dy.dtype), dbias.astype(dy.dtype)


def gelu_fwd(x):
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_bwd(x, dy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (dy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)


def softmax_bwd(y, dy):
    inner = np.sum(dy * y, axis=1, keepdims=True)
    return (y * (dy - inner)).astype(y.dtype, copy=False)

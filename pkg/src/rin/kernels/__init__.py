"""Row-wise hot kernels with a compiled core and a numpy fallback.

The compiled module is picked at import when it is importable and
``RIN_PURE_PYTHON`` is unset. ``use_backend`` switches at runtime, which
the parity tests and the benchmark rely on.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

from rin.kernels import _pykernels

try:
    from rin.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if _ckernels is not None and not os.environ.get("RIN_PURE_PYTHON"):
    _impl = _ckernels
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    global _impl, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} is not available; have {available_backends()}")
    _impl = _BACKENDS[name]
    BACKEND = name


@contextlib.contextmanager
def use_backend(name: str):
    previous = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def layer_norm_forward(x, scale, bias, eps):
    """Normalize over the last axis. Returns (y, xhat, rstd) with rstd per row."""
    y, xhat, rstd = _impl.layer_norm_fwd(
        _rows(x), np.ascontiguousarray(scale, dtype=x.dtype),
        np.ascontiguousarray(bias, dtype=x.dtype), float(eps))
    return y.reshape(x.shape), xhat, rstd


def layer_norm_backward(dy, xhat, rstd, scale):
    dx, dscale, dbias = _impl.layer_norm_bwd(
        _rows(dy), xhat, rstd, np.ascontiguousarray(scale, dtype=dy.dtype))
    return dx.reshape(dy.shape), dscale, dbias


def gelu_forward(x):
    return _impl.gelu_fwd(np.ascontiguousarray(x).reshape(-1)).reshape(x.shape)


def gelu_backward(x, dy):
    flat = _impl.gelu_bwd(np.ascontiguousarray(x).reshape(-1),
                          np.ascontiguousarray(dy, dtype=x.dtype).reshape(-1))
    return flat.reshape(x.shape)


def softmax_forward(x):
    """Softmax over the last axis."""
    return _impl.softmax_fwd(_rows(x)).reshape(x.shape)


def softmax_backward(y, dy):
    return _impl.softmax_bwd(_rows(y), _rows(dy.astype(y.dtype, copy=False))).reshape(y.shape)

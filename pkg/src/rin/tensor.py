"""Dense tensors with a reverse-mode gradient tape.

Every op records a node carrying a monotonically increasing sequence number,
its parent tensors and a closure mapping the output gradient to parent
gradients. Because parents are always created before their children, sorting
the reachable nodes by sequence number gives a topological order, and the
backward pass replays it in reverse. The replay order is therefore fixed by
the order ops were issued, which makes gradient accumulation bitwise
reproducible.

Only the operations the RIN model needs are provided. Elementwise ops follow
numpy broadcasting; their gradients are summed back to operand shape.
"""
from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

from rin import kernels
from rin.errors import ContractError, ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_sequence = itertools.count()
_grad_enabled = True


class Node:
    """One recorded op on the tape."""

    __slots__ = ("seq", "op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.seq = next(_sequence)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """An n-dimensional float32/float64 array that may participate in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def tape_id(self):
        return None if self.node is None else self.node.seq

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self):
        return self.data

    def detach(self):
        return stop_gradient(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _lift(a, b):
    """Wrap python scalars / arrays so both operands share a dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _record(op, data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", out, (a, b), backward)


def square(a):
    return mul(a, a)


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _record("broadcast_to", out, (a,), backward)


def stop_gradient(a):
    """Identity forward; the result is a constant, so no gradient reaches ``a``."""
    a = as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# contractions and reductions


def matmul(a, b):
    """Batched matrix product over the last two axes.

    A 2-D right operand (a weight matrix) is applied with a single GEMM over all
    leading rows of ``a``.
    """
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        k, j = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (j,))

        def backward(g):
            g2 = g.reshape(-1, j)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record("matmul", out, (a, b), backward)

    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", out, (a, b), backward)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(a.shape[ax] for ax in axes)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _record("mean", np.asarray(out, dtype=a.dtype), (a,), backward)


# ---------------------------------------------------------------------------
# normalization and nonlinearities (compiled kernels)


def softmax(a, axis=-1):
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    a = as_tensor(a)
    axis = axis % a.ndim
    last = axis == a.ndim - 1
    x = a.data if last else np.moveaxis(a.data, axis, -1)
    y = kernels.softmax_forward(x)

    def backward(g):
        gl = g if last else np.moveaxis(g, axis, -1)
        dx = kernels.softmax_backward(y, gl)
        return (dx if last else np.moveaxis(dx, -1, axis),)

    out = y if last else np.moveaxis(y, -1, axis)
    return _record("softmax", out, (a,), backward)


def layer_norm(a, scale, bias, eps=1e-6):
    """Normalize over the last axis, then apply ``scale`` and ``bias``."""
    a = as_tensor(a)
    scale, bias = as_tensor(scale, a.dtype), as_tensor(bias, a.dtype)
    if scale.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(f"layer_norm: scale {scale.shape} / bias {bias.shape} do not match last extent of {a.shape}")
    y, xhat, rstd = kernels.layer_norm_forward(a.data, scale.data, bias.data, eps)

    def backward(g):
        dx, dscale, dbias = kernels.layer_norm_backward(g, xhat, rstd, scale.data)
        return dx, dscale, dbias

    return _record("layer_norm", y, (a, scale, bias), backward)


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)

    def backward(g):
        return (kernels.gelu_backward(a.data, g),)

    return _record("gelu", kernels.gelu_forward(a.data), (a,), backward)


# ---------------------------------------------------------------------------
# layout


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _record("reshape", out, (a,), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", np.transpose(a.data, axes), (a,), backward)


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concat: shapes {[x.shape for x in tensors]} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", data, tuple(tensors), backward)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a, index):
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("getitem", a.data[index], (a,), backward)


def take_rows(table, indices):
    """Row lookup ``table[indices]`` (embedding tables)."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        return (full,)

    return _record("take_rows", table.data[indices], (table,), backward)


def scatter_rows(values, index, size):
    """Zeros of leading extent ``size`` with ``values`` placed at rows ``index``."""
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((size,) + values.shape[1:], dtype=values.dtype)
    out[index] = values.data

    def backward(g):
        return (g[index],)

    return _record("scatter_rows", out, (values,), backward)


def space_to_depth(a, block):
    """Fold non-overlapping blocks of the spatial axes into the channel axis.

    ``a`` has shape ``[*batch, s_1, ..., s_k, c]`` and ``block`` has k entries.
    The result is ``[*batch, s_1/b_1, ..., s_k/b_k, b_1*...*b_k*c]`` with the
    within-block offsets ordered (b_1, ..., b_k, c), row-major.
    """
    a = as_tensor(a)
    block = tuple(int(b) for b in block)
    k = len(block)
    lead = a.ndim - k - 1
    if lead < 0:
        raise ShapeError(f"space_to_depth: rank {a.ndim} too small for block {block}")
    spatial = a.shape[lead:lead + k]
    if any(s % b for s, b in zip(spatial, block)):
        raise ShapeError(f"space_to_depth: spatial extents {spatial} not divisible by block {block}")
    c = a.shape[-1]
    split = a.shape[:lead]
    for s, b in zip(spatial, block):
        split += (s // b, b)
    split += (c,)
    x = reshape(a, split)
    outer = [lead + 2 * i for i in range(k)]
    inner = [lead + 2 * i + 1 for i in range(k)]
    x = transpose(x, list(range(lead)) + outer + inner + [lead + 2 * k])
    return reshape(x, a.shape[:lead] + tuple(s // b for s, b in zip(spatial, block)) + (math.prod(block) * c,))


def depth_to_space(a, block):
    """Inverse of :func:`space_to_depth`."""
    a = as_tensor(a)
    block = tuple(int(b) for b in block)
    k = len(block)
    lead = a.ndim - k - 1
    if lead < 0:
        raise ShapeError(f"depth_to_space: rank {a.ndim} too small for block {block}")
    grid = a.shape[lead:lead + k]
    depth = a.shape[-1]
    volume = math.prod(block)
    if depth % volume:
        raise ShapeError(f"depth_to_space: depth {depth} not divisible by block volume {volume}")
    c = depth // volume
    x = reshape(a, a.shape[:lead] + grid + block + (c,))
    perm = list(range(lead))
    for i in range(k):
        perm += [lead + i, lead + k + i]
    perm.append(lead + 2 * k)
    x = transpose(x, perm)
    return reshape(x, a.shape[:lead] + tuple(g * b for g, b in zip(grid, block)) + (c,))


# ---------------------------------------------------------------------------
# initialization


def truncated_normal(shape, scale, rng, dtype=np.float32):
    """Normal(0, scale) samples, redrawing any that fall outside +-2 scale."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * scale).astype(dtype)


# ---------------------------------------------------------------------------
# backward


def backward(loss):
    """Reverse-mode sweep from a scalar ``loss``.

    Fills ``.grad`` on every reachable leaf that requires grad and returns a
    dict mapping those leaves to their gradients. Paths into the same tensor
    are summed in tape order.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    order = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append(p)
    interior = sorted((t for t in order if t.node is not None), key=lambda t: t.node.seq, reverse=True)

    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for t in interior:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            key = id(p)
            if p.node is None:
                leaves[key] = (p, leaves[key][1] + pg) if key in leaves else (p, pg)
            elif key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg

    if loss.node is None:
        leaves[id(loss)] = (loss, pending.pop(id(loss)))
    result = {}
    for p, g in leaves.values():
        p.grad = g
        result[p] = g
    return result

"""Central finite-difference gradient checks in float64."""
from __future__ import annotations

import dataclasses

import numpy as np

from rin.model import RIN, ModelConfig
from rin.tensor import Tensor, backward, mean, mul, sub, sum_

DEFAULT_STEP = 1e-5


def relative_error(analytic, numeric):
    """max |a - n| / max |n| (normwise, so tiny entries do not dominate)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), 1e-300)
    return float(np.max(np.abs(analytic - numeric))) / scale


def numeric_grad(f, array, indices=None, h=DEFAULT_STEP):
    """Central differences of scalar ``f()`` w.r.t. entries of ``array`` (modified in place)."""
    flat = array.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out.append((up - down) / (2 * h))
    return np.array(out)


def check_op(fn, *arrays, seed=0, h=DEFAULT_STEP):
    """Compare backward against finite differences for ``fn(*tensors)``.

    The output is contracted with a fixed random tensor to give a scalar.
    Returns the normwise relative error over all inputs jointly, so an input
    whose true gradient is zero (a key bias under softmax) is judged against
    the op's gradient scale rather than its own rounding noise.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    probe = None

    def scalar():
        nonlocal probe
        out = fn(*tensors)
        if probe is None:
            probe = np.random.default_rng(seed).standard_normal(out.shape)
        return sum_(mul(out, Tensor(probe)))

    loss = scalar()
    grads = backward(loss)
    analytic, numeric = [], []
    for t in tensors:
        analytic.append(np.ravel(grads.get(t, np.zeros_like(t.data))))
        numeric.append(numeric_grad(lambda: float(scalar().data), t.data, h=h))
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


@dataclasses.dataclass
class ModelCheck:
    max_error: float
    checked: list


def check_model(cfg: ModelConfig, num_params=20, seed=0, h=DEFAULT_STEP, batch=2):
    """End-to-end check of the noise-prediction loss on randomly chosen scalars.

    Parameters are jittered away from their init (so zero-initialized gates
    carry gradient) and fixed previous latents feed the self-conditioning path.
    """
    rng = np.random.default_rng(seed)
    model = RIN(cfg, seed=seed, dtype=np.float64)
    for p in model.params.values():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    x_t = rng.standard_normal((batch,) + cfg.input_shape)
    t = rng.uniform(0.05, 0.95, size=batch)
    eps = rng.standard_normal(x_t.shape)
    labels = rng.integers(0, cfg.num_classes + 1, size=batch) if cfg.num_classes else None
    prev = rng.standard_normal((batch, cfg.num_latents, cfg.latent_dim)) if cfg.self_cond else None

    def loss_fn():
        pred, _ = model.forward(x_t, t, labels, prev)
        diff = sub(pred, Tensor(eps))
        return mean(mul(diff, diff))

    grads = backward(loss_fn())
    names = list(model.params)
    picks = []
    for _ in range(num_params):
        k = names[rng.integers(len(names))]
        picks.append((k, int(rng.integers(model.params[k].size))))
    analytic, numeric = [], []
    for k, i in picks:
        p = model.params[k]
        analytic.append(grads[p].reshape(-1)[i] if p in grads else 0.0)
        numeric.append(numeric_grad(lambda: float(loss_fn().data), p.data, [i], h)[0])
    return ModelCheck(relative_error(analytic, numeric), picks)


def op_cases(seed=0):
    """Named (fn, inputs) pairs covering every differentiable tensor op."""
    from rin import tensor as T
    from rin import nn

    r = np.random.default_rng(seed)
    a = r.standard_normal((3, 4))
    b = r.standard_normal((3, 4))
    pos = r.uniform(0.5, 2.0, size=(3, 4))
    attn_shapes = nn.attention_param_shapes("a", 8, 6)
    attn_inputs = [r.standard_normal(shape) * 0.3 for _, shape, _ in attn_shapes]

    def attention(q, kv, *weights):
        params = {name: w for (name, _, _), w in zip(attn_shapes, weights)}
        return nn.multihead_attention(q, kv, 2, params, "a")

    return {
        "add": (T.add, [a, r.standard_normal((4,))]),
        "sub": (T.sub, [a, b]),
        "mul": (T.mul, [a, r.standard_normal((3, 1))]),
        "div": (T.div, [a, pos]),
        "square": (T.square, [a]),
        "matmul": (T.matmul, [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))]),
        "matmul_batched": (T.matmul, [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 5))]),
        "sum": (lambda x: T.sum_(x, axis=1), [a]),
        "mean": (lambda x: T.mean(x, axis=0, keepdims=True), [a]),
        "broadcast_to": (lambda x: T.broadcast_to(x, (2, 3, 4)), [r.standard_normal((3, 1))]),
        "reshape": (lambda x: T.reshape(x, (4, 3)), [a]),
        "transpose": (lambda x: T.transpose(x, (1, 0)), [a]),
        "concat": (lambda x, y: T.concat([x, y], axis=0), [a, b]),
        "getitem": (lambda x: T.getitem(x, (slice(None), slice(1, 3))), [a]),
        "take_rows": (lambda x: T.take_rows(x, np.array([0, 2, 2])), [a]),
        "scatter_rows": (lambda x: T.scatter_rows(x, np.array([1, 3]), 4), [r.standard_normal((2, 4))]),
        "softmax": (lambda x: T.softmax(x, axis=-1), [a]),
        "layer_norm": (T.layer_norm, [a, r.standard_normal(4), r.standard_normal(4)]),
        "gelu": (T.gelu, [a]),
        "space_to_depth": (lambda x: T.space_to_depth(x, (2, 2)), [r.standard_normal((1, 4, 4, 2))]),
        "depth_to_space": (lambda x: T.depth_to_space(x, (2, 2)), [r.standard_normal((1, 2, 2, 8))]),
        "attention": (attention, [r.standard_normal((2, 3, 8)), r.standard_normal((2, 5, 6))] + attn_inputs),
    }


def check_ops(seed=0, h=DEFAULT_STEP):
    return {name: check_op(fn, *inputs, seed=seed, h=h) for name, (fn, inputs) in op_cases(seed).items()}

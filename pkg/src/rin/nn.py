"""Transformer building blocks over a flat ``name -> Tensor`` parameter dict."""
from __future__ import annotations

import math

from rin.errors import ConfigError
from rin.tensor import add, gelu, layer_norm, matmul, reshape, softmax, swap_last, transpose


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def norm(x, params, prefix, eps=1e-6):
    return layer_norm(x, params[f"{prefix}.scale"], params[f"{prefix}.bias"], eps)


def ffn(x, params, prefix):
    """Token-wise MLP: gelu(x W1 + b1) W2 + b2."""
    h = gelu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _split_heads(x, heads):
    *lead, length, width = x.shape
    x = reshape(x, tuple(lead) + (length, heads, width // heads))
    k = len(lead)
    return transpose(x, list(range(k)) + [k + 1, k, k + 2])


def _merge_heads(x):
    *lead, heads, length, head_dim = x.shape
    k = len(lead)
    x = transpose(x, list(range(k)) + [k + 1, k, k + 2])
    return reshape(x, tuple(lead) + (length, heads * head_dim))


def multihead_attention(q, kv, heads, params, prefix, on_probs=None):
    """Scaled dot-product attention of ``q`` tokens over ``kv`` tokens.

    Separate Q/K/V projections (with biases) into ``heads`` partitions of the
    query width, followed by an output projection. Normalizing the query input
    is left to the caller. ``on_probs`` receives the ``[..., heads, len_q,
    len_kv]`` attention weights as a numpy array.
    """
    width = params[f"{prefix}.wq"].shape[1]
    if width % heads:
        raise ConfigError(f"attention width {width} is not divisible by {heads} heads")
    head_dim = width // heads
    qh = _split_heads(linear(q, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), heads)
    kh = _split_heads(linear(kv, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), heads)
    vh = _split_heads(linear(kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), heads)
    logits = matmul(qh, swap_last(kh)) * (1.0 / math.sqrt(head_dim))
    probs = softmax(logits, axis=-1)
    if on_probs is not None:
        on_probs(probs.data)
    mixed = _merge_heads(matmul(probs, vh))
    return linear(mixed, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def attention_param_shapes(prefix, q_dim, kv_dim):
    """Parameter shapes of one attention layer whose inner width is ``q_dim``."""
    return [
        (f"{prefix}.wq", (q_dim, q_dim), "dense"),
        (f"{prefix}.bq", (q_dim,), "zeros"),
        (f"{prefix}.wk", (kv_dim, q_dim), "dense"),
        (f"{prefix}.bk", (q_dim,), "zeros"),
        (f"{prefix}.wv", (kv_dim, q_dim), "dense"),
        (f"{prefix}.bv", (q_dim,), "zeros"),
        (f"{prefix}.wo", (q_dim, q_dim), "dense"),
        (f"{prefix}.bo", (q_dim,), "zeros"),
    ]


def ffn_param_shapes(prefix, dim, expansion):
    hidden = dim * expansion
    return [
        (f"{prefix}.w1", (dim, hidden), "dense"),
        (f"{prefix}.b1", (hidden,), "zeros"),
        (f"{prefix}.w2", (hidden, dim), "dense"),
        (f"{prefix}.b2", (dim,), "zeros"),
    ]


def norm_param_shapes(prefix, dim, zero=False):
    return [
        (f"{prefix}.scale", (dim,), "zeros" if zero else "ones"),
        (f"{prefix}.bias", (dim,), "zeros"),
    ]

"""Recurrent Interface Network: tokenize, read / compute / write blocks, readout.

The interface ``X`` holds one token per input patch; the latents ``Z`` hold
``num_latents`` learned tokens plus two conditioning tokens (diffusion time and
class). Each block reads X into Z with cross-attention, runs K self-attention
layers on Z and writes Z back into X. Latents from a previous call can be fed
back through a zero-initialized gate (latent self-conditioning).
"""
from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict

import numpy as np

from rin.errors import ConfigError, ShapeError
from rin.nn import (
    attention_param_shapes,
    ffn,
    ffn_param_shapes,
    linear,
    multihead_attention,
    norm,
    norm_param_shapes,
)
from rin.tensor import (
    Tensor,
    add,
    broadcast_to,
    concat,
    depth_to_space,
    getitem,
    reshape,
    space_to_depth,
    stop_gradient,
    take_rows,
    truncated_normal,
)

NUM_COND_TOKENS = 2


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``input_shape`` is ``(h, w, c)`` for images or ``(l, h, w, c)`` for video;
    ``patch_size`` has one entry per spatial axis (an int is broadcast).
    ``num_classes == 0`` means unconditional; the class token then always
    uses the null row.
    """

    input_shape: tuple
    patch_size: tuple
    num_blocks: int
    layers_per_block: int
    num_latents: int
    latent_dim: int
    interface_dim: int
    heads: int = 16
    ffn_expansion: int = 4
    num_classes: int = 0
    self_cond: bool = True
    context_frames: int = 0
    time_features: int = 128
    init_scale: float = 0.02

    def __post_init__(self):
        shape = tuple(int(s) for s in self.input_shape)
        object.__setattr__(self, "input_shape", shape)
        if len(shape) not in (3, 4):
            raise ConfigError(f"input_shape must be (h, w, c) or (l, h, w, c), got {shape}")
        patch = self.patch_size
        if isinstance(patch, int):
            patch = (patch,) * (len(shape) - 1)
        patch = tuple(int(p) for p in patch)
        if len(patch) == 1:
            patch = patch * (len(shape) - 1)
        object.__setattr__(self, "patch_size", patch)
        if len(patch) != len(shape) - 1:
            raise ConfigError(f"patch_size {patch} needs one extent per spatial axis of {shape}")
        if any(p < 1 for p in patch) or any(s % p for s, p in zip(shape[:-1], patch)):
            raise ConfigError(f"input extents {shape[:-1]} are not divisible by patch {patch}")
        if self.num_latents < 1 or self.num_blocks < 0 or self.layers_per_block < 0:
            raise ConfigError("need num_latents >= 1, num_blocks >= 0, layers_per_block >= 0")
        if self.heads < 1 or self.latent_dim % self.heads or self.interface_dim % self.heads:
            raise ConfigError(
                f"latent_dim {self.latent_dim} and interface_dim {self.interface_dim} "
                f"must be divisible by heads {self.heads}")
        if self.num_classes < 0 or self.ffn_expansion < 1:
            raise ConfigError("num_classes must be >= 0 and ffn_expansion >= 1")
        if self.time_features < 2 or self.time_features % 2:
            raise ConfigError("time_features must be an even number >= 2")
        if self.context_frames:
            if len(shape) != 4 or not 0 < self.context_frames < shape[0]:
                raise ConfigError("context_frames needs a video input with more frames than context")

    @property
    def spatial_shape(self):
        return self.input_shape[:-1]

    @property
    def channels(self):
        return self.input_shape[-1]

    @property
    def grid(self):
        return tuple(s // p for s, p in zip(self.spatial_shape, self.patch_size))

    @property
    def num_tokens(self):
        return math.prod(self.grid)

    @property
    def patch_volume(self):
        return math.prod(self.patch_size) * self.channels

    @property
    def latent_tokens(self):
        return self.num_latents + NUM_COND_TOKENS


def param_shapes(cfg: ModelConfig):
    """Ordered ``(name, shape, init)`` for every learned tensor."""
    d, dz, e = cfg.interface_dim, cfg.latent_dim, cfg.ffn_expansion
    out = [
        ("tokenize.w", (cfg.patch_volume, d), "dense"),
        ("tokenize.b", (d,), "zeros"),
        *norm_param_shapes("tokenize.ln", d),
        ("tokenize.pos", (cfg.num_tokens, d), "dense"),
        ("latents.init", (cfg.num_latents, dz), "dense"),
        ("cond.time.w", (cfg.time_features, dz), "dense"),
        ("cond.time.b", (dz,), "zeros"),
        ("cond.class", (cfg.num_classes + 1, dz), "dense"),
    ]
    if cfg.self_cond:
        out += ffn_param_shapes("selfcond.ffn", dz, e)
        out += norm_param_shapes("selfcond.ln", dz, zero=True)
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}"
        out += norm_param_shapes(f"{p}.read.ln", dz)
        out += attention_param_shapes(f"{p}.read.attn", dz, d)
        out += norm_param_shapes(f"{p}.read.ffn_ln", dz)
        out += ffn_param_shapes(f"{p}.read.ffn", dz, e)
        for k in range(cfg.layers_per_block):
            q = f"{p}.compute.{k}"
            out += norm_param_shapes(f"{q}.ln", dz)
            out += attention_param_shapes(f"{q}.attn", dz, dz)
            out += norm_param_shapes(f"{q}.ffn_ln", dz)
            out += ffn_param_shapes(f"{q}.ffn", dz, e)
        out += norm_param_shapes(f"{p}.write.ln", d)
        out += attention_param_shapes(f"{p}.write.attn", d, dz)
        out += norm_param_shapes(f"{p}.write.ffn_ln", d)
        out += ffn_param_shapes(f"{p}.write.ffn", d, e)
    out += norm_param_shapes("readout.ln", d)
    out += [("readout.w", (d, cfg.patch_volume), "dense"), ("readout.b", (cfg.patch_volume,), "zeros")]
    return out


def init_params(cfg: ModelConfig, rng, dtype=np.float32):
    params = OrderedDict()
    for name, shape, kind in param_shapes(cfg):
        if kind == "dense":
            value = truncated_normal(shape, cfg.init_scale, rng, dtype)
        elif kind == "ones":
            value = np.ones(shape, dtype=dtype)
        else:
            value = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def time_features(t, size, dtype):
    """Sinusoidal features of t in [0, 1]; geometric frequencies from 1 to 1e4."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = size // 2
    freqs = 10.0 ** (4.0 * np.arange(half) / max(half - 1, 1))
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)


def count_attention_entries(cfg: ModelConfig) -> int:
    """Query-key pairs scored in one forward pass (per example, per head)."""
    n, mp, k = cfg.num_tokens, cfg.latent_tokens, cfg.layers_per_block
    return cfg.num_blocks * (2 * n * mp + k * mp * mp)


class Trace:
    """Collects attention maps during a forward pass.

    ``entries`` counts query-key pairs per example; ``read`` keeps the
    head-averaged read attention of each block as ``[batch, m', n]`` arrays.
    """

    def __init__(self, keep_read=True):
        self.keep_read = keep_read
        self.entries = 0
        self.maps = []
        self.read = []

    def hook(self, kind, block):
        def record(probs):
            len_q, len_kv = probs.shape[-2:]
            self.entries += len_q * len_kv
            self.maps.append((kind, block, len_q, len_kv))
            if kind == "read" and self.keep_read:
                self.read.append(probs.mean(axis=-3))
        return record


class RIN:
    """Parameters plus the forward computation.

    ``forward`` takes a batch ``x_t`` of shape ``[B, *input_shape]``, times
    ``t`` of shape ``[B]``, optional integer labels and optional previous
    latents ``[B, m, latent_dim]``. It returns the noise prediction (same
    shape as ``x_t``) and the first ``m`` rows of the final latents.
    """

    def __init__(self, cfg: ModelConfig, seed=0, dtype=np.float32, params=None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        if params is None:
            params = init_params(cfg, np.random.default_rng(seed), self.dtype)
        self.params = params
        self.forward_calls = 0
        self.forward_examples = 0

    def astype(self, dtype):
        params = OrderedDict(
            (k, Tensor(v.data.astype(dtype), requires_grad=True, name=k)) for k, v in self.params.items())
        return RIN(self.cfg, dtype=dtype, params=params)

    def copy(self):
        return self.astype(self.dtype)

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def tokenize(self, x):
        cfg, p = self.cfg, self.params
        if tuple(x.shape[1:]) != cfg.input_shape:
            raise ShapeError(f"input shape {tuple(x.shape[1:])} does not match config {cfg.input_shape}")
        batch = x.shape[0]
        patches = space_to_depth(x, cfg.patch_size)
        patches = reshape(patches, (batch, cfg.num_tokens, cfg.patch_volume))
        tokens = linear(patches, p["tokenize.w"], p["tokenize.b"])
        return add(norm(tokens, p, "tokenize.ln"), p["tokenize.pos"])

    def init_latents(self, t, labels=None, prev_latents=None):
        cfg, p = self.cfg, self.params
        batch = len(t)
        shape = (batch, cfg.num_latents, cfg.latent_dim)
        if cfg.self_cond:
            if prev_latents is None:
                prev = Tensor(np.zeros(shape, dtype=self.dtype))
            else:
                prev = stop_gradient(prev_latents)
                if prev.shape != shape:
                    raise ShapeError(f"prev_latents shape {prev.shape} != expected {shape}")
                prev = Tensor(prev.data.astype(self.dtype, copy=False))
            warm = norm(add(prev, ffn(prev, p, "selfcond.ffn")), p, "selfcond.ln")
            z = add(warm, p["latents.init"])
        else:
            z = broadcast_to(p["latents.init"], shape)
        temb = linear(Tensor(time_features(t, cfg.time_features, self.dtype)), p["cond.time.w"], p["cond.time.b"])
        if labels is None:
            labels = np.full(batch, cfg.num_classes, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (batch,) or labels.min() < 0 or labels.max() > cfg.num_classes:
            raise ShapeError(f"labels must be {batch} integers in [0, {cfg.num_classes}]")
        cemb = take_rows(p["cond.class"], labels)
        return concat([z, reshape(temb, (batch, 1, cfg.latent_dim)),
                       reshape(cemb, (batch, 1, cfg.latent_dim))], axis=1)

    def block(self, i, z, x, trace=None):
        p, heads = self.params, self.cfg.heads
        b = f"blocks.{i}"
        hook = (lambda kind: trace.hook(kind, i)) if trace is not None else (lambda kind: None)
        z = add(z, multihead_attention(norm(z, p, f"{b}.read.ln"), x, heads, p, f"{b}.read.attn", hook("read")))
        z = add(z, ffn(norm(z, p, f"{b}.read.ffn_ln"), p, f"{b}.read.ffn"))
        for k in range(self.cfg.layers_per_block):
            c = f"{b}.compute.{k}"
            zn = norm(z, p, f"{c}.ln")
            z = add(z, multihead_attention(zn, zn, heads, p, f"{c}.attn", hook("compute")))
            z = add(z, ffn(norm(z, p, f"{c}.ffn_ln"), p, f"{c}.ffn"))
        x = add(x, multihead_attention(norm(x, p, f"{b}.write.ln"), z, heads, p, f"{b}.write.attn", hook("write")))
        x = add(x, ffn(norm(x, p, f"{b}.write.ffn_ln"), p, f"{b}.write.ffn"))
        return z, x

    def readout(self, x):
        cfg, p = self.cfg, self.params
        batch = x.shape[0]
        out = linear(norm(x, p, "readout.ln"), p["readout.w"], p["readout.b"])
        out = reshape(out, (batch,) + cfg.grid + (cfg.patch_volume,))
        return depth_to_space(out, cfg.patch_size)

    def forward(self, x_t, t, labels=None, prev_latents=None, trace=None):
        x_t = Tensor(np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=self.dtype))
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if t.shape != (x_t.shape[0],):
            t = np.broadcast_to(t, (x_t.shape[0],))
        self.forward_calls += 1
        self.forward_examples += x_t.shape[0]
        x = self.tokenize(x_t)
        z = self.init_latents(t, labels, prev_latents)
        for i in range(self.cfg.num_blocks):
            z, x = self.block(i, z, x, trace)
        latents = getitem(z, (slice(None), slice(0, self.cfg.num_latents)))
        return self.readout(x), latents

    __call__ = forward

"""LAMB with per-tensor trust ratios, EMA shadow weights and LR schedules."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from rin.errors import TrainingError


def decays_weight(name, value):
    """Weight decay targets matrices and embedding tables, not biases or norms."""
    return value.ndim > 1


class Lamb:
    """Layer-wise adaptive moments (You et al. style).

    For every tensor: r = m_hat / (sqrt(v_hat) + eps) + wd * w, then
    w <- w - lr * phi * r with trust ratio phi = ||w|| / ||r|| (1 when either
    norm is zero). Moments are bias-corrected at every step.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-6, weight_decay=0.0,
                 decay_filter=decays_weight):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter
        self.step_count = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())

    def step(self, grads, lr=None):
        """Apply one update. ``grads`` maps parameter names to arrays.

        Returns per-tensor trust ratios. Missing gradients count as zero.
        """
        lr = self.lr if lr is None else lr
        step = self.step_count + 1
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {name!r}", step=step)
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** step
        c2 = 1.0 - b2 ** step
        ratios = {}
        for name, p in self.params.items():
            w = p.data
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(w)
            m = b1 * self.m[name] + (1.0 - b1) * g
            v = b2 * self.v[name] + (1.0 - b2) * (g * g)
            self.m[name] = m.astype(w.dtype, copy=False)
            self.v[name] = v.astype(w.dtype, copy=False)
            r = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decay_filter(name, w):
                r = r + self.weight_decay * w
            w_norm = float(np.linalg.norm(w))
            r_norm = float(np.linalg.norm(r))
            phi = w_norm / r_norm if w_norm > 0.0 and r_norm > 0.0 else 1.0
            ratios[name] = phi
            if r_norm > 0.0:
                p.data = (w - (lr * phi) * r).astype(w.dtype, copy=False)
        self.step_count = step
        return ratios

    def state_arrays(self):
        out = OrderedDict()
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        out["step"] = np.array([self.step_count], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays):
        for k in self.params:
            self.m[k] = arrays[f"m.{k}"].copy()
            self.v[k] = arrays[f"v.{k}"].copy()
        self.step_count = int(arrays["step"][0])


def lamb_step(params, grads, state):
    """Functional form: ``state`` is a :class:`Lamb`; returns the params dict."""
    state.step(grads)
    return params


class EMA:
    """Exponential moving average of parameters: shadow <- b * shadow + (1 - b) * w."""

    def __init__(self, params, decay=0.9999):
        self.decay = decay
        self.shadow = OrderedDict((k, p.data.copy()) for k, p in params.items())

    def update(self, params):
        b = self.decay
        for k, p in params.items():
            self.shadow[k] = (b * self.shadow[k] + (1.0 - b) * p.data).astype(p.data.dtype, copy=False)


def ema_update(ema, params):
    ema.update(params)
    return ema


def lr_at(step, base_lr, total_steps, warmup_steps=1000, decay="cosine"):
    """Learning rate for update ``step`` (0-based).

    Linear warmup over ``warmup_steps`` updates, then cosine decay reaching 0
    at ``total_steps`` (or constant when ``decay == "none"``).
    """
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if decay in (None, "none"):
        return base_lr
    if decay != "cosine":
        raise ValueError(f"unknown lr decay {decay!r}")
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))

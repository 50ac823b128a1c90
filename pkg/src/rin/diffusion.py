"""Continuous-time diffusion: schedules, corruption, loss and reverse steps."""
from __future__ import annotations

import csv
import dataclasses
import math

import numpy as np

from rin import rng as rngs
from rin.errors import ContractError, ScheduleError
from rin.tensor import Tensor, getitem, mean, mul, no_grad, scatter_rows, stop_gradient, sub


@dataclasses.dataclass(frozen=True)
class ScheduleSpec:
    """A gamma(t) family: ``cosine`` or ``sigmoid``."""

    kind: str = "sigmoid"
    ns: float = 0.0002
    ds: float = 0.00025
    start: float = -3.0
    end: float = 3.0
    tau: float = 0.9
    clip_min: float = 1e-9

    def __post_init__(self):
        if self.kind not in ("cosine", "sigmoid"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "sigmoid" and (self.tau <= 0 or self.end <= self.start):
            raise ContractError("sigmoid schedule needs tau > 0 and end > start")


@dataclasses.dataclass(frozen=True)
class SamplerSpec:
    rule: str = "ddim"
    steps: int = 100
    clip_scale: float = 1.0

    def __post_init__(self):
        if self.rule not in ("ddim", "ddpm"):
            raise ContractError(f"unknown sampler rule {self.rule!r}")
        if int(self.steps) < 1:
            raise ContractError("sampler needs at least one step")


COSINE = ScheduleSpec(kind="cosine")
SIGMOID = ScheduleSpec(kind="sigmoid")


def gamma(spec: ScheduleSpec, t):
    """Signal fraction gamma(t) for t in [0, 1]."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or np.any(np.isnan(t_arr)):
        raise ContractError(f"t must lie in [0, 1], got {t}")
    if spec.kind == "cosine":
        out = np.cos(((t_arr + spec.ns) / (1.0 + spec.ds)) * np.pi / 2) ** 2
    else:
        # sigmoid(u) = (1 + tanh(u / 2)) / 2; the constant halves cancel in the
        # normalized ratio, which keeps t=0 -> 1 and t=1/2 -> 1/2 exact.
        tanh_start = np.tanh(spec.start / spec.tau / 2)
        tanh_end = np.tanh(spec.end / spec.tau / 2)
        u = (t_arr * (spec.end - spec.start) + spec.start) / spec.tau
        out = (tanh_end - np.tanh(u / 2)) / (tanh_end - tanh_start)
        out = np.clip(out, spec.clip_min, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def log_snr(spec, t):
    g = np.asarray(gamma(spec, t))
    return np.log(g) - np.log1p(-np.minimum(g, 1.0 - 1e-16))


def schedule_table(spec, points=1001):
    t = np.linspace(0.0, 1.0, points)
    return t, np.asarray(gamma(spec, t)), log_snr(spec, t)


def write_schedule_csv(path, specs):
    """Write t, gamma and log-SNR columns for each named schedule."""
    names = list(specs)
    columns = {name: schedule_table(specs[name]) for name in names}
    t = next(iter(columns.values()))[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"{n}_{c}" for n in names for c in ("gamma", "logsnr")])
        for i, ti in enumerate(t):
            row = [f"{ti:.6f}"]
            for n in names:
                row += [f"{columns[n][1][i]:.12g}", f"{columns[n][2][i]:.12g}"]
            writer.writerow(row)


def _per_example(values, ndim):
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def noisify(x0, t, eps, spec):
    """x_t = sqrt(gamma) x0 + sqrt(1 - gamma) eps, with t per example (or scalar)."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ContractError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    g = _per_example(gamma(spec, t), x0.ndim)
    return (np.sqrt(g) * x0 + np.sqrt(1.0 - g) * eps).astype(x0.dtype, copy=False)


def train_loss(model, x0, labels, spec, self_cond_rate, rng, stats=None):
    """Self-conditioned epsilon regression loss for one batch.

    Draws, per example and in this order: t ~ U(0, 1), eps ~ N(0, I) and the
    self-conditioning coin. Examples whose coin lands below ``self_cond_rate``
    get a first forward pass with zero latents; its latents, behind a stop
    gradient, condition the second pass. Context frames (video) stay clean
    and are excluded from the loss.
    """
    if not 0.0 <= self_cond_rate <= 1.0:
        raise ContractError(f"self_cond_rate must be in [0, 1], got {self_cond_rate}")
    x0 = np.asarray(x0, dtype=model.dtype)
    batch = x0.shape[0]
    t = rng.uniform(0.0, 1.0, size=batch)
    eps = rng.standard_normal(x0.shape).astype(model.dtype)
    coin = rng.uniform(0.0, 1.0, size=batch)
    x_t = noisify(x0, t, eps, spec)
    k = model.cfg.context_frames
    if k:
        x_t[:, :k] = x0[:, :k]
    if labels is not None:
        labels = np.asarray(labels)

    latents = None
    chosen = np.flatnonzero(coin < self_cond_rate) if model.cfg.self_cond else np.array([], dtype=np.int64)
    if chosen.size:
        sub_labels = None if labels is None else labels[chosen]
        _, estimate = model.forward(x_t[chosen], t[chosen], sub_labels, None)
        latents = scatter_rows(stop_gradient(estimate), chosen, batch)
    eps_pred, _ = model.forward(x_t, t, labels, latents)
    target = Tensor(eps)
    if k:
        eps_pred = getitem(eps_pred, (slice(None), slice(k, None)))
        target = Tensor(eps[:, k:])
    diff = sub(eps_pred, target)
    loss = mean(mul(diff, diff))
    if stats is not None:
        stats["self_cond"] = stats.get("self_cond", 0) + int(chosen.size)
        stats["examples"] = stats.get("examples", 0) + batch
    return loss


def _check_times(spec, t_now, t_next):
    if not 0.0 <= t_next <= t_now <= 1.0:
        raise ContractError(f"need 0 <= t_next <= t_now <= 1, got t_now={t_now}, t_next={t_next}")
    g_now, g_next = gamma(spec, t_now), gamma(spec, t_next)
    if not g_now > 0.0:
        raise ScheduleError(f"gamma({t_now}) = {g_now} is not positive")
    return g_now, g_next


def _clipped_estimates(x_t, eps_pred, g_now, clip_scale):
    x_pred = (x_t - math.sqrt(1.0 - g_now) * eps_pred) / math.sqrt(g_now)
    x_pred = np.clip(x_pred, -clip_scale, clip_scale)
    if g_now < 1.0:
        eps = (x_t - math.sqrt(g_now) * x_pred) / math.sqrt(1.0 - g_now)
    else:
        eps = np.zeros_like(x_t)
    return x_pred, eps


def predict_x0(x_t, eps_pred, t, spec, clip_scale=None):
    g = gamma(spec, t)
    x_pred = (x_t - math.sqrt(1.0 - g) * eps_pred) / math.sqrt(g)
    return x_pred if clip_scale is None else np.clip(x_pred, -clip_scale, clip_scale)


def ddim_step(x_t, eps_pred, t_now, t_next, spec, clip_scale=1.0):
    """Deterministic reverse step from t_now to t_next."""
    g_now, g_next = _check_times(spec, t_now, t_next)
    x_pred, eps = _clipped_estimates(x_t, eps_pred, g_now, clip_scale)
    return math.sqrt(g_next) * x_pred + math.sqrt(1.0 - g_next) * eps


def ddpm_step(x_t, eps_pred, t_now, t_next, spec, clip_scale, z):
    """Ancestral reverse step; ``z`` is the caller-supplied standard normal draw."""
    g_now, g_next = _check_times(spec, t_now, t_next)
    x_pred, eps = _clipped_estimates(x_t, eps_pred, g_now, clip_scale)
    alpha = g_now / g_next
    sigma = math.sqrt(max(1.0 - alpha, 0.0))
    coef = (1.0 - alpha) / math.sqrt(1.0 - g_now) if g_now < 1.0 else 0.0
    return (x_t - coef * eps) / math.sqrt(alpha) + sigma * np.asarray(z)


def generate(model, spec, sampler, count=1, class_label=None, seed=0, context=None,
             carry_latents=True, trace=None, on_step=None):
    """Run the reverse process from pure noise with latent self-conditioning.

    ``context`` (video) holds the clean leading frames ``[count, k, h, w, c]``;
    they are written into the state before every step and into the result.
    ``on_step(step, t, x, latents, trace)`` is called after each forward pass.
    """
    cfg = model.cfg
    steps = int(sampler.steps)
    noise = rngs.generator(seed, rngs.SAMPLE, 0)
    x = noise.standard_normal((count,) + cfg.input_shape)
    labels = None
    if class_label is not None:
        labels = np.broadcast_to(np.asarray(class_label, dtype=np.int64), (count,))
    k = cfg.context_frames
    if k:
        if context is None:
            raise ContractError("this model predicts video from context frames; pass context")
        context = np.asarray(context, dtype=np.float64)
        x[:, :k] = context
    latents = np.zeros((count, cfg.num_latents, cfg.latent_dim), dtype=model.dtype)
    for step in range(steps):
        t_now = 1.0 - step / steps
        t_next = max(1.0 - (step + 1) / steps, 0.0)
        step_trace = trace() if trace is not None else None
        with no_grad():
            eps_pred, new_latents = model.forward(x, np.full(count, t_now), labels,
                                                  latents if carry_latents else None, step_trace)
        eps_pred = eps_pred.data.astype(np.float64)
        latents = new_latents.data
        if on_step is not None:
            on_step(step, t_now, x, latents, step_trace)
        if sampler.rule == "ddim":
            x = ddim_step(x, eps_pred, t_now, t_next, spec, sampler.clip_scale)
        else:
            z = rngs.generator(seed, rngs.SAMPLE, step + 1).standard_normal(x.shape)
            x = ddpm_step(x, eps_pred, t_now, t_next, spec, sampler.clip_scale, z)
        if k:
            x[:, :k] = context
    return x

"""Cost accounting, attention introspection and the analytic-denoiser check.

FLOP convention: one multiply-accumulate is 2 FLOPs; bias, residual and
positional additions are 1 FLOP per element; layer norm, GELU and softmax are
5 FLOPs per element; attention-logit scaling is 1 FLOP per score. Counts are
for one forward pass on one example (one sampling step).
"""
from __future__ import annotations

import csv
import dataclasses
import math
import os
from collections import OrderedDict

import numpy as np
from scipy import integrate

from rin import rng as rngs
from rin.checkpoint import Checkpoint, save_checkpoint
from rin.diffusion import gamma, generate, noisify
from rin.errors import ShapeError
from rin.imageio import write_gray_ppm
from rin.model import ModelConfig, Trace, count_attention_entries
from rin.tensor import no_grad

FLOPS_PER_MAC = 2
NORM_FLOPS = 5
ACT_FLOPS = 5
SOFTMAX_FLOPS = 5
COMPONENTS = ("tokenize", "condition", "read", "compute", "write", "readout")


# ---------------------------------------------------------------------------
# parameters


def _attn_params(q, kv):
    return 2 * q * q + 2 * kv * q + 4 * q


def _ffn_params(dim, e):
    return 2 * e * dim * dim + e * dim + dim


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`rin.model.RIN`."""
    d, dz, e = cfg.interface_dim, cfg.latent_dim, cfg.ffn_expansion
    P, n, m = cfg.patch_volume, cfg.num_tokens, cfg.num_latents
    total = P * d + 3 * d + n * d                                   # tokenize
    total += m * dz                                                # latent init
    total += cfg.time_features * dz + dz + (cfg.num_classes + 1) * dz
    if cfg.self_cond:
        total += _ffn_params(dz, e) + 2 * dz
    read = 4 * dz + _attn_params(dz, d) + _ffn_params(dz, e)
    compute = 4 * dz + _attn_params(dz, dz) + _ffn_params(dz, e)
    write = 4 * d + _attn_params(d, dz) + _ffn_params(d, e)
    total += cfg.num_blocks * (read + cfg.layers_per_block * compute + write)
    total += 2 * d + d * P + P                                     # readout
    return total


# ---------------------------------------------------------------------------
# FLOPs


@dataclasses.dataclass
class CostReport:
    """Per-example forward cost of one sampling step."""

    params: int
    flops: int
    attention_entries: int
    breakdown: dict
    scaling: dict

    @property
    def gflops(self):
        return self.flops / 1e9

    def to_text(self):
        lines = [
            "# FLOP convention: 2 FLOPs per multiply-accumulate; +1 per element for bias/residual",
            f"#   adds; {NORM_FLOPS} per element for layer norm, GELU and softmax; one forward pass.",
            f"{'params':<20}{self.params:>20,d}",
            f"{'GFLOPs':<20}{self.gflops:>20.3f}",
            f"{'attention entries':<20}{self.attention_entries:>20,d}",
        ]
        for name in COMPONENTS:
            lines.append(f"{'  ' + name:<20}{self.breakdown[name] / 1e9:>20.3f}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        rows = ["component,flops,interface_flops,latent_flops"]
        for name in COMPONENTS:
            rows.append(f"{name},{self.breakdown[name]},{self.scaling[name]['interface']},"
                        f"{self.scaling[name]['latent']}")
        rows.append(f"total,{self.flops},,")
        rows.append(f"params,{self.params},,")
        rows.append(f"attention_entries,{self.attention_entries},,")
        return "\n".join(rows) + "\n"


def _linear(rows, fan_in, fan_out):
    return FLOPS_PER_MAC * rows * fan_in * fan_out + rows * fan_out


def _mlp(rows, dim, e):
    return _linear(rows, dim, e * dim) + ACT_FLOPS * rows * e * dim + _linear(rows, e * dim, dim)


def _attention_terms(len_q, len_kv, q_dim, kv_dim, heads):
    """(query-side, key/value-side, pairwise) FLOPs of one attention layer."""
    query = 2 * _linear(len_q, q_dim, q_dim)                       # Q and output projections
    keyval = 2 * _linear(len_kv, kv_dim, q_dim)
    pairwise = (2 * FLOPS_PER_MAC * len_q * len_kv * q_dim          # logits and value mixing
                + (1 + SOFTMAX_FLOPS) * len_q * len_kv * heads)
    return query, keyval, pairwise


def count_flops(cfg: ModelConfig) -> CostReport:
    """Analytic forward FLOPs, split by component and by what each term scales with.

    ``scaling[c]['interface']`` collects terms proportional to the number of
    interface tokens n; ``scaling[c]['latent']`` collects terms independent of n.
    """
    d, dz, e, h = cfg.interface_dim, cfg.latent_dim, cfg.ffn_expansion, cfg.heads
    n, m, mp, K = cfg.num_tokens, cfg.num_latents, cfg.latent_tokens, cfg.layers_per_block
    P = cfg.patch_volume
    terms = {c: {"interface": 0, "latent": 0} for c in COMPONENTS}

    terms["tokenize"]["interface"] += _linear(n, P, d) + NORM_FLOPS * n * d + n * d

    cond = _linear(1, cfg.time_features, dz)
    if cfg.self_cond:
        cond += _mlp(m, dz, e) + m * dz + NORM_FLOPS * m * dz + m * dz
    terms["condition"]["latent"] += cond

    q, kv, pair = _attention_terms(mp, n, dz, d, h)
    read_latent = 2 * NORM_FLOPS * mp * dz + q + mp * dz + _mlp(mp, dz, e) + mp * dz
    terms["read"]["latent"] += cfg.num_blocks * read_latent
    terms["read"]["interface"] += cfg.num_blocks * (kv + pair)

    q, kv, pair = _attention_terms(mp, mp, dz, dz, h)
    layer = 2 * NORM_FLOPS * mp * dz + q + kv + pair + mp * dz + _mlp(mp, dz, e) + mp * dz
    terms["compute"]["latent"] += cfg.num_blocks * K * layer

    q, kv, pair = _attention_terms(n, mp, d, dz, h)
    write_interface = 2 * NORM_FLOPS * n * d + q + pair + n * d + _mlp(n, d, e) + n * d
    terms["write"]["interface"] += cfg.num_blocks * write_interface
    terms["write"]["latent"] += cfg.num_blocks * kv

    terms["readout"]["interface"] += NORM_FLOPS * n * d + _linear(n, d, P)

    breakdown = {c: terms[c]["interface"] + terms[c]["latent"] for c in COMPONENTS}
    return CostReport(params=count_params(cfg), flops=sum(breakdown.values()),
                      attention_entries=count_attention_entries(cfg),
                      breakdown=breakdown, scaling=terms)


# ---------------------------------------------------------------------------
# read attention


@dataclasses.dataclass
class AttentionTrace:
    """Head-averaged read attention of one example: ``read[block, latent, token]``."""

    read: np.ndarray
    grid: tuple
    t: float = float("nan")

    @property
    def shape(self):
        return self.read.shape

    def row_sums(self):
        return self.read.sum(axis=-1)

    def spatial(self):
        """Average over latents and restore the token grid: ``[block, *grid]``."""
        return self.read.mean(axis=1).reshape((self.read.shape[0],) + tuple(self.grid))

    def entropy(self):
        """Mean row entropy (nats) per block."""
        p = np.clip(self.read, 1e-30, None)
        return -(self.read * np.log(p)).sum(axis=-1).mean(axis=-1)

    def write_images(self, out_dir, prefix="read"):
        """One grayscale PPM per block; video grids are tiled frame-major along width."""
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for b, plane in enumerate(self.spatial()):
            if plane.ndim == 3:
                plane = np.concatenate(list(plane), axis=1)
            elif plane.ndim == 1:
                plane = plane[None, :]
            path = os.path.join(out_dir, f"{prefix}-block{b:02d}.ppm")
            write_gray_ppm(path, plane)
            paths.append(path)
        return paths


def export_read_attention(model, x_t, t, class_label=None, prev_latents=None):
    """Run one instrumented forward pass on a single example and return its read attention.

    Only the ``m`` learned latents are kept as rows; the conditioning tokens
    are dropped.
    """
    x_t = np.asarray(x_t)
    if x_t.shape == model.cfg.input_shape:
        x_t = x_t[None]
    if x_t.shape[0] != 1:
        raise ShapeError(f"export_read_attention takes one example, got batch {x_t.shape[0]}")
    labels = None if class_label is None else np.array([class_label])
    if prev_latents is not None:
        prev_latents = np.asarray(prev_latents)
        if prev_latents.ndim == 2:
            prev_latents = prev_latents[None]
    trace = Trace()
    with no_grad():
        model.forward(x_t, np.array([t], dtype=np.float64), labels, prev_latents, trace)
    m = model.cfg.num_latents
    read = np.stack([r[0, :m].astype(np.float64) for r in trace.read])
    return AttentionTrace(read=read, grid=model.cfg.grid, t=float(t))


def trace_sampling(model, spec, sampler, seed=0, class_label=None, context=None):
    """Sample one example and collect the read attention at every step."""
    traces = []
    m = model.cfg.num_latents

    def on_step(step, t, x, latents, step_trace):
        read = np.stack([r[0, :m].astype(np.float64) for r in step_trace.read])
        traces.append(AttentionTrace(read=read, grid=model.cfg.grid, t=float(t)))

    sample = generate(model, spec, sampler, count=1, class_label=class_label, seed=seed,
                      context=context, trace=Trace, on_step=on_step)
    return sample[0], traces


def write_entropy_csv(path, traces):
    """Rows of step, t, block, mean row entropy."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "t", "block", "entropy"])
        for step, tr in enumerate(traces):
            for b, h in enumerate(tr.entropy()):
                writer.writerow([step, f"{tr.t:.6f}", b, f"{h:.8f}"])


def write_trace_binary(path, traces, config_text="", digest=""):
    """Store traces with the checkpoint container, one tensor per step."""
    tensors = OrderedDict((f"step.{i:04d}.read", tr.read) for i, tr in enumerate(traces))
    tensors["t"] = np.array([tr.t for tr in traces], dtype=np.float64)
    save_checkpoint(path, Checkpoint(config_text, digest, len(traces),
                                     OrderedDict(attention=tensors)))


# ---------------------------------------------------------------------------
# analytic denoiser


@dataclasses.dataclass
class OracleReport:
    """Monte-Carlo loss of a predictor on N(0, I) data against the Bayes optimum."""

    optimum: float
    model_loss: float
    model_stderr: float
    oracle_loss: float
    oracle_stderr: float
    trials: int

    @property
    def gap(self):
        return self.model_loss - self.optimum

    @property
    def oracle_gap(self):
        return self.oracle_loss - self.optimum

    def to_text(self):
        return (f"analytic optimum E_t[gamma] {self.optimum:.6f}\n"
                f"optimal predictor loss      {self.oracle_loss:.6f} +- {self.oracle_stderr:.6f}\n"
                f"model loss                  {self.model_loss:.6f} +- {self.model_stderr:.6f}\n"
                f"gap                         {self.gap:.6f}\n")


def expected_gamma(spec):
    """E_t[gamma(t)] for t ~ U(0, 1), by adaptive quadrature."""
    value, _ = integrate.quad(lambda t: gamma(spec, t), 0.0, 1.0, epsabs=1e-12, epsrel=1e-12, limit=200)
    return value


def optimal_predictor(x_t, t, spec):
    """Posterior-mean noise estimate for x0 ~ N(0, I): sqrt(1 - gamma) x_t."""
    g = np.asarray(gamma(spec, np.asarray(t, dtype=np.float64)))
    g = g.reshape(g.shape + (1,) * (np.ndim(x_t) - g.ndim))
    return np.sqrt(1.0 - g) * x_t


def eval_oracle_gap(model, spec, trials=4096, seed=0, batch=256, shape=None):
    """Compare a predictor with the analytic optimum on standard-normal data.

    ``model`` is a :class:`rin.model.RIN` or any callable ``(x_t, t) -> eps_pred``.
    Each trial draws x0, eps and t; both the model and the optimal predictor
    see the same draws. Losses are per-example pixel means.
    """
    if shape is None:
        shape = model.cfg.input_shape
    if hasattr(model, "forward"):
        def predict(x, t):
            with no_grad():
                return model.forward(x, t)[0].data.astype(np.float64)
    else:
        predict = model
    model_losses, oracle_losses = [], []
    done = 0
    counter = 0
    while done < trials:
        size = min(batch, trials - done)
        r = rngs.generator(seed, rngs.EVAL, counter)
        x0 = r.standard_normal((size,) + tuple(shape))
        eps = r.standard_normal(x0.shape)
        t = r.uniform(0.0, 1.0, size=size)
        x_t = noisify(x0, t, eps, spec)
        axes = tuple(range(1, x0.ndim))
        model_losses.append(((np.asarray(predict(x_t, t)) - eps) ** 2).mean(axis=axes))
        oracle_losses.append(((optimal_predictor(x_t, t, spec) - eps) ** 2).mean(axis=axes))
        done += size
        counter += 1
    ml = np.concatenate(model_losses)
    ol = np.concatenate(oracle_losses)
    root = math.sqrt(trials)
    return OracleReport(optimum=expected_gamma(spec), model_loss=float(ml.mean()),
                        model_stderr=float(ml.std(ddof=1) / root), oracle_loss=float(ol.mean()),
                        oracle_stderr=float(ol.std(ddof=1) / root), trials=trials)

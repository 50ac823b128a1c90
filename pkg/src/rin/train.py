"""Training loop with checkpointing, metrics logging and exact resume."""
from __future__ import annotations

import dataclasses
import glob
import logging
import math
import os
import re
import time
from collections import OrderedDict

import numpy as np

from rin import rng as rngs
from rin.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rin.config import RunConfig, config_digest, config_to_text, parse_config
from rin.data import make_dataset
from rin.diffusion import train_loss
from rin.errors import ConfigError, TrainingError
from rin.model import RIN
from rin.optim import EMA, Lamb, lr_at
from rin.tensor import Tensor, backward

log = logging.getLogger(__name__)

METRICS_HEADER = "step,loss,lr,grad_norm,wall_time,self_cond,examples"
CKPT_PATTERN = re.compile(r"ckpt-(\d+)\.rin$")


@dataclasses.dataclass
class TrainState:
    """Everything a checkpoint persists."""

    cfg: RunConfig
    model: RIN
    lamb: Lamb
    ema: EMA
    step: int = 0

    @classmethod
    def fresh(cls, cfg: RunConfig):
        model = RIN(cfg.model, seed=cfg.train.seed)
        o = cfg.optim
        lamb = Lamb(model.params, lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps,
                    weight_decay=o.weight_decay)
        return cls(cfg, model, lamb, EMA(model.params, o.ema_decay))

    def to_checkpoint(self) -> Checkpoint:
        params = OrderedDict((k, p.data) for k, p in self.model.params.items())
        rng_state = OrderedDict(seed=np.array([self.cfg.train.seed], dtype=np.int64),
                                counter=np.array([self.step], dtype=np.int64))
        sections = OrderedDict(params=params, lamb=self.lamb.state_arrays(),
                               ema=OrderedDict(self.ema.shadow), rng=rng_state)
        return Checkpoint(config_to_text(self.cfg), config_digest(self.cfg), self.step, sections)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: RunConfig | None = None):
        """Rebuild the state; ``cfg`` (if given) must match the stored digest."""
        stored = parse_config(ckpt.config_text)
        if config_digest(stored) != ckpt.digest:
            raise ConfigError("checkpoint config text does not match its digest")
        if cfg is not None and config_digest(cfg) != ckpt.digest:
            raise ConfigError(f"config digest {config_digest(cfg)[:12]} does not match "
                              f"checkpoint digest {ckpt.digest[:12]}")
        state = cls.fresh(cfg or stored)
        for section in ("params", "lamb", "ema", "rng"):
            if section not in ckpt.sections:
                raise ConfigError(f"checkpoint lacks section {section!r}")
        params = ckpt.sections["params"]
        if list(params) != list(state.model.params):
            raise ConfigError("checkpoint parameter names differ from the configured model")
        for k, p in state.model.params.items():
            if params[k].shape != p.shape:
                raise ConfigError(f"{k}: checkpoint shape {params[k].shape} != model shape {p.shape}")
            p.data = params[k].copy()
        state.lamb.load_state_arrays(ckpt.sections["lamb"])
        state.ema.shadow = OrderedDict((k, v.copy()) for k, v in ckpt.sections["ema"].items())
        state.step = ckpt.step
        return state


def checkpoint_path(out_dir, step):
    return os.path.join(out_dir, f"ckpt-{step:08d}.rin")


def latest_checkpoint(out_dir):
    found = []
    for path in glob.glob(os.path.join(out_dir, "ckpt-*.rin")):
        match = CKPT_PATTERN.search(path)
        if match:
            found.append((int(match.group(1)), path))
    return max(found)[1] if found else None


def model_from_checkpoint(path, use_ema=True):
    """Load ``(RunConfig, RIN)``; EMA weights by default."""
    ckpt = load_checkpoint(path)
    state = TrainState.from_checkpoint(ckpt)
    model = state.model
    if use_ema:
        for k, p in model.params.items():
            p.data = state.ema.shadow[k].copy()
    return state.cfg, model


def _truncate_metrics(path, step):
    """Keep the header and rows for steps <= ``step``."""
    if not os.path.exists(path):
        with open(path, "w") as fh:
            fh.write(METRICS_HEADER + "\n")
        return
    with open(path) as fh:
        lines = fh.read().splitlines()
    kept = [METRICS_HEADER] + [ln for ln in lines[1:] if ln and int(ln.split(",", 1)[0]) <= step]
    with open(path, "w") as fh:
        fh.write("\n".join(kept) + "\n")


@dataclasses.dataclass
class TrainResult:
    state: TrainState
    losses: list
    self_cond: int
    examples: int
    metrics_path: str
    checkpoints: list


def train(cfg: RunConfig, resume=False, max_steps=None, out_dir=None) -> TrainResult:
    """Run (or continue) training.

    ``resume=True`` continues from the newest checkpoint in the output
    directory, if any. ``max_steps`` stops early after that many updates in
    this call (simulated interruption). Metrics rows are appended per update.
    """
    out_dir = out_dir or cfg.run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    dataset = make_dataset(cfg.data)
    if tuple(dataset.shape) != cfg.model.input_shape:
        raise ConfigError(f"dataset shape {tuple(dataset.shape)} != model input {cfg.model.input_shape}")

    latest = latest_checkpoint(out_dir) if resume else None
    if latest is not None:
        state = TrainState.from_checkpoint(load_checkpoint(latest), cfg)
        log.info("resumed from %s at step %d", latest, state.step)
    else:
        state = TrainState.fresh(cfg)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    if latest is None and os.path.exists(metrics_path):
        os.remove(metrics_path)
    _truncate_metrics(metrics_path, state.step)

    tc, oc = cfg.train, cfg.optim
    model, params = state.model, state.model.params
    end = tc.total_updates if max_steps is None else min(tc.total_updates, state.step + max_steps)
    losses, checkpoints = [], []
    sc_total = ex_total = 0
    start_time = time.perf_counter()
    with open(metrics_path, "a") as metrics:
        while state.step < end:
            step = state.step
            x0, labels = dataset.batch(rngs.generator(tc.seed, rngs.DATA, step), tc.batch_size)
            stats = {}
            loss = train_loss(model, x0, labels, cfg.schedule, tc.self_cond_rate,
                              rngs.generator(tc.seed, rngs.NOISE, step), stats)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"loss is {value}; last good checkpoint kept", step=step + 1)
            grads = backward(loss)
            named = OrderedDict((k, grads[p]) for k, p in params.items() if p in grads)
            grad_norm = math.sqrt(sum(float(np.vdot(g, g)) for g in named.values()))
            lr = lr_at(step, oc.lr, tc.total_updates, oc.warmup, oc.decay)
            state.lamb.step(named, lr)
            for p in params.values():
                p.grad = None
            state.ema.update(params)
            state.step = step + 1
            losses.append(value)
            sc_total += stats["self_cond"]
            ex_total += stats["examples"]
            metrics.write(f"{state.step},{value!r},{lr!r},{grad_norm!r},"
                          f"{time.perf_counter() - start_time:.6f},{stats['self_cond']},{stats['examples']}\n")
            if cfg.run.log_every and state.step % cfg.run.log_every == 0:
                metrics.flush()
                log.info("step %d loss %.5f lr %.2e grad_norm %.3f", state.step, value, lr, grad_norm)
            if state.step == tc.total_updates or (cfg.run.checkpoint_every
                                                  and state.step % cfg.run.checkpoint_every == 0):
                metrics.flush()
                path = checkpoint_path(out_dir, state.step)
                save_checkpoint(path, state.to_checkpoint())
                checkpoints.append(path)
    return TrainResult(state, losses, sc_total, ex_total, metrics_path, checkpoints)

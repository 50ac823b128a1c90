"""Command-line entry point: ``rin <subcommand> ...``."""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
from collections import OrderedDict

from rin import rng as rngs
from rin.analysis import (count_flops, eval_oracle_gap, trace_sampling, write_entropy_csv,
                          write_trace_binary)
from rin.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rin.config import PRESETS, config_digest, config_to_text, load_config
from rin.data import make_dataset
from rin.diffusion import SamplerSpec, generate
from rin.errors import RinError
from rin.gradcheck import check_model, check_ops
from rin.imageio import write_samples
from rin.model import RIN
from rin.train import model_from_checkpoint, train

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4


def _thread_limit():
    value = os.environ.get("RIN_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


def _context_frames(cfg, count, seed):
    k = cfg.model.context_frames
    if not k:
        return None
    clips, _ = make_dataset(cfg.data).batch(rngs.generator(seed, rngs.EVAL, 0), count)
    return clips[:, :k]


def cmd_train(args):
    cfg = load_config(args.config)
    if args.out:
        cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, out_dir=args.out))
    result = train(cfg, resume=args.resume, max_steps=args.max_steps)
    final = result.losses[-1] if result.losses else float("nan")
    print(f"step {result.state.step}  loss {final:.6f}  metrics {result.metrics_path}")
    for path in result.checkpoints[-1:]:
        print(f"checkpoint {path}")
    return 0


def cmd_sample(args):
    cfg, model = model_from_checkpoint(args.checkpoint, use_ema=not args.raw_weights)
    sampler = SamplerSpec(rule=args.rule or cfg.sampler.rule, steps=args.steps or cfg.sampler.steps,
                          clip_scale=cfg.sampler.clip_scale)
    context = _context_frames(cfg, args.count, args.seed)
    latents = OrderedDict()

    def keep_latents(step, t, x, z, trace):
        latents[f"step.{step:04d}.latents"] = z.copy()

    samples = generate(model, cfg.sample_schedule, sampler, count=args.count, class_label=args.class_label,
                       seed=args.seed, context=context, on_step=keep_latents if args.trace else None)
    paths = write_samples(args.out, samples)
    if args.trace:
        trace_path = os.path.join(args.out, "latents.rin")
        save_checkpoint(trace_path, Checkpoint(config_to_text(cfg), config_digest(cfg), sampler.steps,
                                               OrderedDict(latents=latents)))
        paths.append(trace_path)
    for p in paths:
        print(p)
    return 0


def cmd_gradcheck(args):
    cfg = load_config(args.config)
    worst = 0.0
    for name, err in check_ops(seed=args.seed).items():
        worst = max(worst, err)
        print(f"{name:<18}{err:.3e}")
    model = check_model(cfg.model, num_params=args.params, seed=args.seed)
    print(f"{'model':<18}{model.max_error:.3e}  ({len(model.checked)} scalars)")
    ok = worst < OP_TOLERANCE and model.max_error < MODEL_TOLERANCE
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_flops(args):
    model_cfg = PRESETS[args.config] if args.config in PRESETS else load_config(args.config).model
    report = count_flops(model_cfg)
    sys.stdout.write(report.to_text())
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(report.to_csv())
    else:
        sys.stdout.write("\n" + report.to_csv())
    return 0


def cmd_attn(args):
    cfg, model = model_from_checkpoint(args.checkpoint, use_ema=not args.raw_weights)
    sampler = SamplerSpec(rule=cfg.sampler.rule, steps=args.steps, clip_scale=cfg.sampler.clip_scale)
    context = _context_frames(cfg, 1, args.seed)
    sample, traces = trace_sampling(model, cfg.sample_schedule, sampler, seed=args.seed,
                                    class_label=args.class_label, context=context)
    os.makedirs(args.out, exist_ok=True)
    for step, tr in enumerate(traces):
        tr.write_images(args.out, prefix=f"read-step{step:04d}")
    write_entropy_csv(os.path.join(args.out, "entropy.csv"), traces)
    write_trace_binary(os.path.join(args.out, "read.rin"), traces, config_to_text(cfg), config_digest(cfg))
    write_samples(args.out, sample[None])
    print(f"{len(traces)} steps x {traces[0].shape[0]} blocks written to {args.out}")
    return 0


def cmd_eval_oracle(args):
    cfg = load_config(args.config)
    if args.checkpoint:
        _, model = model_from_checkpoint(args.checkpoint, use_ema=not args.raw_weights)
    else:
        model = RIN(cfg.model, seed=cfg.train.seed)
    report = eval_oracle_gap(model, cfg.schedule, trials=args.trials, seed=args.seed)
    sys.stdout.write(report.to_text())
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="rin", description="Recurrent Interface Network diffusion toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("config")
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many updates")
    p.add_argument("--out", default=None, help="override run.out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate PPM samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--rule", choices=("ddim", "ddpm"), default=None)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class", dest="class_label", type=int, default=None)
    p.add_argument("--out", default="samples")
    p.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")
    p.add_argument("--trace", action="store_true", help="also store per-step latents")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("config")
    p.add_argument("--params", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="parameter and FLOP report")
    p.add_argument("config", help=f"config file or preset ({', '.join(PRESETS)})")
    p.add_argument("--csv", default=None, help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("attn", help="export read attention across a sampling run")
    p.add_argument("checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--class", dest="class_label", type=int, default=None)
    p.add_argument("--out", default="attention")
    p.add_argument("--raw-weights", action="store_true")
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("eval-oracle", help="loss gap to the Bayes-optimal Gaussian denoiser")
    p.add_argument("config")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--trials", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw-weights", action="store_true")
    p.set_defaults(func=cmd_eval_oracle)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except RinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Run configuration in flat ``section.key=value`` text.

Example::

    model.input_shape=8,8,3
    model.patch_size=4
    model.num_blocks=2
    train.batch_size=32
    data.kind=gradient-images

Lines starting with ``#`` are comments. Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import hashlib
import typing

from rin.data import DatasetSpec
from rin.diffusion import SamplerSpec, ScheduleSpec
from rin.errors import ConfigError
from rin.model import ModelConfig


@dataclasses.dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    warmup: int = 1000
    decay: str = "cosine"
    ema_decay: float = 0.9999


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    total_updates: int = 1000
    self_cond_rate: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.self_cond_rate <= 1.0:
            raise ConfigError(f"self_cond_rate must be in [0, 1], got {self.self_cond_rate}")
        if self.batch_size < 1 or self.total_updates < 0:
            raise ConfigError("batch_size must be >= 1 and total_updates >= 0")


@dataclasses.dataclass(frozen=True)
class RunOptions:
    """Operational knobs that do not affect the trained weights."""

    out_dir: str = "runs/default"
    checkpoint_every: int = 500
    log_every: int = 100


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    schedule: ScheduleSpec = ScheduleSpec(kind="sigmoid")
    sample_schedule: ScheduleSpec = ScheduleSpec(kind="cosine")
    sampler: SamplerSpec = SamplerSpec()
    optim: OptimConfig = OptimConfig()
    train: TrainConfig = TrainConfig()
    data: DatasetSpec = DatasetSpec()
    run: RunOptions = RunOptions()


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}
_SECTION_TYPES = {
    "model": ModelConfig, "schedule": ScheduleSpec, "sample_schedule": ScheduleSpec,
    "sampler": SamplerSpec, "optim": OptimConfig, "train": TrainConfig,
    "data": DatasetSpec, "run": RunOptions,
}
_UNHASHED = ("run",)


def _coerce(text, kind, key):
    try:
        if kind is bool:
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("true", "1", "yes", "on")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())
        return text.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str) -> RunConfig:
    values: dict[str, dict[str, typing.Any]] = {name: {} for name in _SECTION_TYPES}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, field = key.partition(".")
        if section not in _SECTION_TYPES:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        cls = _SECTION_TYPES[section]
        hints = typing.get_type_hints(cls)
        if field not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[section][field] = _coerce(value, hints[field], key)
    if "input_shape" not in values["model"]:
        raise ConfigError("model.input_shape is required")
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        if section == "model" or values[section]:
            try:
                kwargs[section] = cls(**values[section])
            except TypeError as exc:
                raise ConfigError(f"section {section!r}: {exc}") from None
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_to_text(cfg: RunConfig, include_run=True) -> str:
    lines = []
    for section in _SECTION_TYPES:
        if not include_run and section in _UNHASHED:
            continue
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name}={_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def config_digest(cfg: RunConfig) -> str:
    """SHA-256 over everything that shapes the trained weights."""
    return hashlib.sha256(config_to_text(cfg, include_run=False).encode("utf-8")).hexdigest()


def _image_preset(size, blocks, depth, latents, latent_dim, interface_dim, patch):
    return ModelConfig(input_shape=(size, size, 3), patch_size=patch, num_blocks=blocks,
                       layers_per_block=depth, num_latents=latents, latent_dim=latent_dim,
                       interface_dim=interface_dim, heads=16, num_classes=1000)


# Model hyper-parameter rows for the published ImageNet and Kinetics-600 models.
PRESETS = {
    "in64": _image_preset(64, 4, 4, 128, 1024, 256, 4),
    "in128": _image_preset(128, 6, 4, 128, 1024, 512, 4),
    "in256": _image_preset(256, 6, 4, 256, 1024, 512, 8),
    "in512": _image_preset(512, 6, 6, 256, 768, 512, 8),
    "in1024": _image_preset(1024, 6, 8, 256, 768, 512, 8),
    "k600": ModelConfig(input_shape=(16, 64, 64, 3), patch_size=(2, 4, 4), num_blocks=6,
                        layers_per_block=4, num_latents=256, latent_dim=1024, interface_dim=512,
                        heads=16, num_classes=0, context_frames=5),
}


def resolve_model(name_or_path) -> ModelConfig:
    """A preset name or a config file path."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    return load_config(name_or_path).model

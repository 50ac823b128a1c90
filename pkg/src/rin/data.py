"""Datasets: CIFAR-10 binary batches and small synthetic stand-ins.

Every dataset yields float arrays in [-1, 1] (the unclipped Gaussian is the
one exception) and exposes ``shape``, ``num_classes`` and
``batch(rng, size) -> (x, labels)``.
"""
from __future__ import annotations

import dataclasses
import glob
import os

import numpy as np

from rin import rng as rngs
from rin.errors import ConfigError, FormatError

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


@dataclasses.dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gradient-images"
    resolution: int = 8
    channels: int = 3
    frames: int = 4
    size: int = 8
    path: str = ""
    clip: bool = True
    flip: bool = False
    num_classes: int = 0

    def __post_init__(self):
        if self.kind not in DATASETS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}; choose from {sorted(DATASETS)}")


def decode_cifar10(raw: bytes, source="<bytes>"):
    """Parse concatenated 3073-byte records into ([N, 32, 32, 3] in [-1, 1], labels)."""
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise FormatError(f"{source}: truncated record {whole} ({len(raw) % CIFAR_RECORD} trailing bytes)")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise FormatError(f"{source}: record {int(bad[0])} has label {int(labels[bad[0]])} >= 10")
    planar = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planar.transpose(0, 2, 3, 1).astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return images, labels


def load_cifar10(path):
    """Load one binary batch file, or every ``*_batch*.bin`` file in a directory."""
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*batch*.bin")))
        if not files:
            raise FormatError(f"{path}: no CIFAR-10 binary batch files found")
    else:
        files = [path]
    parts = []
    for f in files:
        with open(f, "rb") as fh:
            parts.append(decode_cifar10(fh.read(), f))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


class ArrayDataset:
    """A finite set of examples sampled uniformly with replacement."""

    def __init__(self, images, labels=None, num_classes=0, flip=False):
        self.images = images
        self.labels = labels
        self.num_classes = num_classes
        self.flip = flip
        self.shape = images.shape[1:]

    def __len__(self):
        return len(self.images)

    def example(self, index):
        return self.images[index]

    def batch(self, rng, size):
        idx = rng.integers(0, len(self.images), size=size)
        x = self.images[idx].copy()
        if self.flip:
            flips = rng.uniform(size=size) < 0.5
            x[flips] = x[flips][:, :, ::-1]
        labels = None if self.labels is None or not self.num_classes else self.labels[idx]
        return x, labels


class GaussianDataset:
    """i.i.d. N(0, 1) pixels; clipped to +-3 and divided by 3 unless ``clip=False``."""

    num_classes = 0

    def __init__(self, shape, clip=True):
        self.shape = tuple(shape)
        self.clip = clip

    def batch(self, rng, size):
        x = rng.standard_normal((size,) + self.shape)
        if self.clip:
            x = np.clip(x, -3.0, 3.0) / 3.0
        return x.astype(np.float32), None


def checkerboard_points(rng, count):
    """2-D checkerboard density on [-1, 1]^2 (4x4 cells, alternate cells filled)."""
    x1 = rng.uniform(size=count) * 4 - 2
    x2 = rng.uniform(size=count) - rng.integers(0, 2, size=count) * 2
    x2 = x2 + np.floor(x1) % 2
    return np.stack([x1, x2], axis=-1) / 2.0


class CheckerboardDataset:
    """Each example is a resolution x resolution grid of 2-channel checkerboard points."""

    num_classes = 0

    def __init__(self, resolution=8):
        self.shape = (resolution, resolution, 2)

    def batch(self, rng, size):
        pts = checkerboard_points(rng, size * self.shape[0] * self.shape[1])
        return pts.reshape((size,) + self.shape).astype(np.float32), None


def gradient_image(index, resolution=8, channels=3):
    """Deterministic smooth image: an oriented low-frequency sinusoid per channel."""
    r = rngs.generator(index, rngs.DATA, 7919)
    angle = r.uniform(0, 2 * np.pi)
    freq = r.uniform(0.5, 1.5)
    phases = r.uniform(0, 2 * np.pi, size=channels)
    coords = np.linspace(-1.0, 1.0, resolution)
    v, u = np.meshgrid(coords, coords, indexing="ij")
    wave = freq * np.pi * (np.cos(angle) * u + np.sin(angle) * v)
    return (0.9 * np.sin(wave[..., None] + phases)).astype(np.float32)


def toy_video(index, frames=4, resolution=16, channels=3, square=4):
    """A square translating one pixel per frame to the right, wrapping around."""
    r = rngs.generator(index, rngs.DATA, 104729)
    first = np.full((resolution, resolution, channels), -1.0, dtype=np.float32)
    y, x = r.integers(0, resolution - square + 1, size=2)
    first[y:y + square, x:x + square] = r.uniform(-0.2, 1.0, size=channels)
    return np.stack([np.roll(first, k, axis=1) for k in range(frames)])


def make_dataset(spec: DatasetSpec):
    kind = spec.kind
    if kind == "gaussian":
        return GaussianDataset((spec.resolution, spec.resolution, spec.channels), clip=spec.clip)
    if kind == "checkerboard2d":
        return CheckerboardDataset(spec.resolution)
    if kind == "gradient-images":
        images = np.stack([gradient_image(i, spec.resolution, spec.channels) for i in range(spec.size)])
        labels = np.arange(spec.size) % spec.num_classes if spec.num_classes else None
        return ArrayDataset(images, labels, spec.num_classes, spec.flip)
    if kind == "toy-video":
        clips = np.stack([toy_video(i, spec.frames, spec.resolution, spec.channels) for i in range(spec.size)])
        return ArrayDataset(clips)
    if kind == "cifar10":
        images, labels = load_cifar10(spec.path)
        return ArrayDataset(images, labels, spec.num_classes, spec.flip)
    raise ConfigError(f"unknown dataset kind {kind!r}")


DATASETS = ("gaussian", "checkerboard2d", "gradient-images", "toy-video", "cifar10")

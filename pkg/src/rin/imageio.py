"""Binary PPM (P6) output for samples and attention maps."""
from __future__ import annotations

import os

import numpy as np

from rin.errors import FormatError


def quantize(values):
    """Map [-1, 1] to bytes: round((v + 1) * 127.5), clamped to [0, 255]."""
    v = np.rint((np.asarray(values, dtype=np.float64) + 1.0) * 127.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def ppm_bytes(pixels: np.ndarray) -> bytes:
    """``pixels`` is [h, w, 3] uint8 (or [h, w] grayscale, replicated)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[..., None], 3, axis=-1)
    if pixels.ndim != 3 or pixels.shape[-1] != 3:
        raise FormatError(f"PPM needs [h, w, 3] pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def image_to_rgb(image):
    """[-1, 1] image with 1, 2 or 3 channels -> uint8 RGB (missing channels at 0)."""
    q = quantize(image)
    if q.ndim == 2:
        q = q[..., None]
    c = q.shape[-1]
    if c == 1:
        return np.repeat(q, 3, axis=-1)
    if c == 2:
        return np.concatenate([q, np.zeros(q.shape[:-1] + (1,), np.uint8)], axis=-1)
    return q[..., :3]


def write_ppm(path, image):
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(image_to_rgb(image)))


def write_gray_ppm(path, values):
    """Min-max normalize a 2-D map to [0, 255] and write it as a gray PPM."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    scaled = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(np.rint(scaled * 255).astype(np.uint8)))


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported")
    body = parts[4]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def write_samples(out_dir, samples, prefix="sample"):
    """Images -> one PPM each; videos -> per-frame PPMs plus an index file per clip."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, sample in enumerate(samples):
        if sample.ndim == 4:
            frames = []
            for f, frame in enumerate(sample):
                name = f"{prefix}-{i:04d}-frame{f:03d}.ppm"
                write_ppm(os.path.join(out_dir, name), frame)
                frames.append(name)
            index = os.path.join(out_dir, f"{prefix}-{i:04d}.index")
            with open(index, "w") as fh:
                fh.write("\n".join(frames) + "\n")
            paths.append(index)
        else:
            path = os.path.join(out_dir, f"{prefix}-{i:04d}.ppm")
            write_ppm(path, sample)
            paths.append(path)
    return paths

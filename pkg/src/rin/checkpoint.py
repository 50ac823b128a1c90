"""Binary checkpoint container.

Layout (little-endian)::

    b"RINCKPT1"
    u32 format version
    u32 length + UTF-8 run config text
    u32 length + ASCII config digest
    u64 step
    u32 section count
    per section: u32 name length, name, u32 tensor count, then per tensor
        u32 name length, name, u8 dtype code, u8 rank, u64 dims..., raw values
"""
from __future__ import annotations

import dataclasses
import os
import struct
from collections import OrderedDict

import numpy as np

from rin.errors import FormatError

MAGIC = b"RINCKPT1"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


@dataclasses.dataclass
class Checkpoint:
    config_text: str
    digest: str
    step: int
    sections: "OrderedDict[str, OrderedDict[str, np.ndarray]]"


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_tensor(name, array):
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    if dtype not in DTYPE_CODES:
        raise FormatError(f"cannot store dtype {array.dtype} for {name!r}")
    out = [_pack_str(name), struct.pack("<BB", DTYPE_CODES[dtype], array.ndim)]
    out.append(struct.pack(f"<{array.ndim}Q", *array.shape))
    out.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(out)


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(ckpt.config_text),
             _pack_str(ckpt.digest), struct.pack("<Q", ckpt.step),
             struct.pack("<I", len(ckpt.sections))]
    for section, tensors in ckpt.sections.items():
        parts.append(_pack_str(section))
        parts.append(struct.pack("<I", len(tensors)))
        parts.extend(encode_tensor(k, v) for k, v in tensors.items())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw, source):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated at byte {self.pos} (need {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.source}: bad string at byte {self.pos}") from None

    def tensor(self):
        name = self.string()
        code, rank = self.unpack("<BB")
        if code not in CODE_DTYPES:
            raise FormatError(f"{self.source}: tensor {name!r} has unknown dtype code {code}")
        dims = self.unpack(f"<{rank}Q")
        dtype = CODE_DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        return name, data.copy()


def decode(raw: bytes, source="<bytes>") -> Checkpoint:
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: not a RIN checkpoint (bad magic)")
    r = _Reader(raw, source)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    config_text = r.string()
    digest = r.string()
    (step,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    sections = OrderedDict()
    for _ in range(count):
        section = r.string()
        (n,) = r.unpack("<I")
        tensors = OrderedDict()
        for _ in range(n):
            name, data = r.tensor()
            tensors[name] = data
        sections[section] = tensors
    if r.pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(config_text, digest, step, sections)


def save_checkpoint(path, ckpt: Checkpoint):
    """Write atomically (temp file + rename)."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return decode(raw, str(path))

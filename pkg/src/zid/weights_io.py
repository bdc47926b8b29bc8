"""Bit-exact weight file format shared by training and inference.

Layout (all integers little-endian):
  magic "ZIDW" | version u32 | config blob (u32 length + UTF-8)
  | entry count u32 | entries sorted lexicographically by name.
Each entry: name length u16 + UTF-8 name | rank u8 | dims u32 each
  | raw float32 data, row-major.

Inference loaders skip every entry under the training-only prefixes
(`zipph.`, `aux.`, `opt.`); round-trips reproduce arrays bitwise.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["save_weights", "load_weights", "WeightFormatError",
           "TRAINING_ONLY_PREFIXES"]

MAGIC = b"ZIDW"
VERSION = 1
TRAINING_ONLY_PREFIXES = ("zipph.", "aux.", "opt.")


class WeightFormatError(ValueError):
    """Malformed or truncated weight file."""


def save_weights(path, entries: dict[str, np.ndarray], config_text: str = "") -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    blob = config_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    chunks.append(struct.pack("<I", len(entries)))
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype=np.float32)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise WeightFormatError(f"entry name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def load_weights(path) -> tuple[str, dict[str, np.ndarray]]:
    """Read every entry; callers filter training-only prefixes as needed."""
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise WeightFormatError(f"{path}: bad magic (not a weight file)")
    version = r.u32()
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    config_text = r.take(r.u32()).decode("utf-8")
    count = r.u32()
    entries: dict[str, np.ndarray] = {}
    prev_name = None
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        if prev_name is not None and name <= prev_name:
            raise WeightFormatError(f"{path}: entries not sorted at {name!r}")
        prev_name = name
        rank = r.u8()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).copy()
        entries[name] = arr
    return config_text, entries

"""Self-describing binary parameter container.

Layout (all integers little-endian)::

    b"TRST"  u32 version
    u32 config_len  config text (UTF-8)
    u64 iteration   u64 extractor_seed
    u32 entry_count
    entry*: u32 name_len  name (UTF-8)  u8 dtype  u8 rank  u32 dims[rank]  raw values
    u32 crc32 of every preceding byte

The loader validates every length against the remaining buffer and the
trailing checksum before building anything, so a damaged file never yields
a partial model.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, CorruptionError, FormatError

MAGIC = b"TRST"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
MAX_RANK = 8


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    iteration: int = 0
    extractor_seed: int = 0
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    def model_state(self, prefix: str = "model.") -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = ckpt.config.to_text().encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<QQ", ckpt.iteration, ckpt.extractor_seed)
    entries = list(ckpt.params.items()) + [(f"optim.{k}", v) for k, v in ckpt.optimizer.items()]
    out += struct.pack("<I", len(entries))
    for name, arr in entries:
        arr = np.asarray(arr)
        code = DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        if arr.ndim > MAX_RANK:
            raise FormatError(f"{name}: rank {arr.ndim} exceeds {MAX_RANK}")
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise CorruptionError(f"truncated or inconsistent {what} at offset {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(buf) < 12:
        raise CorruptionError("checkpoint truncated before checksum")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CorruptionError("checkpoint checksum mismatch")
    r = _Reader(buf, len(buf) - 4)
    r.pos = 8
    (cfg_len,) = r.unpack("<I", "config length")
    try:
        config = RunConfig.from_text(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CorruptionError(f"unreadable config block: {exc}") from exc
    iteration, extractor_seed = r.unpack("<QQ", "header")
    (count,) = r.unpack("<I", "entry count")
    params, optimizer, seen = {}, {}, set()
    for _ in range(count):
        (name_len,) = r.unpack("<I", "name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptionError(f"entry name is not UTF-8: {exc}") from exc
        code, rank = r.unpack("<BB", f"{name} header")
        if code not in DTYPES:
            raise CorruptionError(f"{name}: unknown dtype code {code}")
        if rank > MAX_RANK:
            raise CorruptionError(f"{name}: rank {rank} exceeds {MAX_RANK}")
        if name in seen:
            raise CorruptionError(f"duplicate entry {name!r}")
        seen.add(name)
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        nbytes = int(np.prod(dims, dtype=np.int64)) * DTYPES[code].itemsize
        raw = r.take(nbytes, f"{name} values")
        arr = np.frombuffer(raw, dtype=DTYPES[code]).reshape(dims).copy()
        if name.startswith("optim."):
            optimizer[name[len("optim."):]] = arr
        else:
            params[name] = arr
    if r.pos != r.end:
        raise CorruptionError(f"{r.end - r.pos} unexpected trailing bytes")
    return Checkpoint(config, params, iteration, extractor_seed, optimizer)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf)

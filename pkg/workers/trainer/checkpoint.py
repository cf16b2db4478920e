"""
Checkpoint file format (little-endian throughout)

    magic          4 bytes  b"PITR"
    version        u32
    config blob    u32 length + UTF-8 canonical `key=value` text
    epoch          u32      completed epochs
    batch          u32      batches completed in the current epoch
    global step    u64
    optimizer t    u64 generator Adam, u64 discriminator Adam
    records        u32 count, then per record:
                       u32 name length, name bytes (UTF-8),
                       u32 rank, rank x u32 dims,
                       float32 payload
    rng state      u32 length + UTF-8 JSON

Records hold generator parameters and buffers (stable enumeration order),
then both discriminators, then the optimizer moments. Encoding is a pure
function of the contents, so load -> save reproduces the file byte for byte.
"""

import logging
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from services.common.exceptions import ConfigError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"PITR"
VERSION = 1
MAX_RANK = 8


@dataclass
class Checkpoint:
    config_text: str
    epoch: int = 0
    batch: int = 0
    global_step: int = 0
    optimizer_steps: Dict[str, int] = field(default_factory=lambda: {"g": 0, "d": 0})
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    rng_json: str = "{}"

    def subset(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Records under `prefix.` with the prefix stripped"""
        cut = len(prefix) + 1
        return OrderedDict((k[cut:], v) for k, v in self.tensors.items() if k.startswith(prefix + "."))


# ============ Encoding ============

def _blob(text: str) -> bytes:
    data = text.encode("utf-8")
    return struct.pack("<I", len(data)) + data


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        _blob(ckpt.config_text),
        struct.pack("<IIQ", ckpt.epoch, ckpt.batch, ckpt.global_step),
        struct.pack("<QQ", ckpt.optimizer_steps["g"], ckpt.optimizer_steps["d"]),
        struct.pack("<I", len(ckpt.tensors)),
    ]
    for name, array in ckpt.tensors.items():
        array = np.asarray(array)
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)) + name_bytes)
        parts.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    parts.append(_blob(ckpt.rng_json))
    return b"".join(parts)


# ============ Decoding ============

class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated checkpoint while reading {what}: expected {n} bytes, "
                f"got {len(self.data) - self.pos}",
                offset=self.pos,
                expected=n,
                actual=len(self.data) - self.pos,
                path=self.path,
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        start = self.pos
        (length,) = self.unpack("<I", f"{what} length")
        raw = self.take(length, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8", offset=start, path=self.path) from exc


def decode_checkpoint(data: bytes, path: str = "<bytes>") -> Checkpoint:
    """
    Parse checkpoint bytes

    Raises:
        FormatError: Bad magic or version, truncation, or trailing bytes; the
            error carries the byte offset
    """
    reader = _Reader(data, path)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}", offset=0, path=path)
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4, path=path)

    ckpt = Checkpoint(config_text=reader.text("config blob"))
    ckpt.epoch, ckpt.batch, ckpt.global_step = reader.unpack("<IIQ", "counters")
    t_g, t_d = reader.unpack("<QQ", "optimizer steps")
    ckpt.optimizer_steps = {"g": t_g, "d": t_d}

    (count,) = reader.unpack("<I", "record count")
    for _ in range(count):
        record_at = reader.pos
        name = reader.text("record name")
        (rank,) = reader.unpack("<I", f"rank of {name}")
        if rank > MAX_RANK:
            raise FormatError(f"record {name} has implausible rank {rank}", offset=record_at, path=path)
        dims = reader.unpack(f"<{rank}I", f"dims of {name}")
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64))
        payload = reader.take(n_bytes, f"payload of {name}")
        if name in ckpt.tensors:
            raise FormatError(f"duplicate record {name}", offset=record_at, path=path)
        ckpt.tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)

    ckpt.rng_json = reader.text("rng state")
    if reader.pos != len(data):
        raise FormatError(
            f"trailing bytes after checkpoint: {len(data) - reader.pos}",
            offset=reader.pos,
            path=path,
        )
    return ckpt


# ============ Files ============

def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.info(f"Saved checkpoint {path} (epoch {ckpt.epoch}, step {ckpt.global_step}, {len(data)} bytes)")


def load_checkpoint(path: Union[str, Path], expected_config: Optional[str] = None) -> Checkpoint:
    """
    Read a checkpoint, optionally requiring a matching config blob

    Raises:
        FormatError: Malformed file
        ConfigError: Config blob differs from `expected_config`
    """
    path = Path(path)
    ckpt = decode_checkpoint(path.read_bytes(), str(path))
    if expected_config is not None and ckpt.config_text != expected_config:
        saved = dict(_pairs(ckpt.config_text))
        wanted = dict(_pairs(expected_config))
        diff = sorted(k for k in set(saved) | set(wanted) if saved.get(k) != wanted.get(k))
        raise ConfigError(
            f"checkpoint {path} was written for a different config (differs in {diff})",
            field=diff[0] if diff else None,
        )
    return ckpt


def _pairs(text: str):
    for line in text.splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            yield key, value

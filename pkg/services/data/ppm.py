"""
Binary PPM (P6, maxval 255) encode/decode

Writes always use the canonical header `P6\\n<w> <h>\\n255\\n`. Reads accept
any whitespace between header fields (no comments) followed by exactly one
whitespace byte before the payload.
"""

import logging
import os
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from services.common.exceptions import DimensionError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"P6"
WHITESPACE = b" \t\r\n"
DIGITS = b"0123456789"


def ppm_encode(img: np.ndarray) -> bytes:
    """Encode an H x W x 3 uint8 array"""
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError("PPM images must be H x W x 3", expected=3, actual=img.shape)
    if img.dtype != np.uint8:
        raise DimensionError("PPM images must be uint8", expected="uint8", actual=str(img.dtype))
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


class _HeaderReader:
    def __init__(self, data: bytes, path: str):
        self.data, self.pos, self.path = data, 0, path

    def fail(self, message: str) -> FormatError:
        return FormatError(message, offset=self.pos, path=self.path)

    def skip_whitespace(self, required: bool = True) -> None:
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos] in WHITESPACE:
            self.pos += 1
        if required and self.pos == start:
            raise self.fail("expected whitespace in PPM header")

    def integer(self, what: str) -> int:
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos] in DIGITS:
            self.pos += 1
        if self.pos == start:
            raise self.fail(f"expected {what} in PPM header")
        return int(self.data[start:self.pos])


def ppm_decode(data: bytes, path: str = "<bytes>") -> np.ndarray:
    """
    Decode P6 bytes into an H x W x 3 uint8 array

    Raises:
        FormatError: Bad magic, malformed header, maxval other than 255 or a
            short payload (with expected vs actual byte counts)
    """
    reader = _HeaderReader(data, path)
    if data[:2] != MAGIC:
        raise reader.fail(f"bad PPM magic {data[:2]!r}, expected b'P6'")
    reader.pos = 2
    reader.skip_whitespace()
    width = reader.integer("width")
    reader.skip_whitespace()
    height = reader.integer("height")
    reader.skip_whitespace()
    maxval_at = reader.pos
    maxval = reader.integer("maxval")
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}", offset=maxval_at, path=path)
    if reader.pos >= len(data) or data[reader.pos] not in WHITESPACE:
        raise reader.fail("expected a single whitespace byte after maxval")
    reader.pos += 1
    if width < 1 or height < 1:
        raise FormatError(f"invalid PPM size {width}x{height}", offset=2, path=path)

    expected = width * height * 3
    payload = data[reader.pos:]
    if len(payload) < expected:
        raise FormatError(
            f"truncated PPM payload: expected {expected} bytes, got {len(payload)}",
            offset=reader.pos + len(payload),
            expected=expected,
            actual=len(payload),
            path=path,
        )
    if len(payload) > expected:
        raise FormatError(
            f"trailing bytes after PPM payload: expected {expected} bytes, got {len(payload)}",
            offset=reader.pos + expected,
            expected=expected,
            actual=len(payload),
            path=path,
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def ppm_write(path: Union[str, Path], img: np.ndarray) -> None:
    """Write atomically: temp file in the target directory, then rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = ppm_encode(img)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ppm_read(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    return ppm_decode(path.read_bytes(), str(path))

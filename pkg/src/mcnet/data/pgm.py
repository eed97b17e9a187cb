"""Binary PGM (P5) reading and writing.

Only the binary greyscale variant is supported.  16-bit samples are
big-endian, as the Netpbm format requires.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from mcnet.errors import FormatError, UnsupportedFormatError

_WHITESPACE = b" \t\n\r\v\f"


def _read_token(data: bytes, pos: int):
    """Return (token, position after token), skipping whitespace and comments."""
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch in (b"#",):
            end = data.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment in header", pos)
            pos = end + 1
        elif ch and ch in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos:pos + 1] not in _WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated header", start)
    return data[start:pos], pos


def _read_int(data: bytes, pos: int, what: str):
    tok, end = _read_token(data, pos)
    if not tok.isdigit():
        raise FormatError(f"invalid {what} {tok!r} in header", end - len(tok))
    return int(tok), end


def parse_pgm(data: bytes):
    """Decode P5 bytes into ``(pixels, maxval)``; pixels are uint8 or uint16."""
    if len(data) < 2:
        raise FormatError("file too short for a PGM header", 0)
    magic = data[:2]
    if magic in (b"P2", b"P1", b"P3", b"P4", b"P6"):
        raise UnsupportedFormatError(f"unsupported Netpbm variant {magic.decode()}; only P5 is read", 0)
    if magic != b"P5":
        raise FormatError(f"bad magic {magic!r}", 0)
    width, pos = _read_int(data, 2, "width")
    height, pos = _read_int(data, pos, "height")
    maxval, pos = _read_int(data, pos, "maxval")
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}", pos)
    if not 0 < maxval <= 65535:
        raise FormatError(f"maxval {maxval} outside 1..65535", pos)
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(data) - pos}", len(data)
        )
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    pixels = pixels.reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8)
    if pixels.max(initial=0) > maxval:
        raise FormatError(f"pixel value exceeds maxval {maxval}", pos)
    return pixels, maxval


def load_pgm(path):
    """Read a P5 file; returns ``(pixels, maxval)``."""
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(image, maxval=None) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {img.shape}")
    if img.size and (img.min() < 0 or not np.issubdtype(img.dtype, np.integer)):
        raise ValueError("PGM pixels must be non-negative integers")
    if maxval is None:
        maxval = 255 if img.max(initial=0) <= 255 else 65535
    if not 0 < maxval <= 65535 or img.max(initial=0) > maxval:
        raise ValueError(f"pixels do not fit maxval {maxval}")
    h, w = img.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return header + np.ascontiguousarray(img, dtype=dtype).tobytes()


def save_pgm(image, path, maxval=None) -> Path:
    path = Path(path)
    path.write_bytes(encode_pgm(image, maxval))
    return path

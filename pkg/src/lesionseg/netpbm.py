"""Minimal 8-bit netpbm codec: P6 colour, P5 binary grey, P2 ASCII grey."""

from __future__ import annotations

import os
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]


class NetpbmError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _header(buf: bytes, count: int) -> tuple:
    """Parse ``count`` integer header fields after the magic.

    Returns the fields and the offset of the first payload byte.
    """
    pos, fields = 2, []
    while len(fields) < count:
        if pos >= len(buf):
            raise NetpbmError("truncated header", pos)
        ch = buf[pos:pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise NetpbmError(f"unexpected header byte {ch!r}", pos)
    if not buf[pos:pos + 1].isspace():
        raise NetpbmError("missing whitespace after header", pos)
    return fields, pos + 1


def decode(buf: bytes) -> np.ndarray:
    """Decode to uint8 array: (H, W, 3) for P6, (H, W) for P5/P2."""
    magic = buf[:2]
    if magic not in (b"P6", b"P5", b"P2"):
        raise NetpbmError(f"bad magic {magic!r}", 0)
    (width, height, maxval), start = _header(buf, 3)
    if width < 1 or height < 1:
        raise NetpbmError(f"invalid dimensions {width}x{height}", start)
    if maxval != 255:
        raise NetpbmError(f"maxval {maxval} unsupported, expected 255", start)
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    if magic == b"P2":
        tokens = buf[start:].split()
        if len(tokens) < n:
            raise NetpbmError(f"expected {n} samples, found {len(tokens)}", len(buf))
        values = np.array([int(t) for t in tokens[:n]])
        if values.max(initial=0) > 255:
            raise NetpbmError("sample exceeds maxval", start)
        data = values.astype(np.uint8)
    else:
        if len(buf) - start < n:
            raise NetpbmError(f"payload has {len(buf) - start} bytes, expected {n}", len(buf))
        data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=start)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape).copy()


def read_header(path: PathLike) -> tuple:
    """(magic, width, height) without decoding the payload."""
    with open(path, "rb") as fh:
        head = fh.read(512)
    if head[:2] not in (b"P6", b"P5", b"P2"):
        raise NetpbmError(f"bad magic {head[:2]!r}", 0)
    (width, height, _), _ = _header(head, 3)
    return head[:2].decode(), width, height


def load_image(path: PathLike) -> np.ndarray:
    """P6 file as float32 (3, H, W) in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P6":
        raise NetpbmError(f"expected P6 image, got {buf[:2]!r}", 0)
    return (decode(buf).transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


def load_mask(path: PathLike) -> np.ndarray:
    """P5/P2 file as float32 (H, W) greyscale in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] not in (b"P5", b"P2"):
        raise NetpbmError(f"expected P5/P2 mask, got {buf[:2]!r}", 0)
    return (decode(buf) / np.float32(255)).astype(np.float32)


def quantize(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    _, h, w = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + quantize(image).transpose(1, 2, 0).tobytes()


def encode_pgm(gray: np.ndarray, ascii: bool = False) -> bytes:
    h, w = gray.shape
    q = quantize(gray)
    if ascii:
        rows = "\n".join(" ".join(str(v) for v in row) for row in q)
        return b"P2\n%d %d\n255\n" % (w, h) + rows.encode() + b"\n"
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def save_image(path: PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def save_mask(path: PathLike, gray: np.ndarray, ascii: bool = False) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(gray, ascii))

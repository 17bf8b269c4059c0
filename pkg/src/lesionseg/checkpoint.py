"""Named-tensor checkpoint archive.

Layout (all integers u32 little-endian)::

    b"UPDC" | version | config digest (32 bytes) | tensor count
    | per tensor: name length, name (utf-8), ndim, dims..., float32 LE payload
    | CRC32 of every byte after the magic

Training metadata travels as ordinary tensors under the ``meta.`` prefix.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

MAGIC = b"UPDC"
VERSION = 1
DIGEST_LEN = 32

PHASE_CODES = {"init": 0, "scanet": 1, "updcnn": 2, "joint": 3}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict  # name -> float32 ndarray, model parameters only
    phase: str = "init"
    epoch: int = 0
    seed: int = 0
    trained: tuple = (False, False)  # (scanet, updcnn) finished a pretraining or joint phase
    size: int = 320
    width_scale: Fraction = Fraction(1)
    config_digest: bytes = bytes(DIGEST_LEN)
    version: int = VERSION

    def tensors(self) -> dict:
        if not 0 <= self.seed < 2 ** 32:
            raise CheckpointError("seed must fit in an unsigned 32-bit integer")
        ws = Fraction(self.width_scale)
        meta = {
            "meta.phase": [PHASE_CODES[self.phase]],
            "meta.epoch": [self.epoch],
            "meta.seed": [self.seed >> 16, self.seed & 0xFFFF],
            "meta.trained": [int(t) for t in self.trained],
            "meta.size": [self.size],
            "meta.width_scale": [ws.numerator, ws.denominator],
        }
        out = {k: np.asarray(v, dtype=np.float32) for k, v in meta.items()}
        for k in sorted(self.params):
            out[k] = np.asarray(self.params[k], dtype=np.float32)
        return out


def encode(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_digest) != DIGEST_LEN:
        raise CheckpointError("config digest must be 32 bytes")
    body = io.BytesIO()
    tensors = ckpt.tensors()
    body.write(struct.pack("<I", ckpt.version))
    body.write(ckpt.config_digest)
    body.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        body.write(struct.pack("<I", len(raw)))
        body.write(raw)
        body.write(struct.pack("<I", arr.ndim))
        body.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.write(arr.astype("<f4").tobytes())
    payload = body.getvalue()
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated file while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise CheckpointError("truncated file while reading crc")
    payload, (crc,) = buf[4:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(payload)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    digest = r.take(DIGEST_LEN, "config digest")
    count = r.u32("tensor count")
    tensors = {}
    for i in range(count):
        name = r.take(r.u32(f"name length of tensor {i}"), f"name of tensor {i}").decode("utf-8")
        ndim = r.u32(f"ndim of {name}")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"dims of {name}"))
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(r.take(4 * n, f"payload of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float32)
    if r.pos != len(payload):
        raise CheckpointError(f"{len(payload) - r.pos} trailing bytes before crc")
    if zlib.crc32(payload) != crc:
        raise CheckpointError("crc mismatch")

    def meta(key):
        if key not in tensors:
            raise CheckpointError(f"missing metadata tensor {key}")
        return [int(v) for v in tensors.pop(key)]

    codes = {v: k for k, v in PHASE_CODES.items()}
    phase = codes.get(meta("meta.phase")[0])
    if phase is None:
        raise CheckpointError("unknown phase code")
    hi, lo = meta("meta.seed")
    num, den = meta("meta.width_scale")
    return Checkpoint(
        params=tensors,
        phase=phase,
        epoch=meta("meta.epoch")[0],
        seed=(hi << 16) | lo,
        trained=tuple(bool(v) for v in meta("meta.trained")),
        size=meta("meta.size")[0],
        width_scale=Fraction(num, den),
        config_digest=digest,
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())

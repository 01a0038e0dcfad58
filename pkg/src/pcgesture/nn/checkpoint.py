"""`.ckpt` serialisation of parameter blocks and Adam state.

Layout (little-endian)::

    b"VGN1"
    u32 len, utf-8 model-spec digest
    u32 count, then parameter blocks
    u32 count, then Adam state blocks (moments plus a rank-0 int64 step)
    32-byte SHA-256 of everything above

A block is ``u32 name_len, name, u8 dtype, u32 rank, u32 extents[rank], raw``.
"""
from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

from .params import LayerParams

MAGIC = b"VGN1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


def _write_block(out: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    out.write(struct.pack("<I", len(raw)) + raw)
    out.write(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(arr.astype(_DTYPES[_CODES[arr.dtype]], copy=False).tobytes(order="C"))


def save_checkpoint(layers: dict[str, LayerParams], digest: str) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    d = digest.encode("utf-8")
    out.write(struct.pack("<I", len(d)) + d)
    out.write(struct.pack("<I", 2 * len(layers)))
    for lname, p in layers.items():
        for key, arr in p.arrays().items():
            _write_block(out, f"{lname}.{key}", arr)
    out.write(struct.pack("<I", 5 * len(layers)))
    for lname, p in layers.items():
        for key, arr in p.adam_arrays().items():
            _write_block(out, f"{lname}.{key}", arr)
        _write_block(out, f"{lname}.step", np.array(p.step, dtype=np.int64))
    body = out.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def block(self) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<I")
        name = self.take(nlen).decode("utf-8")
        code, rank = self.unpack("<BI")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} in block {name!r}")
        shape = self.unpack(f"<{rank}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, arr.astype(dt.newbyteorder("="))


def load_checkpoint(data: bytes) -> tuple[str, dict[str, LayerParams]]:
    """Returns ``(digest, layers)``; raises :class:`CheckpointError` on any damage."""
    if len(data) < len(MAGIC) + 32 or data[:4] != MAGIC:
        raise CheckpointError("not a VGN1 checkpoint")
    body, check = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != check:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
    r = _Reader(body)
    r.take(4)
    (dlen,) = r.unpack("<I")
    digest = r.take(dlen).decode("utf-8")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(2):
        (count,) = r.unpack("<I")
        for _ in range(count):
            name, arr = r.block()
            blocks[name] = arr
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint blocks")
    layers: dict[str, LayerParams] = {}
    names = [n[: -len(".weights")] for n in blocks if n.endswith(".weights")]
    try:
        for lname in names:
            layers[lname] = LayerParams(
                blocks[f"{lname}.weights"], blocks[f"{lname}.biases"],
                blocks[f"{lname}.weights.m"], blocks[f"{lname}.weights.v"],
                blocks[f"{lname}.biases.m"], blocks[f"{lname}.biases.v"],
                int(blocks[f"{lname}.step"]),
            )
    except KeyError as exc:
        raise CheckpointError(f"missing block {exc.args[0]!r}") from None
    return digest, layers

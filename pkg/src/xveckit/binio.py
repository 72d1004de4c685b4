"""Little-endian binary framing shared by checkpoint-style files.

Every tensor is stored as u32 rank, u32 dims, then float32 payload.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import TruncatedFileError

__all__ = ["Reader", "write_u32", "write_blob", "write_array", "read_array"]


class Reader:
    """Cursor over raw bytes that fails loudly on short reads."""

    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: unexpected end of file")
        chunk = self.raw[self.off: self.off + n]
        self.off += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def expect_exhausted(self) -> None:
        if self.off != len(self.raw):
            raise TruncatedFileError(f"{self.path}: {len(self.raw) - self.off} trailing bytes")


def write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


def write_blob(fh, blob: bytes) -> None:
    write_u32(fh, len(blob))
    fh.write(blob)


def write_array(fh, arr: np.ndarray) -> None:
    write_u32(fh, arr.ndim)
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_array(reader: Reader) -> np.ndarray:
    rank = reader.u32()
    dims = tuple(struct.unpack(f"<{rank}I", reader.take(4 * rank))) if rank else ()
    n_vals = 1
    for d in dims:
        n_vals *= d
    return np.frombuffer(reader.take(4 * n_vals), dtype="<f4").reshape(dims)

"""TSCX weights container: magic ``TSCX``, u32 version, tensor directory
(u16 name length + utf-8 name, u8 dtype code (0 = f32), u8 rank, u32 dims,
u64 payload offset, u32 crc32), u64 payload length, little-endian f32
payload.  Mirrors the format the inference side reads; kept standalone so
the trainer has no import dependency on it."""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"TSCX"
VERSION = 1
DTYPE_F32 = 0


class FormatError(ValueError):
    pass


def save_tensors(tensors: list[tuple[str, np.ndarray]], path) -> None:
    payload = bytearray()
    directory = bytearray()
    for name, t in tensors:
        t = np.asarray(t)
        data = np.ascontiguousarray(t, dtype="<f4").tobytes()
        off = len(payload)
        payload += data
        nb = name.encode()
        directory += struct.pack("<H", len(nb)) + nb
        directory += struct.pack("<BB", DTYPE_F32, t.ndim)
        directory += struct.pack(f"<{max(t.ndim, 0)}I", *t.shape)
        directory += struct.pack("<QI", off, zlib.crc32(data))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        fh.write(directory)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError("bad magic; not a TSCX weights file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    off = 12
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off); off += 2
        name = blob[off:off + nlen].decode(); off += nlen
        dtype, rank = struct.unpack_from("<BB", blob, off); off += 2
        dims = struct.unpack_from(f"<{rank}I", blob, off); off += 4 * rank
        toff, crc = struct.unpack_from("<QI", blob, off); off += 12
        if dtype != DTYPE_F32:
            raise FormatError(f"unsupported dtype code {dtype}")
        entries.append((name, dims, toff, crc))
    (plen,) = struct.unpack_from("<Q", blob, off); off += 8
    payload = blob[off:off + plen]
    out = {}
    for name, dims, toff, crc in entries:
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if dims else 4
        data = payload[toff:toff + nbytes]
        if zlib.crc32(data) != crc:
            raise FormatError(f"checksum failure on tensor {name!r}")
        out[name] = np.frombuffer(data, "<f4").astype(float).reshape(dims)
    return out

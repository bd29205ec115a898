"""Self-describing binary container (checkpoints, generated datasets).

Layout, all integers little-endian::

    b"ESLSNN1"  u32 n_sections
    per section:  u32 name_len  name(utf-8)  u8 kind  u64 payload_len  payload

Section kinds:

* ``JSON``  - utf-8 JSON, keys sorted, compact separators
* ``ARRAY`` - u8 dtype_len, numpy dtype string, u8 ndim, ndim x u64 dims,
  raw C-order little-endian data
* ``MASK``  - u32 id_len, layer id, u64 n_pre, u64 n_post, u64 count, then
  ``count`` pairs of u32 ``(i, j)`` in lexicographic order

Serialisation is canonical, so ``dumps(loads(b)) == b`` for any container
this module wrote.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .topology import SparseMask

MAGIC = b"ESLSNN1"
JSON, ARRAY, MASK = 1, 2, 3


class ContainerError(ValueError):
    """Raised for corrupt or unreadable container files."""


@dataclass
class NamedMask:
    layer_id: str
    mask: SparseMask

    def __eq__(self, other):
        return (
            isinstance(other, NamedMask)
            and self.layer_id == other.layer_id
            and self.mask == other.mask
        )


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _array_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    dt = arr.dtype.str.encode("ascii")
    head = struct.pack("<B", len(dt)) + dt + struct.pack("<B", arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + arr.tobytes(order="C")


def _mask_bytes(rec: NamedMask) -> bytes:
    lid = rec.layer_id.encode("utf-8")
    pairs = rec.mask.pairs().astype("<u4")
    head = struct.pack("<I", len(lid)) + lid
    head += struct.pack("<QQQ", rec.mask.n_pre, rec.mask.n_post, pairs.shape[0])
    return head + pairs.tobytes(order="C")


def dumps(sections) -> bytes:
    """Serialise ``sections`` (a mapping or list of ``(name, value)``)."""
    items = list(sections.items()) if isinstance(sections, dict) else list(sections)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", len(items)))
    for name, value in items:
        if isinstance(value, NamedMask):
            kind, payload = MASK, _mask_bytes(value)
        elif isinstance(value, np.ndarray):
            kind, payload = ARRAY, _array_bytes(value)
        else:
            kind, payload = JSON, _json_bytes(value)
        nb = name.encode("utf-8")
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<BQ", kind, len(payload)))
        out.write(payload)
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise ContainerError(
                f"truncated container: need {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_array(payload: bytes) -> np.ndarray:
    r = _Reader(payload)
    (dlen,) = r.unpack("<B")
    dtype = np.dtype(bytes(r.take(dlen)).decode("ascii"))
    (ndim,) = r.unpack("<B")
    shape = tuple(r.unpack("<Q")[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64))
    data = r.take(count * dtype.itemsize)
    return np.frombuffer(bytes(data), dtype=dtype).reshape(shape).copy()


def _parse_mask(payload: bytes) -> NamedMask:
    r = _Reader(payload)
    (lid_len,) = r.unpack("<I")
    lid = bytes(r.take(lid_len)).decode("utf-8")
    n_pre, n_post, count = r.unpack("<QQQ")
    pairs = np.frombuffer(bytes(r.take(count * 8)), dtype="<u4").reshape(-1, 2)
    return NamedMask(lid, SparseMask.from_pairs(n_pre, n_post, pairs.astype(np.int64)))


def loads(buf: bytes) -> dict:
    if not buf.startswith(MAGIC):
        raise ContainerError("not an ESLSNN1 container (bad magic)")
    r = _Reader(buf)
    r.take(len(MAGIC))
    (n,) = r.unpack("<I")
    out = {}
    for _ in range(n):
        (nlen,) = r.unpack("<I")
        name = bytes(r.take(nlen)).decode("utf-8")
        kind, plen = r.unpack("<BQ")
        payload = bytes(r.take(plen))
        try:
            if kind == JSON:
                out[name] = json.loads(payload.decode("utf-8"))
            elif kind == ARRAY:
                out[name] = _parse_array(payload)
            elif kind == MASK:
                out[name] = _parse_mask(payload)
            else:
                raise ContainerError(f"unknown section kind {kind} in {name!r}")
        except ContainerError:
            raise
        except Exception as exc:
            raise ContainerError(f"corrupt section {name!r}: {exc}") from exc
    if r.pos != len(buf):
        raise ContainerError(f"{len(buf) - r.pos} trailing bytes after last section")
    return out


def save(path, sections) -> bytes:
    data = dumps(sections)
    Path(path).write_bytes(data)
    return data


def load(path) -> dict:
    return loads(Path(path).read_bytes())

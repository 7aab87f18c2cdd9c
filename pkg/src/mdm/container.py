"""Binary tensor container used by all persistence paths.

Layout, all integers little-endian:

    magic   4 bytes  b"MDMT"
    version u32      currently 1
    count   u32      number of tensors
    then per tensor:
        name_len  u32
        name      UTF-8 bytes
        precision u8   0 = float32, 1 = float64
        rank      u32
        dims      u64 * rank
        payload   little-endian raw element bytes, C order

Round trips are byte-exact: payloads are written from, and read back into,
arrays of the stated dtype with no numeric conversion.
"""

from __future__ import annotations

import struct
from typing import Dict

import numpy as np

MAGIC = b"MDMT"
VERSION = 1

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class ContainerFormatError(RuntimeError):
    """The byte stream does not conform to the container layout."""


def serialize_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    """Encode named tensors; insertion order of the dict is preserved."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TO_CODE:
            raise ContainerFormatError(
                f"serialize_tensors: tensor '{name}' has unsupported dtype {arr.dtype}; "
                f"only float32/float64 are stored")
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<B", _DTYPE_TO_CODE[arr.dtype])
        blob += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<Q", d)
        blob += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return bytes(blob)


def write_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_tensors(tensors))


def read_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_tensors(data)


def parse_tensors(data: bytes) -> Dict[str, np.ndarray]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ContainerFormatError(
            f"bad magic bytes {data[:4]!r}, expected {MAGIC!r}")
    off = 4

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise ContainerFormatError(
                f"truncated container: {what} needs {n} bytes at offset {off}, "
                f"only {len(data) - off} remain")
        chunk = data[off:off + n]
        off += n
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: Dict[str, np.ndarray] = {}
    for k in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"tensor {k} name length"))
        name = take(name_len, f"tensor {k} name").decode("utf-8")
        (code,) = struct.unpack("<B", take(1, f"'{name}' precision code"))
        if code not in _CODE_TO_DTYPE:
            raise ContainerFormatError(f"tensor '{name}': unknown precision code {code}")
        dtype = _CODE_TO_DTYPE[code]
        (rank,) = struct.unpack("<I", take(4, f"'{name}' rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"'{name}' dims")) if rank else ()
        n_elem = 1
        for d in dims:
            n_elem *= d
        payload = take(n_elem * dtype.itemsize, f"'{name}' payload ({n_elem} elements)")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=False)
    if off != len(data):
        raise ContainerFormatError(
            f"trailing garbage: {len(data) - off} byte(s) after the last tensor")
    return out

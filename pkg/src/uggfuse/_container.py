"""Shared on-disk container: magic, version, key=value block, named arrays.

Both binary artifact formats (feature banks and checkpoints) are instances of
this layout with their own magic and payload dtype. Everything is explicit
little-endian, names and keys are sorted on write, and nothing timestamped is
embedded, so identical inputs produce identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import (
    BadMagicError,
    ContractViolationError,
    TruncatedPayloadError,
    VersionMismatchError,
)

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _check_text(text: str, what: str) -> str:
    if "=" in text and what == "key":
        raise ContractViolationError(f"container {what} may not contain '=': {text!r}")
    if "\n" in text:
        raise ContractViolationError(f"container {what} may not contain newlines")
    return text


def encode_config(config: dict) -> bytes:
    lines = []
    for key in sorted(config):
        _check_text(str(key), "key")
        _check_text(str(config[key]), "value")
        lines.append(f"{key}={config[key]}\n")
    return "".join(lines).encode("utf-8")


def decode_config(blob: bytes) -> dict:
    config = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContractViolationError(f"malformed config line: {line!r}")
        config[key] = value
    return config


def write_container(path, magic: bytes, version: int, config: dict,
                    arrays: dict, dtype) -> None:
    dtype = np.dtype(dtype).newbyteorder("<")
    blob = encode_config(config)
    chunks = [magic, _U32.pack(version), _U64.pack(len(blob)), blob,
              _U64.pack(len(arrays))]
    for name in sorted(arrays):
        # tobytes() emits C order regardless of layout; 0-d arrays stay 0-d
        arr = np.asarray(arrays[name], dtype=dtype)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ContractViolationError(f"array name too long: {name[:40]}...")
        chunks.append(_U16.pack(len(nb)))
        chunks.append(nb)
        chunks.append(_U8.pack(arr.ndim))
        for dim in arr.shape:
            chunks.append(_U64.pack(dim))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise TruncatedPayloadError(
                f"payload ends at byte {len(self.blob)}, needed {self.off + n}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return _U8.unpack(self.take(1))[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def read_container(path, magic: bytes, version: int, dtype):
    """Returns (config dict, arrays dict). Arrays come back in native float64."""
    dtype = np.dtype(dtype).newbyteorder("<")
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    got = rd.take(len(magic))
    if got != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {got!r}")
    ver = rd.u32()
    if ver != version:
        raise VersionMismatchError(f"format version {ver}, reader supports {version}")
    config = decode_config(rd.take(rd.u64()))
    arrays = {}
    for _ in range(rd.u64()):
        name = rd.take(rd.u16()).decode("utf-8")
        shape = tuple(rd.u64() for _ in range(rd.u8()))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = rd.take(count * dtype.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)
    if rd.off != len(rd.blob):
        raise ContractViolationError(
            f"{len(rd.blob) - rd.off} trailing bytes after last array")
    return config, arrays

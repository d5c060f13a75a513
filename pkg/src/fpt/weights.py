"""Binary weight container with a bit-exact round trip.

Layout (all integers little-endian):
  magic   4 bytes  b"FPTW"
  version u16      (currently 1)
  endian  u8       0 = little (the only supported value)
  count   u32      number of entries
  table   per entry: name_len u16, name utf-8, dtype u8 (0 = f64),
          ndim u8, dims u32 each, offset u64 (into the payload)
  payload raw little-endian float64 values, entries non-overlapping
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigError

MAGIC = b"FPTW"
VERSION = 1


def save_weights(path, named):
    """Serialize a {name: ndarray} mapping; iteration order is preserved."""
    names = list(named)
    if len(set(names)) != len(names):
        raise ConfigError("duplicate weight names")
    table = bytearray()
    payload = bytearray()
    for name in names:
        # note: tobytes() always emits C order, and np.ascontiguousarray
        # would promote 0-d arrays to 1-d and lose the scalar shape
        arr = np.asarray(named[name], dtype=np.float64)
        nb = name.encode("utf-8")
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<BB", 0, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", len(payload))
        payload += arr.astype("<f8").tobytes()
    header = MAGIC + struct.pack("<HBI", VERSION, 0, len(names))
    with open(path, "wb") as fh:
        fh.write(header + bytes(table) + bytes(payload))


def load_weights(path):
    """Read a container back into a {name: ndarray} mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ConfigError(f"bad magic at offset 0: {blob[:4]!r}")
    version, endian, count = struct.unpack_from("<HBI", blob, 4)
    if version != VERSION:
        raise ConfigError(f"unsupported container version {version}")
    if endian != 0:
        raise ConfigError("only little-endian containers are supported")
    pos = 11
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        dtype, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if dtype != 0:
            raise ConfigError(f"unknown dtype code {dtype} at offset {pos - 2}")
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        entries.append((name, shape, offset))
    payload = blob[pos:]
    out = {}
    spans = []
    for name, shape, offset in entries:
        if name in out:
            raise ConfigError(f"duplicate weight name {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if offset + nbytes > len(payload):
            raise ConfigError(f"entry {name!r} overruns payload at offset {offset}")
        spans.append((offset, offset + nbytes, name))
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f8")
        out[name] = arr.reshape(shape).astype(np.float64)
    spans.sort()
    for (s0, e0, n0), (s1, _e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ConfigError(f"overlapping entries {n0!r} and {n1!r}")
    return out


def fnv1a64(data):
    """64-bit FNV-1a hash of a byte string."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def tensor_checksum(arr):
    """FNV-1a over the canonical little-endian byte stream of a tensor."""
    return f"{fnv1a64(np.ascontiguousarray(arr, dtype='<f8').tobytes()):016x}"

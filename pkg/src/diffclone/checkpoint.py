"""The "DCK1" binary container used for every saved network.

Layout (all integers little-endian)::

    b"DCK1"
    u64 config length, then UTF-8 ``key=value`` lines
    u32 array count
    per array: u16 name length, name, u8 ndim, u64 dims..., float64 data
    u64 checksum (blake2b-64 of everything between magic and checksum)
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError

MAGIC = b"DCK1"


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def encode_config(config: dict[str, object]) -> str:
    lines = []
    for key, value in config.items():
        text = str(value)
        if "=" in key or "\n" in key or "\n" in text:
            raise FormatError(f"config entry {key!r} cannot be stored as key=value text")
        lines.append(f"{key}={text}")
    return "".join(line + "\n" for line in lines)


def decode_config(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptionError(f"config line without '=': {line!r}")
        out[key] = value
    return out


def dumps(config: dict[str, object], arrays: dict[str, np.ndarray]) -> bytes:
    parts = []
    text = encode_config(config).encode("utf-8")
    parts.append(struct.pack("<Q", len(text)))
    parts.append(text)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is C order; ascontiguousarray would promote 0-d
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + _digest(payload)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError("checkpoint is truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(blob: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise FormatError("not a DCK1 checkpoint (bad magic)")
    if len(blob) < 12:
        raise CorruptionError("checkpoint is truncated")
    payload, checksum = blob[4:-8], blob[-8:]
    if _digest(payload) != checksum:
        raise CorruptionError("checkpoint checksum mismatch")
    r = _Reader(payload)
    (n_text,) = r.unpack("<Q")
    try:
        config = decode_config(r.take(n_text).decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CorruptionError("config block is not UTF-8") from exc
    (n_arrays,) = r.unpack("<I")
    arrays = {}
    for _ in range(n_arrays):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(payload):
        raise CorruptionError("trailing bytes after the last array")
    return config, arrays


def save(path: str | Path, config: dict[str, object], arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(config, arrays))


def load(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())

"""Binary tensor container shared by model checkpoints and galleries.

Layout (all integers little-endian):

    b"PEDE" | u32 version | u32 meta_len | meta (UTF-8 "key=value" lines)
    | u32 n_tensors | n_tensors x record

    record = u32 name_len | name (UTF-8) | u8 dtype code | u32 rank
             | rank x u32 extent | raw little-endian values
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from pedenet.errors import IncompatibleCheckpointError

MAGIC = b"PEDE"
FORMAT_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


def encode_meta(meta: dict[str, object]) -> bytes:
    lines = []
    for key, value in meta.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"metadata entry {key!r} cannot be encoded")
        lines.append(f"{key}={text}")
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def decode_meta(blob: bytes) -> dict[str, str]:
    meta: dict[str, str] = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise IncompatibleCheckpointError(f"malformed metadata line {line!r}")
        meta[key] = value
    return meta


def write_container(path, meta: dict[str, object], tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    blob = encode_meta(meta)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODE_OF:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BI", _CODE_OF[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IncompatibleCheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise IncompatibleCheckpointError(f"{path}: not a PEDE container")
    version, meta_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        meta = decode_meta(r.take(meta_len))
    except UnicodeDecodeError as exc:
        raise IncompatibleCheckpointError(f"{path}: undecodable metadata") from exc
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8", errors="replace")
        code, rank = r.unpack("<BI")
        if code not in DTYPE_CODES:
            raise IncompatibleCheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        dt = DTYPE_CODES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n_bytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.data):
        raise IncompatibleCheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return meta, tensors

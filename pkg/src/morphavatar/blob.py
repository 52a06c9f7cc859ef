"""Binary tensor blobs and the container file format.

A blob is magic ``MAVT``, version u16, dtype code u8, rank u8, dims as u64
little-endian, then the C-contiguous little-endian payload. A container is
magic ``MAVC``, version u16, a u32-length JSON header (metadata plus the
ordered entry names), followed by one blob per entry. Both formats are
self-describing and byte-reproducible: entries are written in sorted name
order and the JSON header uses sorted keys.
"""

from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO

import numpy as np

from .errors import BlobFormatError

BLOB_MAGIC = b"MAVT"
CONTAINER_MAGIC = b"MAVC"
VERSION = 1

_DTYPE_CODES: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i4"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
    5: np.dtype("?"),
}
_CODE_FOR_KIND = {np.dtype(k).str.lstrip("<=|>"): c for c, k in
                  [(0, "f4"), (1, "f8"), (2, "i4"), (3, "i8"), (4, "u1"), (5, "b1")]}


def _dtype_code(dtype: np.dtype) -> int:
    key = dtype.str.lstrip("<=|>")
    if key not in _CODE_FOR_KIND:
        raise BlobFormatError(f"unsupported dtype {dtype}")
    return _CODE_FOR_KIND[key]


def write_blob(stream: BinaryIO, array: np.ndarray) -> None:
    if np.asarray(array).ndim < 1:
        raise BlobFormatError("rank must be >= 1")
    arr = np.ascontiguousarray(array)
    code = _dtype_code(arr.dtype)
    arr = arr.astype(_DTYPE_CODES[code], copy=False)
    stream.write(BLOB_MAGIC)
    stream.write(struct.pack("<HBB", VERSION, code, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(arr.tobytes(order="C"))


def read_blob(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(4)
    if magic != BLOB_MAGIC:
        raise BlobFormatError(f"bad blob magic {magic!r}")
    header = stream.read(4)
    if len(header) != 4:
        raise BlobFormatError("truncated blob header")
    version, code, rank = struct.unpack("<HBB", header)
    if version != VERSION:
        raise BlobFormatError(f"unsupported blob version {version}")
    if code not in _DTYPE_CODES or rank < 1:
        raise BlobFormatError("corrupt blob header")
    dims_raw = stream.read(8 * rank)
    if len(dims_raw) != 8 * rank:
        raise BlobFormatError("truncated blob dims")
    dims = struct.unpack(f"<{rank}Q", dims_raw)
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64))
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise BlobFormatError("truncated blob payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def blob_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_blob(buf, array)
    return buf.getvalue()


def blob_from_bytes(data: bytes) -> np.ndarray:
    return read_blob(io.BytesIO(data))


def write_container(path, metadata: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write metadata plus named arrays; byte-identical for identical input."""
    names = sorted(arrays)
    header = {"metadata": metadata, "entries": names}
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<HI", VERSION, len(payload)))
        f.write(payload)
        for name in names:
            write_blob(f, arrays[name])


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CONTAINER_MAGIC:
            raise BlobFormatError(f"bad container magic {magic!r}")
        head = f.read(6)
        if len(head) != 6:
            raise BlobFormatError("truncated container header")
        version, length = struct.unpack("<HI", head)
        if version != VERSION:
            raise BlobFormatError(f"unsupported container version {version}")
        raw = f.read(length)
        if len(raw) != length:
            raise BlobFormatError("truncated container JSON header")
        try:
            header = json.loads(raw)
        except json.JSONDecodeError as e:
            raise BlobFormatError(f"corrupt container header: {e}") from e
        arrays = {name: read_blob(f) for name in header["entries"]}
    return header["metadata"], arrays

"""Binary tensor container.

A single record::

    b"TNSR" | version u8 (1) | dtype u8 | rank u8 | rank x u64 LE extents | payload LE

dtype codes: 0 float32, 1 float64, 2 uint8. A pack of named records is a
u64 LE header length, a UTF-8 JSON index ``[{"name", "offset", "nbytes"}]``
and the records back to back; offsets are relative to the end of the index.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


class TnsrFormatError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        raise TnsrFormatError(f"dtype {arr.dtype} has no TNSR code")
    if arr.ndim > 255:
        raise TnsrFormatError("rank exceeds 255")
    head = MAGIC + struct.pack("<BBB", VERSION, _CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return head + payload


def decode(buf: bytes) -> np.ndarray:
    arr, used = _decode_at(memoryview(buf), 0)
    if used != len(buf):
        raise TnsrFormatError(f"{len(buf) - used} trailing bytes after tensor")
    return arr


def _decode_at(view, pos):
    if bytes(view[pos:pos + 4]) != MAGIC:
        raise TnsrFormatError("bad magic")
    if len(view) < pos + 7:
        raise TnsrFormatError("truncated header")
    version, code, rank = struct.unpack_from("<BBB", view, pos + 4)
    if version != VERSION:
        raise TnsrFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TnsrFormatError(f"unknown dtype code {code}")
    pos += 7
    if len(view) < pos + 8 * rank:
        raise TnsrFormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", view, pos)
    pos += 8 * rank
    dtype = _DTYPES[code].newbyteorder("<")
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(view) < pos + nbytes:
        raise TnsrFormatError("truncated payload")
    arr = np.frombuffer(bytes(view[pos:pos + nbytes]), dtype=dtype).reshape(shape)
    return arr.astype(_DTYPES[code]), pos + nbytes


def save(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def pack(named: dict) -> bytes:
    """Serialize ``{name: array}`` in the given key order."""
    body = io.BytesIO()
    index = []
    for name, arr in named.items():
        rec = encode(arr)
        index.append({"name": name, "offset": body.tell(), "nbytes": len(rec)})
        body.write(rec)
    head = json.dumps(index, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + body.getvalue()


def unpack(buf: bytes) -> dict:
    if len(buf) < 8:
        raise TnsrFormatError("truncated pack header")
    (hlen,) = struct.unpack_from("<Q", buf, 0)
    index = json.loads(buf[8:8 + hlen].decode("utf-8"))
    base = 8 + hlen
    out = {}
    for item in index:
        start = base + item["offset"]
        out[item["name"]] = decode(buf[start:start + item["nbytes"]])
    return out


def save_pack(path, named: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(pack(named))


def load_pack(path) -> dict:
    with open(path, "rb") as fh:
        return unpack(fh.read())

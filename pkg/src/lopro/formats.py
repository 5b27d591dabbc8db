"""Binary containers.

LPRT holds one dense tensor::

    b"LPRT" | u32 version | u64 header_len | JSON header | payload

with header ``{"name", "dtype": "f32"|"f64", "shape"}`` and a little-endian
row-major payload.

LPRQ holds one quantized layer::

    b"LPRQ" | u32 version | u64 meta_len | JSON metadata | pad | sections

Sections start on 64-byte boundaries.  Section offsets in the metadata are
relative to the first aligned byte after the JSON.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

ALIGN = 64
LPRT_MAGIC = b"LPRT"
LPRQ_MAGIC = b"LPRQ"
LPRT_VERSION = 1
LPRQ_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

_DTYPES = {"f32": "<f4", "f64": "<f8", "f16": "<f2", "u8": "u1", "u16": "<u2", "u32": "<u4"}


class FormatError(ValueError):
    pass


def _pad(n: int) -> int:
    return (-n) % ALIGN


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _read_prefix(buf: bytes, magic: bytes):
    if len(buf) < _PREFIX.size:
        raise FormatError("file too short for a container header")
    got, version, hlen = _PREFIX.unpack_from(buf)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    start = _PREFIX.size
    if start + hlen > len(buf):
        raise FormatError("truncated header")
    try:
        meta = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON header: {exc}") from None
    return version, meta, start + hlen


# -- LPRT ---------------------------------------------------------------------

def tensor_to_bytes(array, name: str = "tensor", dtype: str = "f64") -> bytes:
    if dtype not in ("f32", "f64"):
        raise FormatError(f"LPRT dtype must be f32 or f64, got {dtype!r}")
    a = np.ascontiguousarray(np.asarray(array), dtype=_DTYPES[dtype])
    header = _dumps({"name": name, "dtype": dtype, "shape": list(a.shape)})
    return _PREFIX.pack(LPRT_MAGIC, LPRT_VERSION, len(header)) + header + a.tobytes()


def tensor_from_bytes(buf: bytes):
    """Return ``(array as float64, header dict)``."""
    version, header, pos = _read_prefix(buf, LPRT_MAGIC)
    if version != LPRT_VERSION:
        raise FormatError(f"unsupported LPRT version {version}")
    dtype = header.get("dtype")
    if dtype not in ("f32", "f64"):
        raise FormatError(f"LPRT dtype must be f32 or f64, got {dtype!r}")
    shape = tuple(int(s) for s in header["shape"])
    dt = np.dtype(_DTYPES[dtype])
    count = int(np.prod(shape)) if shape else 1
    if len(buf) - pos != count * dt.itemsize:
        raise FormatError(
            f"payload holds {len(buf) - pos} bytes, header implies {count * dt.itemsize}"
        )
    data = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape)
    return data.astype(np.float64), header


def save_tensor(path, array, name: str = "tensor", dtype: str = "f64") -> None:
    Path(path).write_bytes(tensor_to_bytes(array, name, dtype))


def load_tensor(path):
    return tensor_from_bytes(Path(path).read_bytes())


# -- LPRQ ---------------------------------------------------------------------

def pack_sections(meta: dict, sections: Mapping[str, tuple[str, np.ndarray]]) -> bytes:
    """Serialize ``sections`` (name -> (dtype tag, array)) behind ``meta``.

    Empty arrays are omitted.  A ``sections`` table with dtype, shape, offset
    and byte count is added to a copy of ``meta``.
    """
    table = {}
    blobs = []
    offset = 0
    for name, (tag, arr) in sections.items():
        if arr is None or arr.size == 0:
            continue
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        table[name] = {"dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw + b"\0" * _pad(len(raw)))
        offset += len(raw) + _pad(len(raw))
    meta = dict(meta, sections=table)
    body = _dumps(meta)
    head = _PREFIX.pack(LPRQ_MAGIC, LPRQ_VERSION, len(body)) + body
    head += b"\0" * _pad(len(head))
    return head + b"".join(blobs)


def unpack_sections(buf: bytes):
    """Return ``(meta, {name: array})`` from an LPRQ byte string."""
    version, meta, pos = _read_prefix(buf, LPRQ_MAGIC)
    if version != LPRQ_VERSION:
        raise FormatError(f"unsupported LPRQ version {version}")
    base = pos + _pad(pos)
    arrays = {}
    for name, info in meta.get("sections", {}).items():
        dt = np.dtype(_DTYPES[info["dtype"]])
        shape = tuple(info["shape"])
        start = base + info["offset"]
        if start + info["nbytes"] > len(buf):
            raise FormatError(f"section {name!r} runs past the end of the file")
        count = info["nbytes"] // dt.itemsize
        arrays[name] = np.frombuffer(buf, dtype=dt, count=count, offset=start).reshape(shape).copy()
    return meta, arrays


def payload_bytes(meta: dict) -> int:
    """Sum of raw section sizes, excluding header and alignment padding."""
    return sum(info["nbytes"] for info in meta.get("sections", {}).values())


# -- bit packing --------------------------------------------------------------

def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack unsigned codes into a little-endian bit stream, row-major order.

    Element ``k`` occupies stream bits ``[k*bits, (k+1)*bits)``, least
    significant bit first.  Output length is ``ceil(size * bits / 8)``.
    """
    flat = np.ascontiguousarray(codes, dtype=np.uint32).ravel()
    if flat.size and int(flat.max()) >> bits:
        raise FormatError(f"code does not fit in {bits} bits")
    shifts = np.arange(bits, dtype=np.uint32)
    bitplane = ((flat[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitplane.ravel(), bitorder="little")


def unpack_codes(packed: np.ndarray, bits: int, count: int) -> np.ndarray:
    stream = np.unpackbits(np.asarray(packed, dtype=np.uint8), bitorder="little")
    stream = stream[: count * bits].reshape(count, bits).astype(np.uint32)
    weights = (1 << np.arange(bits, dtype=np.uint32))
    return (stream * weights).sum(axis=1).astype(np.uint32)

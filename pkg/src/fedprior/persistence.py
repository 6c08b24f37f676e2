"""Bit-exact little-endian tensor and parameter-set files.

Tensor file (FVT)::

    "FVT1" | version u8=1 | dtype u8 (1 real f64, 2 complex f64) | ndim u8 | 0 u8
    | dims: ndim x u32 | payload: f64 row-major (complex interleaved re/im)

ParamSet container: u32 entry count, then per entry u16 path length, UTF-8
path, embedded FVT blob. Entries are written in lexicographic path order.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError

MAGIC = b"FVT1"
VERSION = 1
DTYPE_REAL = 1
DTYPE_COMPLEX = 2

_F64 = np.dtype("<f8")
_C128 = np.dtype("<c16")


def encode_tensor(t) -> bytes:
    arr = np.asarray(t)
    if np.iscomplexobj(arr):
        dtype, payload = DTYPE_COMPLEX, np.ascontiguousarray(arr, dtype=_C128)
    else:
        dtype, payload = DTYPE_REAL, np.ascontiguousarray(arr, dtype=_F64)
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    header = MAGIC + struct.pack("<BBBB", VERSION, dtype, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload.tobytes()


def decode_tensor(buf, offset=0):
    """Parse one FVT blob starting at ``offset``; returns ``(array, end_offset)``."""
    buf = memoryview(buf)
    if len(buf) - offset < 8:
        raise FormatError("truncated header", offset)
    if bytes(buf[offset : offset + 4]) != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}", offset)
    version, dtype, ndim, reserved = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset + 4)
    if dtype not in (DTYPE_REAL, DTYPE_COMPLEX):
        raise FormatError(f"unknown dtype code {dtype}", offset + 5)
    if reserved != 0:
        raise FormatError("reserved byte must be zero", offset + 7)
    pos = offset + 8
    if len(buf) - pos < 4 * ndim:
        raise FormatError("truncated dims", pos)
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    n = math.prod(dims)
    nbytes = 8 * n * (2 if dtype == DTYPE_COMPLEX else 1)
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}", pos)
    kind = _C128 if dtype == DTYPE_COMPLEX else _F64
    arr = np.frombuffer(buf[pos : pos + nbytes], dtype=kind).reshape(dims)
    return arr.astype(kind.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(t, path):
    _atomic_write(path, encode_tensor(t))


def load_tensor(path):
    data = Path(path).read_bytes()
    arr, end = decode_tensor(data)
    if end != len(data):
        raise FormatError("trailing bytes after tensor payload", end)
    return arr


def encode_paramset(params) -> bytes:
    out = io.BytesIO()
    keys = sorted(params)
    out.write(struct.pack("<I", len(keys)))
    for k in keys:
        kb = k.encode("utf-8")
        if len(kb) > 0xFFFF:
            raise FormatError(f"path too long: {k[:40]}...")
        out.write(struct.pack("<H", len(kb)))
        out.write(kb)
        out.write(encode_tensor(params[k]))
    return out.getvalue()


def decode_paramset(buf, offset=0):
    buf = memoryview(buf)
    if len(buf) - offset < 4:
        raise FormatError("truncated entry count", offset)
    (n,) = struct.unpack_from("<I", buf, offset)
    pos = offset + 4
    out = {}
    for _ in range(n):
        if len(buf) - pos < 2:
            raise FormatError("truncated path length", pos)
        (plen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) - pos < plen:
            raise FormatError("truncated path", pos)
        try:
            key = bytes(buf[pos : pos + plen]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("path is not valid UTF-8", pos) from exc
        if key in out:
            raise FormatError(f"duplicate path {key!r}", pos)
        pos += plen
        out[key], pos = decode_tensor(buf, pos)
    return out, pos


def save_paramset(params, path):
    _atomic_write(path, encode_paramset(params))


def load_paramset(path):
    data = Path(path).read_bytes()
    params, end = decode_paramset(data)
    if end != len(data):
        raise FormatError("trailing bytes after parameter set", end)
    return params


# model checkpoint = u32 JSON header length | UTF-8 JSON header | ParamSet container

def save_checkpoint(header: dict, params, path):
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    _atomic_write(path, struct.pack("<I", len(hb)) + hb + encode_paramset(params))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError("truncated checkpoint header", 0)
    (hlen,) = struct.unpack_from("<I", data, 0)
    if len(data) < 4 + hlen:
        raise FormatError("truncated checkpoint header", 4)
    try:
        header = json.loads(data[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("checkpoint header is not valid JSON", 4) from exc
    params, end = decode_paramset(data, 4 + hlen)
    if end != len(data):
        raise FormatError("trailing bytes after checkpoint", end)
    return header, params


FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def paramset_checksum(params) -> str:
    return f"{fnv1a64(encode_paramset(params)):016x}"


def file_checksum(path) -> str:
    return f"{fnv1a64(Path(path).read_bytes()):016x}"


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_csv_cell(v) for v in r])
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _csv_cell(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return v


def write_json(path, obj):
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    _atomic_write(path, text.encode("utf-8"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)

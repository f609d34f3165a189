"""Binary grid/trace files, JSON configs, run manifests and PGM quick-looks.

GridFile  ("ADFG"): magic, u16 version, u32 nz, u32 nx, f64 dx, f64 dz, u8 dtype tag,
                    nz*nx f64 payload (row-major), u32 CRC32 of the payload.
TraceFile ("ADFT"): magic, u16 version, u32 nshots, u32 nrec, u32 nt, f64 dt,
                    u8 component tag, payload [shot][rec][t] f64, u32 CRC32.

Everything is little-endian.  Writes go to a temp file that is then renamed.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

GRID_MAGIC = b"ADFG"
TRACE_MAGIC = b"ADFT"
VERSION = 1
DTYPE_F64 = 1
COMPONENTS = ("pressure", "vx", "vz")

_GRID_HDR = struct.Struct("<4sHIIddB")
_TRACE_HDR = struct.Struct("<4sHIIIdB")
_CRC = struct.Struct("<I")


class FormatError(ValueError):
    """Malformed or corrupted file; the message starts with a category prefix."""


class SchemaError(ValueError):
    pass


def atomic_write(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing file: {path}") from None


def _payload(raw: bytes, offset: int, count: int, path):
    end = offset + 8 * count
    if len(raw) != end + 4:
        raise FormatError(f"format error: {path} has {len(raw)} bytes, header implies {end + 4}")
    body = raw[offset:end]
    (crc,) = _CRC.unpack_from(raw, end)
    if zlib.crc32(body) != crc:
        raise FormatError(f"crc error: payload checksum mismatch in {path}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


def write_grid(path, field, dx: float, dz: float):
    a = np.ascontiguousarray(field, dtype="<f8")
    if a.ndim != 2:
        raise ValueError("grid field must be 2D")
    body = a.tobytes()
    hdr = _GRID_HDR.pack(GRID_MAGIC, VERSION, a.shape[0], a.shape[1], dx, dz, DTYPE_F64)
    atomic_write(path, hdr + body + _CRC.pack(zlib.crc32(body)))


def read_grid(path):
    """Returns (field, dx, dz)."""
    raw = _read(path)
    if len(raw) < _GRID_HDR.size or raw[:4] != GRID_MAGIC:
        raise FormatError(f"format error: {path} is not a grid file")
    magic, ver, nz, nx, dx, dz, tag = _GRID_HDR.unpack_from(raw)
    if ver != VERSION or tag != DTYPE_F64:
        raise FormatError(f"format error: unsupported version {ver} / dtype {tag}")
    data = _payload(raw, _GRID_HDR.size, nz * nx, path)
    return data.reshape(nz, nx), dx, dz


def write_traces(path, traces, dt: float, component: str = "pressure"):
    """`traces` is (nshots, nt, nrec) in memory; stored shot-major as [shot][rec][t]."""
    a = np.asarray(traces, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError("traces must be (nshots, nt, nrec)")
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}")
    ns, nt, nr = a.shape
    body = np.ascontiguousarray(a.transpose(0, 2, 1), dtype="<f8").tobytes()
    hdr = _TRACE_HDR.pack(TRACE_MAGIC, VERSION, ns, nr, nt, dt, COMPONENTS.index(component))
    atomic_write(path, hdr + body + _CRC.pack(zlib.crc32(body)))


def read_traces(path):
    """Returns (traces (nshots, nt, nrec), dt, component)."""
    raw = _read(path)
    if len(raw) < _TRACE_HDR.size or raw[:4] != TRACE_MAGIC:
        raise FormatError(f"format error: {path} is not a trace file")
    magic, ver, ns, nr, nt, dt, tag = _TRACE_HDR.unpack_from(raw)
    if ver != VERSION or tag >= len(COMPONENTS):
        raise FormatError(f"format error: unsupported version {ver} / component {tag}")
    data = _payload(raw, _TRACE_HDR.size, ns * nr * nt, path)
    return data.reshape(ns, nr, nt).transpose(0, 2, 1).copy(), dt, COMPONENTS[tag]


def write_pgm(path, field):
    """16-bit binary PGM, min-max normalised."""
    a = np.asarray(field, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros(a.shape) if hi == lo else (a - lo) / (hi - lo)
    img = np.round(scaled * 65535).astype(">u2")
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode()
    atomic_write(path, header + img.tobytes())


# ---------------------------------------------------------------- configs

def from_dict(cls, d: dict, where: str = ""):
    """Build dataclass `cls` from `d`, rejecting unknown keys and bad values."""
    if not isinstance(d, dict):
        raise SchemaError(f"schema error: {where or cls.__name__} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise SchemaError(f"schema error: unknown key(s) {unknown} in {where or cls.__name__}")
    kwargs = {}
    for k, v in d.items():
        sub = _nested.get((cls.__name__, k))
        kwargs[k] = from_dict(sub, v, f"{where}.{k}" if where else k) if sub and v is not None else v
        if isinstance(kwargs[k], list) and names[k].type in ("tuple", "tuple | None"):
            kwargs[k] = tuple(kwargs[k])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"schema error: {where or cls.__name__}: {e}") from None


_nested: dict = {}


def register_nested(cls_name: str, key: str, sub_cls):
    _nested[(cls_name, key)] = sub_cls


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def load_json(path) -> dict:
    raw = _read(path)
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"schema error: {path} is not valid JSON ({e})") from None


def write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))

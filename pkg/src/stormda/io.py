"""Binary containers and CSV exports.

SDAF (fields)::

    b"SDAF" | u16 version | u32 ny | u32 nx | u32 n_vars | u32 K | u8 dtype tag
    | payload (K, n_vars, ny, nx), little-endian, row-major

SDNP (named tensors)::

    b"SDNP" | u16 version | u32 meta_len | meta (UTF-8 JSON) | u32 n_tensors
    | per tensor: u16 name_len | name | u8 ndim | u32 dims... | f32 LE payload
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .fields import GridSpec, StateField, TemporalContext

SDAF_MAGIC = b"SDAF"
SDNP_MAGIC = b"SDNP"
VERSION = 1
_DTYPE_TAGS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def encode_fields(arr: np.ndarray, dtype=np.float32) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ConfigError("field container expects (K, n_vars, ny, nx)")
    K, nv, ny, nx = arr.shape
    dt = np.dtype(dtype).newbyteorder("<")
    tag = dt.itemsize
    if tag not in _DTYPE_TAGS:
        raise ConfigError(f"unsupported container dtype {dtype}")
    head = SDAF_MAGIC + struct.pack("<HIIIIB", VERSION, ny, nx, nv, K, tag)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_fields(buf: bytes) -> np.ndarray:
    if buf[:4] != SDAF_MAGIC:
        raise ConfigError("not an SDAF container")
    version, ny, nx, nv, K, tag = struct.unpack_from("<HIIIIB", buf, 4)
    if version != VERSION:
        raise ConfigError(f"unsupported SDAF version {version}")
    if tag not in _DTYPE_TAGS:
        raise ConfigError(f"unknown dtype tag {tag}")
    off = 4 + struct.calcsize("<HIIIIB")
    dt = _DTYPE_TAGS[tag]
    n = K * nv * ny * nx
    if len(buf) - off != n * dt.itemsize:
        raise ConfigError("truncated SDAF payload")
    return np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(K, nv, ny, nx).copy()


def write_field(path, f: StateField | TemporalContext | np.ndarray, dtype=np.float64) -> str:
    """Write a field (K=1) or a context (K frames); returns the sha256 hex digest."""
    if isinstance(f, StateField):
        arr = f.values[None]
    elif isinstance(f, TemporalContext):
        arr = f.array()
    else:
        arr = np.asarray(f)
    data = encode_fields(arr, dtype)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_fields(path) -> np.ndarray:
    return decode_fields(Path(path).read_bytes())


def read_state(path, patch: int = 1) -> StateField:
    arr = read_fields(path)
    if arr.shape[0] != 1:
        raise ConfigError(f"{path} holds {arr.shape[0]} frames, expected 1")
    _, nv, ny, nx = arr.shape
    return StateField(GridSpec(ny, nx, nv, patch), arr[0].astype(np.float64))


def read_context(path, patch: int = 1) -> TemporalContext:
    arr = read_fields(path).astype(np.float64)
    K, nv, ny, nx = arr.shape
    return TemporalContext.from_array(GridSpec(ny, nx, nv, patch, K), arr)


def field_csv(values: np.ndarray) -> str:
    values = np.asarray(values)
    if values.ndim != 3:
        raise ConfigError("CSV export expects (n_vars, ny, nx)")
    if values.shape[1] > 64 or values.shape[2] > 64:
        raise ConfigError("CSV export is limited to grids of at most 64x64")
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["var", "row", "col", "value"])
    for (v, r, c), x in np.ndenumerate(values):
        w.writerow([v, r, c, repr(float(x))])
    return out.getvalue()


# ---------------------------------------------------------------------------
# named tensors


def encode_tensors(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [SDNP_MAGIC, struct.pack("<HI", VERSION, len(meta_b)), meta_b,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:4] != SDNP_MAGIC:
        raise ConfigError("not an SDNP container")
    version, mlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ConfigError(f"unsupported SDNP version {version}")
    off = 10
    meta = json.loads(buf[off:off + mlen].decode())
    off += mlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nl].decode()
        off += nl
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    return out, meta


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

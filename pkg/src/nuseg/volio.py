"""Reader/writer for ``NUSEG1`` binary volumes and their JSON sidecars.

Layout (all little endian)::

    b"NUSEG1" | u8 dtype code | u32 D | u32 H | u32 W | payload

Dtype code 0 is float32, 1 is a uint8 {0, 1} mask.  The payload is in
row-major order.  The sidecar lives next to the volume with a ``.json``
suffix and holds at least ``image_id``, ``annotator_id`` and ``kind``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedDtypeError

MAGIC = b"NUSEG1"
HEADER = struct.Struct("<6sB3I")
F32, U8 = 0, 1
_DTYPES = {F32: np.dtype("<f4"), U8: np.dtype("u1")}


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def encode_volume(values: np.ndarray, dtype_code: int) -> bytes:
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"expected 3D volume, got shape {values.shape}")
    if dtype_code not in _DTYPES:
        raise ValueError(f"unknown dtype code {dtype_code}")
    payload = np.ascontiguousarray(values, dtype=_DTYPES[dtype_code]).tobytes(order="C")
    return HEADER.pack(MAGIC, dtype_code, *values.shape) + payload


def decode_volume(data: bytes, path="<bytes>") -> np.ndarray:
    if len(data) < HEADER.size:
        raise FormatError(path, "truncated header")
    magic, code, d, h, w = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(path, f"bad magic {magic!r}")
    if code not in _DTYPES:
        raise UnsupportedDtypeError(path, f"unsupported dtype code {code}")
    dtype = _DTYPES[code]
    expected = d * h * w * dtype.itemsize
    payload = data[HEADER.size:]
    if len(payload) != expected:
        raise FormatError(path, f"payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(d, h, w)
    if code == U8:
        if not np.all(arr <= 1):
            raise FormatError(path, "mask payload contains values other than 0/1")
        return arr.astype(np.uint8)
    return arr.astype(np.float64)


def write_volume(path, values, *, mask: bool | None = None, meta: dict | None = None) -> Path:
    """Write ``values`` and (optionally) its sidecar; returns the volume path."""
    path = Path(path)
    values = np.asarray(values)
    if mask is None:
        mask = values.dtype in (np.uint8, np.bool_)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_volume(values, U8 if mask else F32))
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return path


def read_volume(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read volume ({exc.strerror})") from exc
    return decode_volume(data, path)


def read_sidecar(path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(side, "missing sidecar")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(side, f"invalid JSON ({exc.msg})") from exc
    missing = {"image_id", "annotator_id", "kind"} - set(meta)
    if missing:
        raise FormatError(side, f"sidecar lacks keys {sorted(missing)}")
    return meta

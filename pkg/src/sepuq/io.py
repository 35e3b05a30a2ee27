"""Binary array container and CSV tables.

Container layout (all integers little-endian)::

    b"SEPUQ1"
    uint32  length of the metadata block
    bytes   UTF-8 JSON metadata; its "arrays" entry lists the array names in order
    per array:
        uint32  ndim
        uint64  dims[ndim]
        float64 values, row-major, little-endian

Values round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"SEPUQ1"
_LE_F8 = np.dtype("<f8")


def write_arrays(path, arrays: dict, meta: dict | None = None) -> Path:
    """Write named float arrays plus JSON-serializable metadata."""
    path = Path(path)
    meta = dict(meta or {})
    names = list(arrays)
    meta["arrays"] = names
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            arr = np.asarray(arrays[name], dtype=_LE_F8)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    return path


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValidationError(f"truncated container {getattr(fh, 'name', '')}")
    return buf


def read_arrays(path) -> tuple[dict, dict]:
    """Inverse of :func:`write_arrays`; returns (arrays, metadata)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise ValidationError(f"{path} is not a SEPUQ1 container")
        (n_meta,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, n_meta).decode())
        arrays = {}
        for name in meta.get("arrays", []):
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
            count = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(_read_exact(fh, 8 * count), dtype=_LE_F8)
            arrays[name] = data.astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ValidationError(f"trailing bytes in {path}")
    return arrays, meta


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x
                             for x in row])
    return path


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]

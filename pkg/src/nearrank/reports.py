"""Report serialisation: versioned JSON envelopes, CSV tables, tensor files.

JSON envelopes are written with sorted keys, two-space indentation and
Python's shortest round-trip float repr, so ``serialize -> parse ->
serialize`` reproduces the same bytes.  CSV numbers use 17 significant
digits (``format(x, ".17g")``), enough to parse back to the identical
double.

Tensor container (``.nrt``), little-endian::

    offset  size     field
    0       4        magic b"NRLT"
    4       2        uint16 format version (1)
    6       1        uint8 dtype tag (1 = float64, 2 = float32)
    7       1        uint8 order N (>= 1)
    8       8*N      uint64 dimensions
    8+8N    ...      payload, row-major (C order)
"""

import csv
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SCHEMA_VERSION",
    "ReportEnvelope",
    "SchemaVersionError",
    "TensorFileError",
    "write_report",
    "read_report",
    "to_jsonable",
    "format_number",
    "csv_bytes",
    "parse_csv",
    "atomic_write",
    "write_tensor",
    "read_tensor",
]

SCHEMA_VERSION = 1
TENSOR_MAGIC = b"NRLT"
TENSOR_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<f4")}


class SchemaVersionError(ValueError):
    pass


class TensorFileError(ValueError):
    pass


@dataclass
class ReportEnvelope:
    kind: str
    payload: object
    config: dict = field(default_factory=dict)
    seed: object = None
    timestamp: str = None
    schema_version: int = SCHEMA_VERSION


def to_jsonable(obj):
    """Convert dataclasses, numpy scalars/arrays and tuples into JSON types."""
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        # JSON has no inf/nan; keep them readable and reversible
        return {"__float__": repr(obj)}
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _revive(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__float__"}:
            return float(obj["__float__"])
        return {k: _revive(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_revive(v) for v in obj]
    return obj


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(envelope):
    """Serialise an envelope to UTF-8 bytes."""
    doc = {
        "schema_version": envelope.schema_version,
        "kind": envelope.kind,
        "seed": to_jsonable(envelope.seed),
        "timestamp": envelope.timestamp,
        "config": to_jsonable(envelope.config),
        "payload": to_jsonable(envelope.payload),
    }
    return _dumps(doc).encode("utf-8")


def read_report(data, expected_version=SCHEMA_VERSION):
    """Parse bytes produced by :func:`write_report`."""
    doc = json.loads(data.decode("utf-8") if isinstance(data, bytes) else data)
    version = doc.get("schema_version")
    if version != expected_version:
        raise SchemaVersionError(f"report schema_version {version!r}, expected {expected_version}")
    doc = _revive(doc)
    return ReportEnvelope(kind=doc["kind"], payload=doc["payload"], config=doc["config"],
                          seed=doc["seed"], timestamp=doc["timestamp"], schema_version=version)


def format_number(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def csv_bytes(header, rows):
    """RFC 4180 style CSV (comma, header row, ``\\r\\n`` line ends)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_number(v) for v in row])
    return buf.getvalue().encode("utf-8")


def parse_csv(data):
    """Return ``(header, rows)`` with cells as strings."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


def atomic_write(path, data):
    """Write ``data`` to ``path`` via a temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data if isinstance(data, bytes) else data.encode("utf-8"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(array, dtype="float64"):
    """Encode ``array`` in the tensor container format and return bytes."""
    arr = np.asarray(array)
    tag = {"float64": 1, "float32": 2}[dtype]
    if arr.ndim < 1 or arr.ndim > 255:
        raise TensorFileError("tensor order must be in 1..255")
    header = TENSOR_MAGIC + struct.pack("<HBB", TENSOR_VERSION, tag, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()


def read_tensor(data):
    """Decode a tensor container; always returns float64."""
    if len(data) < 8:
        raise TensorFileError(f"file too short for header ({len(data)} bytes)")
    if data[:4] != TENSOR_MAGIC:
        raise TensorFileError(f"bad magic {data[:4]!r}, expected {TENSOR_MAGIC!r}")
    version, tag, order = struct.unpack_from("<HBB", data, 4)
    if version != TENSOR_VERSION:
        raise TensorFileError(f"unsupported tensor format version {version}")
    if tag not in DTYPE_TAGS:
        raise TensorFileError(f"unknown dtype tag {tag}")
    if order < 1:
        raise TensorFileError("tensor order must be >= 1")
    end = 8 + 8 * order
    if len(data) < end:
        raise TensorFileError("header truncated in dimension list")
    dims = struct.unpack_from(f"<{order}Q", data, 8)
    if any(d < 1 for d in dims):
        raise TensorFileError(f"dimensions must be >= 1, got {dims}")
    dt = DTYPE_TAGS[tag]
    need = math.prod(dims) * dt.itemsize
    if len(data) - end != need:
        raise TensorFileError(f"payload has {len(data) - end} bytes, expected {need}")
    return np.frombuffer(data, dtype=dt, offset=end).reshape(dims).astype(np.float64)

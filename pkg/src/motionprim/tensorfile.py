"""Deterministic binary container for named tensors.

Layout: magic line, 8-byte big-endian header length, JSON header, then the
raw buffers concatenated in header order. The header records kind, format
version, user metadata, and per-tensor name/dtype/shape. Writing the same
content always produces the same bytes (sorted JSON keys, no timestamps),
which checkpoint hashing relies on.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MPTENS1\n"

_DTYPES = {
    "float64": "<f8",
    "int64": "<i8",
}


def save_tensors(path: str | Path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write `tensors` to `path`. Floats are stored as little-endian float64,
    integers as little-endian int64; other dtypes are rejected."""
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype("<f8")
            dtype = "float64"
        elif np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype("<i8")
            dtype = "int64"
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = {"kind": kind, "version": 1, "meta": meta, "tensors": entries}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "big"))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path, expected_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container written by `save_tensors`; returns (meta, tensors)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no such file: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a motionprim tensor file")
        header_len = int.from_bytes(fh.read(8), "big")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        if header.get("version") != 1:
            raise CheckpointError(f"{path}: unsupported container version {header.get('version')}")
        if expected_kind is not None and header.get("kind") != expected_kind:
            raise CheckpointError(
                f"{path}: expected kind {expected_kind!r}, found {header.get('kind')!r}"
            )
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            dtype = _DTYPES.get(entry["dtype"])
            if dtype is None:
                raise CheckpointError(f"{path}: unknown dtype {entry['dtype']!r}")
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointError(f"{path}: truncated tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return header["meta"], tensors

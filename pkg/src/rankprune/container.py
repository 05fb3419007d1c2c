"""Bit-exact tensor container I/O.

Layout (the de-facto single-file interchange format, so real checkpoints
load unmodified): an 8-byte little-endian unsigned header length, a JSON
header mapping tensor name -> {dtype, shape, data_offsets}, then the raw
payload.  Offsets are relative to the start of the payload, must ascend
in header order, and must tile the payload exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerFormatError

# Weight tensors are stored as F32/F16; I32/I64 carry integer metadata
# such as retained-channel indices.
_DTYPES = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "I32": np.dtype("<i4"),
    "I64": np.dtype("<i8"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}

_MAX_HEADER = 1 << 28  # sanity cap; a corrupt length field fails fast


def dtype_name(arr: np.ndarray) -> str:
    key = arr.dtype.newbyteorder("<")
    if key not in _DTYPE_NAMES:
        raise ContainerFormatError(f"unsupported tensor dtype {arr.dtype}")
    return _DTYPE_NAMES[key]


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container file into {name: array} plus its free-form metadata.

    Arrays come back in their on-disk dtype; callers widen as needed.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ContainerFormatError(f"{path}: file too short to hold a header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if header_len > _MAX_HEADER or 8 + header_len > len(raw):
        raise ContainerFormatError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerFormatError(f"{path}: header must be a JSON object")

    payload = raw[8 + header_len :]
    metadata = header.pop("__metadata__", {})

    tensors: dict[str, np.ndarray] = {}
    cursor = 0
    for name, entry in header.items():
        try:
            dtype_key = entry["dtype"]
            shape = tuple(int(x) for x in entry["shape"])
            start, end = (int(x) for x in entry["data_offsets"])
        except (TypeError, KeyError, ValueError) as exc:
            raise ContainerFormatError(f"{path}: malformed entry for {name!r}") from exc
        if dtype_key not in _DTYPES:
            raise ContainerFormatError(f"{path}: tensor {name!r} has unsupported dtype {dtype_key!r}")
        dt = _DTYPES[dtype_key]
        if start != cursor:
            kind = "overlapping" if start < cursor else "non-contiguous"
            raise ContainerFormatError(
                f"{path}: tensor {name!r} has {kind} byte range [{start}, {end})"
            )
        n_elems = 1
        for s in shape:
            if s < 0:
                raise ContainerFormatError(f"{path}: tensor {name!r} has negative dim in {shape}")
            n_elems *= s
        if end - start != n_elems * dt.itemsize:
            raise ContainerFormatError(
                f"{path}: tensor {name!r} byte range length {end - start} does not match "
                f"shape {shape} x {dt.itemsize} bytes"
            )
        if end > len(payload):
            raise ContainerFormatError(f"{path}: payload truncated at tensor {name!r}")
        tensors[name] = np.frombuffer(payload[start:end], dtype=dt).reshape(shape).copy()
        cursor = end
    if cursor != len(payload):
        raise ContainerFormatError(
            f"{path}: payload has {len(payload) - cursor} trailing bytes not covered by any tensor"
        )
    return tensors, metadata


def write_container(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """Write tensors in sorted-name order with a canonical header.

    Identical inputs produce identical bytes, so compression runs can be
    checked for reproducibility by comparing files.
    """
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}
    chunks: list[bytes] = []
    cursor = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = arr.tobytes()
        header[name] = {
            "dtype": dtype_name(arr),
            "shape": list(arr.shape),
            "data_offsets": [cursor, cursor + len(data)],
        }
        chunks.append(data)
        cursor += len(data)
    body = json.dumps(header, separators=(",", ":"), sort_keys=False, ensure_ascii=False).encode("utf-8")
    if len(body) % 8:  # pad so the payload starts 8-aligned
        body += b" " * (8 - len(body) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(body)))
        fh.write(body)
        for chunk in chunks:
            fh.write(chunk)

"""Shared container framing for the engine's binary file formats.

Layout: 8-byte ASCII magic, uint64 little-endian header length, UTF-8 JSON
header, then raw little-endian arrays at header-declared offsets (relative
to the end of the header). Round-trips are bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_ALLOWED_DTYPES = {"<f4", "<f8", "<u4", "|u1", "<i4"}


class FormatError(ValueError):
    """Raised when a container file is malformed."""


def write_blob_file(path, magic: bytes, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    table = []
    blobs = []
    offset = 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported array dtype {arr.dtype} for '{name}'")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    full_header = dict(header)
    full_header["arrays"] = table
    head = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(np.uint64(len(head)).tobytes())
        f.write(head)
        for raw in blobs:
            f.write(raw)


def read_blob_file(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != magic:
        raise FormatError(f"{path}: bad magic (expected {magic!r})")
    head_len = int(np.frombuffer(data[8:16], dtype="<u8")[0])
    if 16 + head_len > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: invalid header JSON: {e}") from e
    blob = data[16 + head_len :]
    arrays = {}
    for entry in header.get("arrays", []):
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise FormatError(f"{path}: unsupported dtype {dtype}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        nbytes = count * np.dtype(dtype).itemsize
        if start + nbytes > len(blob):
            raise FormatError(f"{path}: array '{entry['name']}' exceeds file size")
        arrays[entry["name"]] = np.frombuffer(blob[start : start + nbytes], dtype=dtype).reshape(shape).copy()
    return header, arrays

"""Binary tensor container ("MRPC" format).

Layout: magic bytes "MRPC", format version as 4-byte little-endian
unsigned int, 8-byte little-endian header length, UTF-8 JSON header
listing tensor records (name, shape, dtype "f32", byte offset into the
payload section), then raw little-endian float32 payloads in header
order. Loading restores float64 compute copies.

Small config scalars ride along as ordinary single-element tensor
records (e.g. "backbone.config.d_model"), keeping checkpoints
self-describing without a second file format.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import InvalidConfigError, MissingArtifactError

MAGIC = b"MRPC"
FORMAT_VERSION = 1


def save_tensors(path: str, named: list[tuple[str, np.ndarray]]) -> None:
    records = []
    payloads = []
    offset = 0
    for name, arr in named:
        arr32 = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        records.append(
            {"name": name, "shape": list(arr32.shape), "dtype": "f32", "offset": offset}
        )
        payloads.append(arr32.tobytes())
        offset += arr32.nbytes
    header = json.dumps(records, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in payloads:
            f.write(chunk)


def load_tensors(path: str) -> dict[str, np.ndarray]:
    """Read an MRPC file into {name: float64 array}."""
    try:
        f = open(path, "rb")
    except FileNotFoundError:
        raise MissingArtifactError(f"checkpoint not found: {path}") from None
    with f:
        magic = f.read(4)
        if magic != MAGIC:
            raise InvalidConfigError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise InvalidConfigError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        records = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    out = {}
    for rec in records:
        shape = tuple(rec["shape"])
        if rec["dtype"] != "f32":
            raise InvalidConfigError(f"{path}: unsupported dtype {rec['dtype']!r}")
        count = int(np.prod(shape)) if shape else 1
        start = rec["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        out[rec["name"]] = arr.reshape(shape).astype(np.float64)
    return out


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
    except FileNotFoundError:
        raise MissingArtifactError(f"file not found: {path}") from None
    return h.hexdigest()

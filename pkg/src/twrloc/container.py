"""Versioned binary container used for dataset files and model checkpoints.

Layout, all integers little-endian:

    magic (4 bytes) | version (u32) | header_len (u64) |
    header JSON (UTF-8) | array blocks (float64 LE, C order) |
    sha256 of everything before it (32 bytes)

The header JSON must contain an ``"arrays"`` list of ``{"name", "shape"}``
entries describing the blocks in order. Writers produce byte-identical
files for identical inputs (the header is serialized with sorted keys).
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

FORMAT_VERSION = 1
_CHECKSUM_LEN = 32


class ContainerError(ValueError):
    """Malformed, truncated, or incompatible container file."""


def write_container(path, magic: bytes, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    header = dict(header)
    header["arrays"] = [
        {"name": name, "shape": list(np.asarray(arr).shape)}
        for name, arr in arrays
    ]
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += magic
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for _, arr in arrays:
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 4 + 8 + _CHECKSUM_LEN:
        raise ContainerError(f"{path}: file truncated")
    if blob[:4] != magic:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    digest = hashlib.sha256(blob[:-_CHECKSUM_LEN]).digest()
    if digest != blob[-_CHECKSUM_LEN:]:
        raise ContainerError(f"{path}: checksum mismatch (corrupt or truncated file)")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    header_len = struct.unpack_from("<Q", blob, 8)[0]
    start = 16
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header: {exc}") from exc
    offset = start + header_len
    arrays = {}
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob) - _CHECKSUM_LEN:
            raise ContainerError(f"{path}: array block '{entry['name']}' truncated")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(blob) - _CHECKSUM_LEN:
        raise ContainerError(f"{path}: trailing bytes after declared arrays")
    return header, arrays


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()

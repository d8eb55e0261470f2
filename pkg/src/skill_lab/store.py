"""Named float64 arrays on disk: ``manifest.json`` + ``data.bin``.

The blob is the concatenation of all arrays (little-endian float64,
row-major) in manifest order; the manifest records shapes, offsets and a
SHA-256 of the blob. Writing is byte-stable for identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
BLOB = "data.bin"
_LE = np.dtype("<f8")


class ChecksumError(IOError):
    pass


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(obj, path: str | os.PathLike) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def save_arrays(directory: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write ``arrays`` (insertion order preserved) and return the blob checksum."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_LE)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    blob = b"".join(chunks)
    checksum = sha256_bytes(blob)
    (directory / BLOB).write_bytes(blob)
    dump_json({"entries": entries, "meta": meta or {}, "sha256": checksum, "dtype": "<f8"}, directory / MANIFEST)
    return checksum


def read_manifest(directory: str | os.PathLike) -> dict:
    return json.loads((Path(directory) / MANIFEST).read_text(encoding="utf-8"))


def load_arrays(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    blob = (directory / BLOB).read_bytes()
    if sha256_bytes(blob) != manifest["sha256"]:
        raise ChecksumError(f"checksum mismatch in {directory / BLOB}: file is corrupted")
    flat = np.frombuffer(blob, dtype=_LE)
    arrays = {}
    for e in manifest["entries"]:
        seg = flat[e["offset"] : e["offset"] + e["count"]]
        arrays[e["name"]] = seg.astype(np.float64).reshape(e["shape"])
    return arrays, manifest.get("meta", {})

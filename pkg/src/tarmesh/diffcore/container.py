"""Binary container: a JSON manifest followed by raw little-endian float32 buffers.

Layout::

    b"TARC" | uint32 LE manifest length | manifest (UTF-8 JSON) | buffers...

The manifest lists ``entries`` (name, shape, dtype) in buffer order, plus a
free-form ``meta`` object.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TARC"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class ContainerError(ValueError):
    pass


def save_container(path, arrays: dict, meta: dict | None = None, kind: str = "checkpoint") -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.asarray(arr.detach().cpu().numpy() if hasattr(arr, "detach") else arr)
        a = np.ascontiguousarray(a, dtype=_LE_F32)
        if not np.isfinite(a).all():
            raise ContainerError(f"refusing to write non-finite values for {name!r}")
        entries.append({"name": name, "shape": list(a.shape), "dtype": "float32"})
        blobs.append(a.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "entries": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        return _read_head(fh, path)


def _read_head(fh, path) -> dict:
    if fh.read(4) != MAGIC:
        raise ContainerError(f"{path}: not a container file")
    (n,) = struct.unpack("<I", fh.read(4))
    manifest = json.loads(fh.read(n).decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {manifest.get('format_version')}")
    return manifest


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (name -> float32 array, manifest)."""
    with open(path, "rb") as fh:
        manifest = _read_head(fh, path)
        arrays = {}
        for e in manifest["entries"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise ContainerError(f"{path}: truncated buffer for {e['name']!r}")
            arrays[e["name"]] = np.frombuffer(buf, dtype=_LE_F32).reshape(e["shape"]).astype(np.float32)
    return arrays, manifest

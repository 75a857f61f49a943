"""Checkpoint container: named float64 arrays in one flat binary file.

Layout (documented so checkpoints round-trip bit-exactly):

* ``<name>.bin``  — the raw little-endian float64 array payloads, each
  aligned to an 8-byte boundary, concatenated in manifest order;
* ``<name>.json`` — a manifest ``{"arrays": {name: {shape, offset}},
  "meta": {...}}``. `offset` is the byte position of the array inside the
  .bin file; dtype is always ``<f8``. `meta` carries small JSON-serializable
  config (model geometry, flags).

Writes are deterministic: arrays are emitted sorted by name, JSON keys
sorted, no timestamps.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write `arrays` + `meta` to path.bin / path.json (extension replaced)."""
    path = Path(path)
    manifest: dict[str, dict] = {}
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest[name] = {"shape": list(arr.shape), "offset": offset}
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
        if offset % 8:  # all-float64 payloads keep this invariant by construction
            raise DataError(f"misaligned payload after {name!r}")
    path.with_suffix(".bin").write_bytes(b"".join(blobs))
    doc = {"arrays": manifest, "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta). Arrays are fresh writable float64 copies."""
    path = Path(path)
    doc = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    out = {}
    for name, entry in doc["arrays"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
        out[name] = arr.reshape(shape).copy()
    return out, doc.get("meta", {})

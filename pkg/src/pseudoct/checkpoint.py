"""Parameter checkpoints: JSON index plus a raw little-endian blob.

``<stem>.json`` lists every array by id with its shape, dtype and byte
offset into ``<stem>.bin``; free-form metadata rides alongside.  Arrays
are copied byte for byte, so a save/load round trip is exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT = "pseudoct-checkpoint/1"
_DTYPES = {"f4": "<f4", "f8": "<f8"}


def _paths(stem):
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_arrays(stem, arrays: dict, meta: dict | None = None) -> Path:
    index_path, blob_path = _paths(stem)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = {4: "f4", 8: "f8"}.get(arr.dtype.itemsize) if arr.dtype.kind == "f" else None
        if code is None:
            raise FormatError(f"cannot checkpoint {name}: dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"id": name, "shape": list(arr.shape), "dtype": code, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    index = {"format": FORMAT, "meta": meta or {}, "entries": entries, "nbytes": offset}
    blob_path.write_bytes(b"".join(chunks))
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return index_path


def load_arrays(stem) -> tuple[dict, dict]:
    """Return ``(arrays, meta)`` with arrays in their saved order."""
    index_path, blob_path = _paths(stem)
    try:
        index = json.loads(index_path.read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{index_path}: unreadable checkpoint index ({exc})") from exc
    if index.get("format") != FORMAT:
        raise FormatError(f"{index_path}: not a {FORMAT} index")
    blob = blob_path.read_bytes()
    if len(blob) != index["nbytes"]:
        raise FormatError(f"{blob_path}: expected {index['nbytes']} bytes, found {len(blob)}")
    arrays = {}
    for e in index["entries"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"])
        arrays[e["id"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
    return arrays, index["meta"]


def module_state(module, prefix="") -> dict:
    state = {prefix + name: p.data for name, p in module.named_parameters()}
    state.update({prefix + name: b for name, b in module.named_buffers()})
    return state


def load_module_state(module, arrays: dict, prefix="") -> None:
    """Copy arrays into ``module`` in place; shapes must match exactly."""
    for name, p in module.named_parameters():
        key = prefix + name
        if key not in arrays or arrays[key].shape != p.data.shape:
            raise FormatError(f"checkpoint entry {key} missing or mis-shaped")
        p.data = arrays[key].astype(p.data.dtype, copy=True)
    for name, buf in module.named_buffers():
        key = prefix + name
        if key not in arrays or arrays[key].shape != buf.shape:
            raise FormatError(f"checkpoint entry {key} missing or mis-shaped")
        buf[...] = arrays[key]

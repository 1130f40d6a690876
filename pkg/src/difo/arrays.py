"""Directory store: a plain-text manifest plus one flat binary file per array.

Layout of a store directory::

    manifest.txt        key = value lines
    <name>.bin          raw little-endian array data

Array entries in the manifest look like ``array.<name> = <dtype> <d0>x<d1>...``.
Floats are always written as ``<f8``, integers as ``<i8``.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DataError

MANIFEST = "manifest.txt"
FORMAT_VERSION = "1"

_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _as_storable(arr):
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return "f8", arr.astype("<f8", copy=False)
    if arr.dtype.kind in "iub":
        return "i8", arr.astype("<i8", copy=False)
    raise DataError(f"cannot store array of dtype {arr.dtype}")


def _shape_str(shape):
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text):
    if text == "scalar":
        return ()
    return tuple(int(s) for s in text.split("x"))


def save_store(path, arrays: dict, meta: dict | None = None) -> Path:
    """Write ``arrays`` and ``meta`` to ``path`` (created if needed)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format_version = {FORMAT_VERSION}"]
    for key, value in (meta or {}).items():
        if "\n" in str(value) or key.startswith("array."):
            raise DataError(f"invalid manifest entry {key!r}")
        lines.append(f"{key} = {value}")
    for name in sorted(arrays):
        code, arr = _as_storable(arrays[name])
        lines.append(f"array.{name} = {code} {_shape_str(arr.shape)}")
        tmp = path / f"{name}.bin.tmp"
        tmp.write_bytes(np.ascontiguousarray(arr).tobytes())
        os.replace(tmp, path / f"{name}.bin")
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    manifest = path / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest in {path}")
    entries = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{manifest}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def load_store(path):
    """Inverse of :func:`save_store`. Returns ``(arrays, meta)``; meta values are strings."""
    path = Path(path)
    entries = read_manifest(path)
    arrays, meta = {}, {}
    for key, value in entries.items():
        if not key.startswith("array."):
            meta[key] = value
            continue
        name = key[len("array."):]
        code, shape_text = value.split()
        if code not in _DTYPES:
            raise DataError(f"unknown dtype {code!r} for array {name!r}")
        shape = _parse_shape(shape_text)
        raw = (path / f"{name}.bin").read_bytes()
        arr = np.frombuffer(raw, dtype=_DTYPES[code])
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise DataError(f"array {name!r}: manifest says {shape}, file holds {arr.size} values")
        arrays[name] = arr.reshape(shape).copy()
    return arrays, meta

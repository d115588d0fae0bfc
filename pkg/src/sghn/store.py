"""Self-describing binary container used for datasets and checkpoints.

Layout::

    SGHN <format> v<version>\\n
    <one-line JSON manifest>\\n
    <payload: float64 little-endian arrays, back to back, manifest order>

The manifest lists every array's name and shape plus the total payload size,
so truncation and shape tampering are both detectable.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

VERSION = 1
_DTYPE = np.dtype("<f8")


class FormatError(ValueError):
    """Base class for unreadable container files."""


class CorruptFileError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


def write(path: str | os.PathLike, fmt: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=_DTYPE)
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    payload = b"".join(blobs)
    manifest = {"format": fmt, "version": VERSION, "meta": meta,
                "arrays": entries, "payload_bytes": len(payload)}
    header = f"SGHN {fmt} v{VERSION}\n".encode()
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + body + payload)
    os.replace(tmp, path)


def read(path: str | os.PathLike, fmt: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns ``(meta, arrays)``; raises :class:`FormatError` subclasses."""
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or second < 0:
        raise CorruptFileError(f"{path}: missing header or manifest")
    magic = raw[:first].decode(errors="replace")
    if magic != f"SGHN {fmt} v{VERSION}":
        if magic.startswith(f"SGHN {fmt} v"):
            raise FormatError(f"{path}: unsupported version {magic!r}, expected v{VERSION}")
        raise CorruptFileError(f"{path}: not a {fmt} file (header {magic!r})")
    try:
        manifest = json.loads(raw[first + 1:second])
        entries = manifest["arrays"]
        declared = int(manifest["payload_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: unreadable manifest ({exc})") from None
    payload = raw[second + 1:]
    if len(payload) != declared:
        raise CorruptFileError(f"{path}: payload is {len(payload)} bytes, manifest declares {declared}")
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) * _DTYPE.itemsize for e in entries]
    if sum(sizes) != declared:
        raise ShapeMismatchError(f"{path}: manifest shapes need {sum(sizes)} bytes, payload has {declared}")
    arrays = {}
    offset = 0
    for e, size in zip(entries, sizes):
        arrays[e["name"]] = np.frombuffer(payload, _DTYPE, size // _DTYPE.itemsize, offset) \
            .reshape(tuple(e["shape"])).astype(np.float64)
        offset += size
    return manifest["meta"], arrays

"""Checkpoints: a plain-text manifest plus one little-endian float32 blob.

Manifest layout, one tensor per line after the header::

    # agnet-checkpoint v1 blob=<file>
    <name>\t<d0,d1,...>\tfloat32\t<byte offset>
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .layers import Module
from .tensor import ShapeError

HEADER = "# agnet-checkpoint v1"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def blob_path(manifest) -> Path:
    return Path(manifest).with_suffix(".bin")


def save_checkpoint(model: Module, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = blob_path(path)
    lines = [f"{HEADER} blob={blob.name}"]
    offset = 0
    chunks = []
    for name, arr in model.state_dict().items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE)
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{shape}\tfloat32\t{offset}")
        chunks.append(data.tobytes())
        offset += data.nbytes
    # write the blob first so a manifest never points at a missing blob
    tmp = blob.with_suffix(".bin.tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(blob)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)
    return path


def read_manifest(path) -> Tuple[Path, List[Tuple[str, Tuple[int, ...], int]]]:
    path = Path(path)
    text = path.read_text().splitlines()
    if not text or not text[0].startswith(HEADER):
        raise CheckpointError(f"{path}: not an agnet checkpoint manifest")
    blob = path.parent / text[0].split("blob=", 1)[1].strip()
    entries = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        try:
            name, shape, dtype, offset = line.split("\t")
        except ValueError:
            raise CheckpointError(f"{path}:{lineno}: expected 4 tab-separated fields") from None
        if dtype != "float32":
            raise CheckpointError(f"{path}:{lineno}: unsupported dtype {dtype}")
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        entries.append((name, dims, int(offset)))
    return blob, entries


def load_state(path) -> Dict[str, np.ndarray]:
    blob, entries = read_manifest(path)
    raw = blob.read_bytes()
    state = {}
    for name, dims, offset in entries:
        nbytes = int(np.prod(dims)) * _DTYPE.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{blob}: {name} runs past the end of the blob")
        state[name] = np.frombuffer(raw, dtype=_DTYPE, count=int(np.prod(dims)), offset=offset).reshape(dims)
    return state


def load_checkpoint(model: Module, path) -> Module:
    """Load weights into ``model``; any name or shape mismatch raises CheckpointError."""
    try:
        model.load_state_dict(load_state(path))
    except ShapeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model

"""Checkpoint files: one JSON header line, then raw little-endian float64 arrays.

The header holds ``dims``, ``seed``, ``step`` and a ``tensors`` index of
``{name, shape, offset, count}`` entries (offset/count in float64 elements,
in file order).  Any other keys are caller metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "dualseg-ckpt/1"


class CheckpointError(ValueError):
    pass


def save(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    index, offset = [], 0
    for name, arr in arrays.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    head = {"format": FORMAT, **header, "tensors": index}
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    if b"\n" in blob:
        raise CheckpointError("header must serialise to a single line")
    with open(path, "wb") as fh:
        fh.write(blob + b"\n")
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n")
    if cut < 0:
        raise CheckpointError(f"{path}: missing header line")
    head = json.loads(raw[:cut])
    if head.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {head.get('format')!r}")
    body = np.frombuffer(raw[cut + 1 :], dtype="<f8")
    arrays = {}
    for entry in head["tensors"]:
        lo, n = entry["offset"], entry["count"]
        if lo + n > body.size:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = body[lo : lo + n].reshape(entry["shape"]).astype(np.float64)
    return head, arrays

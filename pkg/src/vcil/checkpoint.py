"""Parameter checkpoints: one JSON header line, then a raw little-endian float64 blob.

The header lists every tensor's name, shape and offset so a checkpoint can be
read back bit-exactly without the model that wrote it.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "vcil-ckpt"
VERSION = 1


class CheckpointError(ValueError):
    pass


def header_for(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, offset = [], 0
    for name, a in arrays.items():
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
    head = {"format": FORMAT, "version": VERSION, "dtype": "<f8", "count": offset,
            "tensors": entries, "meta": meta or {}}
    return (json.dumps(head, sort_keys=True, separators=(",", ":")) + "\n").encode()


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    return header_for(arrays, meta) + blob


def loads(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing checkpoint header")
    try:
        head = json.loads(raw[:nl])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    if head.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} file")
    if head.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {head.get('version')}")
    flat = np.frombuffer(raw[nl + 1:], dtype="<f8")
    if flat.size != head["count"]:
        raise CheckpointError(f"blob holds {flat.size} values, header declares {head['count']}")
    out = {}
    for e in head["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        out[e["name"]] = flat[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return out, head["meta"]


def save(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> int:
    """Write the checkpoint; returns its size in bytes."""
    raw = dumps(arrays, meta)
    Path(path).write_bytes(raw)
    return len(raw)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def model_arrays(model, names=None) -> dict[str, np.ndarray]:
    names = list(model.params) if names is None else list(names)
    return {n: model.params[n].data for n in names}


def restore(model, arrays: dict[str, np.ndarray]) -> None:
    """Copy saved values into an already-built model (same registry)."""
    missing = set(arrays) - set(model.params)
    if missing:
        raise CheckpointError(f"checkpoint tensors not in model: {sorted(missing)}")
    for n, a in arrays.items():
        p = model.params[n]
        if p.data.shape != a.shape:
            raise CheckpointError(f"shape mismatch for {n}: {list(a.shape)} vs {list(p.data.shape)}")
        p.data[...] = a

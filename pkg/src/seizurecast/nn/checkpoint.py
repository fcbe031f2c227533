"""Parameter checkpoints: named tensors plus a JSON metadata record in one npz."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .graph import ParameterStore

_META_KEY = "__meta__"


def save_checkpoint(path, params: ParameterStore, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = params.state()
    if _META_KEY in arrays:
        raise KeyError(f"parameter name {_META_KEY!r} is reserved")
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (named tensors, metadata)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data[_META_KEY]).decode())
        tensors = {k: data[k] for k in data.files if k != _META_KEY}
    return tensors, meta

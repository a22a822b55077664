"""Binary field snapshots with JSON sidecars."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_field(path, array, meta):
    """Write ``array`` as little-endian complex128 (row-major) plus ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype="<c16")
    path.write_bytes(data.tobytes())
    sidecar = dict(meta, shape=list(data.shape), dtype="complex128-le")
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_field(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<c16").reshape(meta["shape"])
    return data.astype(complex), meta

"""Checkpoint serialization: JSON with base64-encoded little-endian arrays.

The format is value-exact: raw array bytes round-trip untouched.

Layout (``format`` = "tjunction-params-v1"):

    {
      "format": "tjunction-params-v1",
      "step_count": int,
      "base_lr": float,
      "total_updates": int,
      "metadata": {...},                      # caller-owned (head registry etc.)
      "params": {name: {"shape": [...], "dtype": "<f4", "data": b64}},
      "moments": {name: {"m": b64, "v": b64}},
    }
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any

import numpy as np

from .optim import ParamStore

FORMAT = "tjunction-params-v1"


def _encode(arr: np.ndarray) -> dict[str, Any]:
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return {
        "shape": list(arr.shape),
        "dtype": le.dtype.str,
        "data": base64.b64encode(np.ascontiguousarray(le).tobytes()).decode("ascii"),
    }


def _decode(doc: dict[str, Any]) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(doc["dtype"])).reshape(doc["shape"])
    return arr.astype(arr.dtype.newbyteorder("="))


def save_checkpoint(path: str | Path, store: ParamStore, metadata: dict[str, Any] | None = None) -> None:
    doc = {
        "format": FORMAT,
        "step_count": store.step_count,
        "base_lr": store.base_lr,
        "total_updates": store.total_updates,
        "metadata": metadata or {},
        "params": {name: _encode(t.data) for name, t in store.params.items()},
        "moments": {
            name: {
                "m": base64.b64encode(store.m[name].astype(store.m[name].dtype.newbyteorder("<")).tobytes()).decode("ascii"),
                "v": base64.b64encode(store.v[name].astype(store.v[name].dtype.newbyteorder("<")).tobytes()).decode("ascii"),
            }
            for name in store.params
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict[str, Any]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r} in {path}")
    store = ParamStore(base_lr=doc["base_lr"], total_updates=doc["total_updates"])
    for name, spec in doc["params"].items():
        arr = _decode(spec)
        store.add(name, arr)
        mom = doc["moments"][name]
        dt = np.dtype(spec["dtype"])
        store.m[name] = np.frombuffer(base64.b64decode(mom["m"]), dtype=dt).reshape(spec["shape"]).astype(dt.newbyteorder("=")).copy()
        store.v[name] = np.frombuffer(base64.b64decode(mom["v"]), dtype=dt).reshape(spec["shape"]).astype(dt.newbyteorder("=")).copy()
    store.step_count = doc["step_count"]
    return store, doc["metadata"]

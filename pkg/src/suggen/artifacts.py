"""Deterministic JSON artifact IO shared by every training stage.

Checkpoints are JSON files holding float64 arrays plus the hash of the run
config that produced them, so stale artifacts are detectable.  No timestamps
or absolute paths go into anything hashed.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    """sha256 over the config minus its filesystem locations.

    The top-level "paths" block is excluded so moving a workspace does not
    invalidate artifacts.
    """
    slim = {k: v for k, v in config.items() if k != "paths"}
    return hashlib.sha256(canonical_json(slim).encode("utf-8")).hexdigest()


def save_checkpoint(path: str, kind: str, cfg_hash: str,
                    arrays: dict[str, np.ndarray], meta: dict) -> None:
    payload = {
        "schema": 1,
        "kind": kind,
        "config_hash": cfg_hash,
        "meta": meta,
        "arrays": {
            name: {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
            for name, a in arrays.items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(payload))


def load_checkpoint(path: str, kind: str | None = None) -> dict:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    if kind is not None and payload.get("kind") != kind:
        raise ValueError(f"expected checkpoint kind {kind!r}, "
                         f"got {payload.get('kind')!r}")
    arrays = {
        name: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in payload["arrays"].items()
    }
    payload["arrays"] = arrays
    return payload


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()

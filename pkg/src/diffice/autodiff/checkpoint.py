"""Checkpoint format: one little-endian float32 ``.bin`` per tensor plus ``manifest.json``."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MANIFEST = "manifest.json"


def tensor_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_tensors(directory: str | Path, tensors: Mapping[str, np.ndarray],
                 meta: Mapping[str, Any] | None = None) -> dict:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        raw = tensor_bytes(arr)
        fname = f"{name}.bin"
        (root / fname).write_bytes(raw)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "file": fname, "sha256": sha256(raw)})
    manifest = {"format": "f32le-v1", "tensors": entries,
                "content_hash": sha256("".join(e["sha256"] for e in entries).encode()),
                "meta": dict(meta or {})}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_tensors(directory: str | Path, *, verify: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(directory)
    manifest = json.loads((root / MANIFEST).read_text())
    out: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        raw = (root / e["file"]).read_bytes()
        if verify and sha256(raw) != e["sha256"]:
            raise ValueError(f"checkpoint {root}: hash mismatch for {e['name']}")
        out[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return out, manifest


def save_module(directory: str | Path, module, meta: Mapping[str, Any] | None = None) -> dict:
    return save_tensors(directory, module.state_dict(), meta)


def load_module(directory: str | Path, module) -> dict:
    state, manifest = load_tensors(directory)
    module.load_state_dict(state)
    return manifest


def parameter_hashes(module) -> set[str]:
    return {sha256(tensor_bytes(p)) for p in module.state_dict().values()}

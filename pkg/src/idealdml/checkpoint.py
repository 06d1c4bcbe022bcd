"""Manifest + flat binary tensor storage.

A checkpoint ``foo`` is two files: ``foo.json`` lists every tensor's name,
shape, dtype and byte offset, and ``foo.bin`` holds the little-endian float64
values concatenated in manifest order. Round trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DTYPE = "<f8"
FORMAT = "idealdml-tensors/1"


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> Path:
    manifest_path, bin_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
            entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "float64", "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {"format": FORMAT, "byte_order": "little", "tensors": entries, "metadata": metadata or {}}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, bin_path = _paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: unsupported checkpoint format {manifest.get('format')!r}")
    blob = bin_path.read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise ValueError(f"{bin_path}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(blob[e["offset"]:end], dtype=DTYPE).astype(np.float64)
        tensors[e["name"]] = arr.reshape(e["shape"])
    return tensors, manifest.get("metadata", {})

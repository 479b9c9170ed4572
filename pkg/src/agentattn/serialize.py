"""Directory-of-tensors parameter storage with a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

from .tensor_core import as_tensor, load_tensor, save_tensor

MANIFEST = "manifest.json"
MANIFEST_FORMAT = "agentattn-params"


def save_params(directory, params: dict, meta: dict | None = None) -> Path:
    """Write each array in ``params`` to ``<name>.atns`` and a manifest naming them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in params.items():
        arr = as_tensor(arr)
        fname = f"{name}.atns"
        save_tensor(directory / fname, arr)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": arr.dtype.name})
    manifest = {"format": MANIFEST_FORMAT, "version": 1, "meta": meta or {}, "tensors": entries}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return directory


def load_params(directory):
    """Return ``(params, meta)`` as written by :func:`save_params`."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{directory} does not hold an agentattn parameter manifest")
    params = {}
    for entry in manifest["tensors"]:
        arr = load_tensor(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{entry['name']}: file shape {arr.shape} != manifest {entry['shape']}")
        params[entry["name"]] = arr
    return params, manifest.get("meta", {})

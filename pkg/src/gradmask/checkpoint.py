"""Checkpoint directory: ``manifest.json`` plus one ``params.bin`` blob.

The manifest lists every tensor (name, dtype, shape, byte offset) and the
blob's sha256; optimizer state is stored alongside the model parameters so
a resumed run continues bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError

FORMAT = 1


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def save_tensors(directory, tensors: dict, meta: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    blob = d / "params.bin.tmp"
    with open(blob, "wb") as f:
        for name, t in tensors.items():
            arr = _to_numpy(t)
            raw = arr.tobytes()
            entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            f.write(raw)
            offset += len(raw)
    blob.replace(d / "params.bin")
    digest = hashlib.sha256((d / "params.bin").read_bytes()).hexdigest()
    manifest = {"format": FORMAT, **meta, "tensors": entries, "sha256": digest}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_tensors(directory):
    """Returns ``(manifest, {name: tensor})``; raises IntegrityError on any mismatch."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        raw = (d / "params.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise IntegrityError(f"unreadable checkpoint at {d}: {e}") from None
    if manifest.get("format") != FORMAT or hashlib.sha256(raw).hexdigest() != manifest.get("sha256"):
        raise IntegrityError(f"checkpoint blob at {d} does not match its manifest")
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return manifest, tensors


def optimizer_tensors(optimizer) -> tuple:
    """Split an optimizer state dict into (tensors, json-able param groups)."""
    sd = optimizer.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            tensors[f"optim/{idx}/{key}"] = value if torch.is_tensor(value) else torch.tensor(value)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, groups


def restore_optimizer(optimizer, tensors: dict, groups: list) -> None:
    state = {}
    for name, t in tensors.items():
        if name.startswith("optim/"):
            _, idx, key = name.split("/", 2)
            state.setdefault(int(idx), {})[key] = t
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    optimizer.load_state_dict({"state": state, "param_groups": groups})

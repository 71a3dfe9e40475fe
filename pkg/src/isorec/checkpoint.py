"""JSON-metadata + raw float32 payload checkpoints for torch modules."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .volume import atomic_write_bytes


class CheckpointError(ValueError):
    pass


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def save_state(path, state: dict[str, torch.Tensor], meta: dict) -> None:
    """Write ``state`` tensors (in dict order) as f32le plus a JSON sidecar."""
    json_path, raw_path = _paths(path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    layout, chunks = [], []
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        layout.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes(order="C"))
    payload = b"".join(chunks)
    doc = dict(meta)
    doc["tensors"] = layout
    doc["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    atomic_write_bytes(raw_path, payload)
    atomic_write_bytes(json_path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def load_state(path) -> tuple[dict[str, torch.Tensor], dict]:
    json_path, raw_path = _paths(path)
    try:
        doc = json.loads(json_path.read_text())
        payload = raw_path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {json_path}: {exc}") from exc
    if "tensors" not in doc:
        raise CheckpointError("checkpoint metadata lacks a tensor layout")
    state, pos = {}, 0
    for entry in doc.pop("tensors"):
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = 4 * n
        if pos + nbytes > len(payload):
            raise CheckpointError("checkpoint payload shorter than declared layout")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=pos).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        pos += nbytes
    if pos != len(payload):
        raise CheckpointError("checkpoint payload longer than declared layout")
    return state, doc


def file_hash(path) -> str:
    """SHA-256 over a checkpoint's JSON and payload files."""
    h = hashlib.sha256()
    for p in _paths(path):
        h.update(p.read_bytes())
    return h.hexdigest()


def state_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

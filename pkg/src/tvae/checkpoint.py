"""Single-file checkpoint container.

Layout::

    tvae-checkpoint v1\\n
    <manifest: one line of JSON>\\n
    <raw tensor bytes, little-endian, concatenated in manifest order>

The manifest lists every tensor with its name, shape, dtype and byte offset,
together with the model spec and a run-config snapshot. Writing is
deterministic, so save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .networks import ModelSpec, VAE, build_model

MAGIC = b"tvae-checkpoint"
VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


def save_checkpoint(model: VAE, path, config: dict | None = None, meta: dict | None = None):
    path = Path(path)
    tensors, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        dtype = _DTYPES.get(t.dtype)
        if dtype is None:
            raise CheckpointError(f"tensor {name}: unsupported dtype {t.dtype}")
        data = np.ascontiguousarray(t.detach().cpu().numpy(), dtype=dtype).tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "version": VERSION,
        "spec": model.spec.to_dict(),
        "config": config or {},
        "meta": meta or {},
        "tensors": tensors,
    }
    header = MAGIC + b" v%d\n" % VERSION + json.dumps(manifest, sort_keys=True).encode() + b"\n"
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_manifest(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        first = fh.readline()
        if not first.startswith(MAGIC):
            raise CheckpointError(f"{path}: not a checkpoint file")
        try:
            version = int(first.strip().rsplit(b"v", 1)[1])
        except (IndexError, ValueError):
            raise CheckpointError(f"{path}: unreadable version line") from None
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
        manifest = json.loads(fh.readline())
        blob = fh.read()
    return manifest, blob


def load_checkpoint(path) -> tuple[VAE, dict, dict]:
    """Return ``(model, config_snapshot, meta)``."""
    manifest, blob = read_manifest(path)
    spec = ModelSpec.from_dict(manifest["spec"])
    model = build_model(spec)
    expected = model.state_dict()
    state, seen = {}, set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise CheckpointError(f"tensor {name}: not part of the model")
        shape = tuple(entry["shape"])
        if shape != tuple(expected[name].shape):
            raise CheckpointError(
                f"tensor {name}: manifest shape {shape} does not match model shape {tuple(expected[name].shape)}"
            )
        dtype = np.dtype(entry["dtype"])
        if entry["nbytes"] != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"tensor {name}: byte count {entry['nbytes']} disagrees with shape {shape}")
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(blob):
            raise CheckpointError(f"tensor {name}: payload truncated")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=start)
        state[name] = torch.from_numpy(arr.reshape(shape).astype(dtype.newbyteorder("="))).to(_TORCH[entry["dtype"]])
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"tensors missing from checkpoint: {', '.join(sorted(missing))}")
    if state and next(iter(state.values())).dtype == torch.float64:
        model = model.double()
    model.load_state_dict(state)
    model.eval()
    return model, manifest["config"], manifest["meta"]

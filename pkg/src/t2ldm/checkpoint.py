"""Checkpoint archive: a JSON manifest followed by raw float32 payloads.

Layout: u32 manifest length (little-endian), the UTF-8 JSON manifest, then the
concatenation of every tensor's float32 little-endian bytes in manifest order.
The manifest carries a version field ("t2ldm-ckpt-1"), an arbitrary config
dict, and per-tensor name/shape records. Tensor names are namespaced by the
caller (dn., gn., ema., control.).
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

CHECKPOINT_VERSION = "t2ldm-ckpt-1"


def module_arrays(module: torch.nn.Module, prefix: str) -> dict:
    """Named parameters and buffers of a module as float32 arrays."""
    out = {}
    state = module.state_dict()
    for name, tensor in state.items():
        if not tensor.is_floating_point():
            raise ValueError(f"non-float state entry {name!r} cannot be archived")
        out[prefix + name] = tensor.detach().cpu().numpy().astype("<f4")
    return out


def load_into(module: torch.nn.Module, tensors: dict, prefix: str) -> None:
    """Load every archived tensor under prefix into the module (strict)."""
    state = {}
    for name, arr in tensors.items():
        if name.startswith(prefix):
            state[name[len(prefix):]] = torch.as_tensor(np.array(arr, dtype=np.float32))
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise ValueError(f"checkpoint is missing {sorted(missing)[:3]} under {prefix!r}")
    module.load_state_dict(state)


def save_checkpoint(path, tensors: dict, config: dict, extra: dict | None = None) -> None:
    records = []
    blobs = []
    for name in tensors:
        arr = tensors[name]
        if torch.is_tensor(arr):
            arr = arr.detach().cpu().numpy()
        arr = np.asarray(arr, dtype="<f4")
        records.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "extra": extra or {},
        "tensors": records,
    }
    body = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(body)))
        fh.write(body)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple:
    """Returns (tensors, config, extra); tensors maps name -> float32 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError("truncated checkpoint")
    (mlen,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + mlen:
        raise ValueError("truncated checkpoint manifest")
    manifest = json.loads(raw[4:4 + mlen].decode("utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    tensors = {}
    offset = 4 + mlen
    for rec in manifest["tensors"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise ValueError(f"truncated payload for tensor {rec['name']!r}")
        tensors[rec["name"]] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape)
        offset = end
    if offset != len(raw):
        raise ValueError("trailing bytes after declared payloads")
    return tensors, manifest["config"], manifest.get("extra", {})

"""Single-file, versioned checkpoint archive.

Layout of the archive (a ``torch.save`` dictionary)::

    magic    "DARKSIDE-CKPT"
    version  FORMAT_VERSION
    kind     "gan" | "embedding" | "edges"
    blobs    {name: state_dict}
    optim    {name: optimizer state_dict}
    rng      {"numpy": bit generator state, "torch": CPU RNG state}
    config   JSON-compatible config echo
"""
from __future__ import annotations

import os
from pathlib import Path

import torch

MAGIC = "DARKSIDE-CKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind, blobs, optim=None, rng=None, config=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "kind": kind,
        "blobs": blobs,
        "optim": optim or {},
        "rng": rng or {},
        "config": config or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, kind=None) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint of this package")
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {payload.get('version')}, expected {FORMAT_VERSION}")
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"{path} holds a {payload['kind']!r} checkpoint, expected {kind!r}")
    return payload

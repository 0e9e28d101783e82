"""Bit-exact checkpoint serialization.

Layout: 8-byte magic, little-endian u32 header length, a JSON header
(format version, model config, frozen-group names, free-form meta, and a
tensor directory with byte offsets), then raw little-endian float32 tensor
payloads in directory order.  Saving and loading round-trips every bit, so
freeze soundness and rerun reproducibility can be checked by digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Iterable, Tuple

import numpy as np
import torch

from .errors import CheckpointError
from .model import GridLM, ModelConfig, param_groups

MAGIC = b"GRIDLM01"
FORMAT_VERSION = 1


def _tensor_bytes(p: torch.Tensor) -> bytes:
    return np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f4").tobytes()


def group_digests(model: GridLM, groups: Iterable[str] = None) -> Dict[str, str]:
    """sha256 of each group's concatenated f32 bytes, in parameter order."""
    out = {}
    for name, params in param_groups(model).items():
        if groups is not None and name not in groups:
            continue
        h = hashlib.sha256()
        for _, p in params:
            h.update(_tensor_bytes(p))
        out[name] = h.hexdigest()
    return out


def save_checkpoint(model: GridLM, meta: Dict, path, frozen: Iterable[str] = ()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    payload = bytearray()
    for group, params in param_groups(model).items():
        tensors = []
        for name, p in params:
            raw = _tensor_bytes(p)
            tensors.append(
                {"name": name, "shape": list(p.shape), "offset": len(payload), "nbytes": len(raw)}
            )
            payload.extend(raw)
        directory.append({"name": group, "tensors": tensors})
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "frozen": sorted(frozen),
        "meta": meta,
        "groups": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def read_header(path) -> Dict:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        raw_len = f.read(4)
        if len(raw_len) != 4:
            raise CheckpointError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<I", raw_len)
        blob = f.read(hlen)
        if len(blob) != hlen:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')!r}")
    return header


def load_checkpoint(path) -> Tuple[GridLM, Dict]:
    """Rebuild the model from a checkpoint; returns (model, header)."""
    path = Path(path)
    header = read_header(path)
    config = ModelConfig.from_dict(header["config"])
    model = GridLM(config)
    with open(path, "rb") as f:
        data = f.read()
    (hlen,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    body_start = len(MAGIC) + 4 + hlen
    params = dict(model.named_parameters())
    seen = set()
    with torch.no_grad():
        for group in header["groups"]:
            for entry in group["tensors"]:
                name = entry["name"]
                if name not in params:
                    raise CheckpointError(f"{path}: unknown tensor {name!r}")
                p = params[name]
                if list(p.shape) != entry["shape"]:
                    raise CheckpointError(
                        f"{path}: tensor {name!r} shape {entry['shape']} does not match model {list(p.shape)}"
                    )
                start = body_start + entry["offset"]
                end = start + entry["nbytes"]
                if end > len(data):
                    raise CheckpointError(f"{path}: truncated payload at {name!r}")
                arr = np.frombuffer(data[start:end], dtype="<f4").reshape(entry["shape"])
                p.copy_(torch.from_numpy(arr.copy()))
                seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    return model, header


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

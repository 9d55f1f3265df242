"""Versioned model checkpoints.

A checkpoint is a zip archive (``.npz`` by convention) holding one ``.npy``
entry per array under ``param/<name>``, optional extra groups such as the
trainer's ``current/``, ``adam_m/`` and ``adam_v/``, and a JSON
``manifest.json`` with the format version, model kind and config, the
normalization stats, free-form metadata and every tensor's shape. Entries
carry a fixed zip timestamp so identical content gives identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, Weights, check_kind, param_shapes, validate_weights
from .signals import NormStats

FORMAT = "wkbp-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    kind: str
    config: ModelConfig
    weights: Weights
    norm: Optional[NormStats] = None
    meta: dict = field(default_factory=dict)
    groups: Dict[str, Weights] = field(default_factory=dict)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint):
    check_kind(ckpt.kind)
    validate_weights(ckpt.weights, ckpt.config, ckpt.kind)
    groups = {"param": ckpt.weights, **ckpt.groups}
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": ckpt.kind,
        "config": asdict(ckpt.config),
        "norm": ckpt.norm.to_dict() if ckpt.norm is not None else None,
        "meta": ckpt.meta,
        "tensors": {g: {k: list(v.shape) for k, v in arrs.items()} for g, arrs in groups.items()},
    }
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        entries = [("manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())]
        for g, arrs in groups.items():
            for name in sorted(arrs):
                entries.append((f"{g}/{name}.npy", _npy_bytes(arrs[name])))
        for name, data in entries:
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint, validating every tensor shape against its config."""
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"{path}: no manifest") from None
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} file")
        if manifest.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {manifest.get('version')}")
        groups: Dict[str, Weights] = {}
        for g, shapes in manifest["tensors"].items():
            groups[g] = {}
            for name, shape in shapes.items():
                try:
                    raw = zf.read(f"{g}/{name}.npy")
                except KeyError:
                    raise CheckpointError(f"{path}: missing tensor {g}/{name}") from None
                arr = np.lib.format.read_array(io.BytesIO(raw), allow_pickle=False)
                if list(arr.shape) != shape:
                    raise CheckpointError(f"{path}: {g}/{name} has shape {arr.shape}, manifest says {shape}")
                groups[g][name] = np.array(arr)  # own, aligned, writable memory
    kind = manifest["kind"]
    weights = groups.pop("param")
    try:
        config = ModelConfig(**manifest["config"])
        check_kind(kind)
        validate_weights(weights, config, kind)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    # canonical parameter order, as produced by init_weights
    order = list(param_shapes(config, kind))
    weights = {k: weights[k] for k in order}
    for g, arrs in groups.items():
        if set(arrs) == set(order):
            groups[g] = {k: arrs[k] for k in order}
    norm = NormStats.from_dict(manifest["norm"]) if manifest.get("norm") else None
    return Checkpoint(kind, config, weights, norm, manifest.get("meta", {}), groups)

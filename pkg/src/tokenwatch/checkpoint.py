"""Single-file classifier checkpoints.

Layout: an 8-byte little-endian unsigned manifest length, the canonical
JSON manifest (sorted keys, no whitespace), then every tensor's data
concatenated as contiguous little-endian float64.  Canonical manifests
make save(load(path)) byte-identical to the original file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np
import torch

from .errors import ValidationError
from .features import NormStats
from .models import (
    DTYPE,
    Classifier,
    EpisodeClassifier,
    StepClassifier,
    StepEncoderNet,
    config_from_dict,
    config_to_dict,
)

FORMAT_VERSION = 1
_LEN_STRUCT = struct.Struct("<Q")


def _manifest_for(model: Classifier) -> dict:
    tensors = []
    offset = 0
    for name, param in sorted(model.net.state_dict().items()):
        if name == "pos_encoding":
            continue  # deterministic buffer, rebuilt from config
        numel = param.numel()
        tensors.append(
            {
                "name": name,
                "shape": list(param.shape),
                "offset": offset,
                "numel": numel,
            }
        )
        offset += numel
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "config": config_to_dict(model.config),
        "tensors": tensors,
        "norm": (
            None
            if model.norm is None
            else {
                "mean": [float(v) for v in model.norm.mean],
                "std": [float(v) for v in model.norm.std],
            }
        ),
        "metadata": model.metadata,
    }
    return manifest


def save_checkpoint(model: Classifier, path: Union[str, Path]) -> None:
    manifest = _manifest_for(model)
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )
    state = model.net.state_dict()
    with Path(path).open("wb") as fh:
        fh.write(_LEN_STRUCT.pack(len(blob)))
        fh.write(blob)
        for entry in manifest["tensors"]:
            tensor = state[entry["name"]].detach().to(DTYPE).contiguous()
            data = tensor.numpy().astype("<f8", copy=False)
            fh.write(data.tobytes())


def load_checkpoint(path: Union[str, Path]) -> Classifier:
    raw = Path(path).read_bytes()
    if len(raw) < _LEN_STRUCT.size:
        raise ValidationError(f"checkpoint {path}: file too short for header")
    (blob_len,) = _LEN_STRUCT.unpack_from(raw)
    header_end = _LEN_STRUCT.size + blob_len
    if len(raw) < header_end:
        raise ValidationError(f"checkpoint {path}: truncated manifest")
    try:
        manifest = json.loads(raw[_LEN_STRUCT.size : header_end])
    except json.JSONDecodeError as exc:
        raise ValidationError(f"checkpoint {path}: corrupt manifest ({exc})") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ValidationError(
            f"checkpoint {path}: unsupported format version {version!r} "
            f"(expected {FORMAT_VERSION})"
        )
    kind = manifest.get("kind")
    if kind not in ("step", "episode"):
        raise ValidationError(f"checkpoint {path}: unknown kind {kind!r}")

    cfg = config_from_dict(kind, manifest["config"])
    net = StepEncoderNet(cfg)
    payload = raw[header_end:]
    total = sum(entry["numel"] for entry in manifest["tensors"])
    if len(payload) != total * 8:
        raise ValidationError(
            f"checkpoint {path}: payload holds {len(payload)} bytes, "
            f"expected {total * 8}"
        )
    state = net.state_dict()
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in state:
            raise ValidationError(f"checkpoint {path}: unknown tensor {name!r}")
        if tuple(state[name].shape) != shape:
            raise ValidationError(
                f"checkpoint {path}: tensor {name!r} has shape {shape}, "
                f"model expects {tuple(state[name].shape)}"
            )
        start = entry["offset"] * 8
        arr = np.frombuffer(
            payload, dtype="<f8", count=entry["numel"], offset=start
        ).reshape(shape)
        state[name] = torch.from_numpy(arr.copy()).to(DTYPE)
    net.load_state_dict(state)

    norm = None
    if manifest.get("norm") is not None:
        norm = NormStats(
            mean=np.asarray(manifest["norm"]["mean"], dtype=np.float64),
            std=np.asarray(manifest["norm"]["std"], dtype=np.float64),
        )
    cls = StepClassifier if kind == "step" else EpisodeClassifier
    return cls(
        config=cfg,
        net=net,
        norm=norm,
        metadata=manifest.get("metadata") or {},
    )

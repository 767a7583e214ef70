"""Versioned named-array checkpoint container (safetensors on disk).

The file holds every parameter array plus string metadata: a format tag,
a version, the kind of model (``"head"`` or ``"detector"``) and its config
as JSON. Loading rebuilds the model from that config and validates every
array shape before copying weights in.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import safetensors.numpy
import torch
from torch import nn

from .exceptions import ConfigurationError

FORMAT_TAG = "firesmoke-checkpoint"
FORMAT_VERSION = "1"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_arrays(path, kind: str, config: dict, arrays: dict[str, np.ndarray]) -> None:
    # one metadata key: safetensors does not keep multi-key metadata order stable
    header = json.dumps(
        {"config": config, "format": FORMAT_TAG, "kind": kind, "version": FORMAT_VERSION},
        sort_keys=True,
    )
    tensors = {k: np.ascontiguousarray(arrays[k]) for k in sorted(arrays)}
    atomic_write_bytes(path, safetensors.numpy.save(tensors, metadata={FORMAT_TAG: header}))


def load_arrays(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
        arrays = safetensors.numpy.load(raw)
        header_len = int.from_bytes(raw[:8], "little")
        metadata = json.loads(json.loads(raw[8 : 8 + header_len])["__metadata__"][FORMAT_TAG])
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ConfigurationError(f"{path}: not a readable checkpoint ({exc})") from None
    if metadata.get("format") != FORMAT_TAG:
        raise ConfigurationError(f"{path}: missing checkpoint format tag")
    if metadata.get("version") != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {metadata.get('version')!r}")
    return metadata["kind"], metadata["config"], arrays


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_checked(module: nn.Module, arrays: dict[str, np.ndarray]) -> nn.Module:
    expected = module.state_dict()
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise ConfigurationError(f"checkpoint arrays do not match config: missing {missing[:4]}, unexpected {extra[:4]}")
    for k, v in expected.items():
        if tuple(arrays[k].shape) != tuple(v.shape):
            raise ConfigurationError(f"array {k!r} has shape {arrays[k].shape}, config implies {tuple(v.shape)}")
    module.load_state_dict({k: torch.from_numpy(np.array(arrays[k])).to(expected[k].dtype) for k in expected})
    return module


def save_head(path, head) -> None:
    save_arrays(path, "head", head.config.to_dict(), state_arrays(head))


def load_head(path):
    from .atdh import ATDHead, HeadConfig

    kind, config, arrays = load_arrays(path)
    if kind != "head":
        raise ConfigurationError(f"{path}: expected a head checkpoint, found {kind!r}")
    return load_state_checked(ATDHead(HeadConfig(**config)), arrays)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Checkpoint container.

File layout::

    b"CTRLSYNC"               8-byte magic
    uint32 little-endian      container version
    uint64 little-endian      header length H
    H bytes                   UTF-8 JSON header (configs, metadata, manifest)
    ...                       raw little-endian float32 tensors

Each manifest entry is ``{"name", "shape", "offset", "nbytes"}`` with the
offset counted from the start of the tensor blob.  Adam moments are stored
as tensors named ``adam.m.<param>`` and ``adam.v.<param>``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..tokenizer import TokenizerConfig
from .config import ModelConfig, model_config_from_dict, to_dict
from .network import check_params, init_params
from .optim import AdamState

MAGIC = b"CTRLSYNC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    model_config: ModelConfig
    tokenizer_config: TokenizerConfig
    params: dict
    initial_distribution: dict
    epoch: int = 0
    optimizer: Optional[AdamState] = None
    device_type: str = "phone"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        check_params(self.params, self.model_config)
        if self.tokenizer_config.d_token != self.model_config.d_token:
            raise CheckpointError(
                f"tokenizer d_token={self.tokenizer_config.d_token} does not match "
                f"model d_token={self.model_config.d_token}"
            )

    @property
    def generation(self):
        return self.tokenizer_config.generation

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.model_config, self.tokenizer_config,
            {k: v.copy() for k, v in self.params.items()},
            dict(self.initial_distribution), self.epoch,
            self.optimizer.copy() if self.optimizer is not None else None,
            self.device_type, dict(self.metadata),
        )


def init_model(cfg: ModelConfig, tok_cfg: TokenizerConfig, initial_distribution: dict,
               seed: int, device_type: str = "phone") -> Checkpoint:
    if tok_cfg.d_token != cfg.d_token:
        raise CheckpointError(
            f"model d_token={cfg.d_token} does not match tokenizer d_token={tok_cfg.d_token}"
        )
    params = init_params(cfg, seed, np.float32)
    return Checkpoint(cfg, tok_cfg, params, dict(initial_distribution), 0, None, device_type,
                      {"init_seed": seed})


def _tensors(ckpt: Checkpoint):
    for k, v in ckpt.params.items():
        yield k, v
    if ckpt.optimizer is not None:
        for k, v in ckpt.optimizer.m.items():
            yield "adam.m." + k, v
        for k, v in ckpt.optimizer.v.items():
            yield "adam.v." + k, v


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest, blobs, offset = [], [], 0
    for name, arr in _tensors(ckpt):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "model_config": to_dict(ckpt.model_config),
        "tokenizer_config": ckpt.tokenizer_config.to_dict(),
        "initial_distribution": ckpt.initial_distribution,
        "epoch": ckpt.epoch,
        "device_type": ckpt.device_type,
        "optimizer_step": ckpt.optimizer.step if ckpt.optimizer is not None else None,
        "metadata": ckpt.metadata,
        "manifest": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{os.fspath(path)!r} is not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
    return header, 20 + hlen


def load_checkpoint(path) -> Checkpoint:
    header, start = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        blob = fh.read()
    tensors = {}
    for ent in header["manifest"]:
        end = ent["offset"] + ent["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"tensor {ent['name']} is truncated")
        arr = np.frombuffer(blob[ent["offset"]:end], dtype="<f4").astype(np.float32)
        tensors[ent["name"]] = arr.reshape(ent["shape"])
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    opt = None
    if header.get("optimizer_step") is not None:
        opt = AdamState(
            int(header["optimizer_step"]),
            {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m.")},
            {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v.")},
        )
    try:
        return Checkpoint(
            model_config_from_dict(header["model_config"]),
            TokenizerConfig.from_dict(header["tokenizer_config"]),
            params,
            header["initial_distribution"],
            int(header["epoch"]),
            opt,
            header.get("device_type", "phone"),
            header.get("metadata", {}),
        )
    except ValueError as exc:
        raise CheckpointError(f"{os.fspath(path)!r}: {exc}") from exc


def init_for_dataset(dataset, cfg: ModelConfig, seed: int) -> Checkpoint:
    """Fresh model whose tokenizer and initial-event distribution come from ``dataset``."""
    from collections import Counter

    from ..tokenizer import fit_scaler
    from ..trace import initial_event_distribution

    tok = fit_scaler(dataset)
    if cfg.d_token != tok.d_token:
        raise CheckpointError(
            f"model d_token={cfg.d_token} does not fit the {dataset.generation.value} "
            f"vocabulary (needs {tok.d_token})"
        )
    device = Counter(s.device_type for s in dataset.streams).most_common(1)[0][0]
    return init_model(cfg, tok, initial_event_distribution(dataset), seed, device)

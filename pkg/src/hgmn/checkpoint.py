"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"HGMNCKPT" | u32 format version | u64 header length | header (UTF-8 JSON,
    sorted keys) | float64 payload

The header lists every array (name, shape) in payload order: model
parameters first, then Adam first and second moments. Equal inputs give
byte-identical files.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ContractError
from .tensor import AdamState

MAGIC = b"HGMNCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    meta: dict = field(default_factory=dict)
    rng_state: dict | None = None


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    for k in ckpt.adam.m:
        arrays.append((f"adam_m/{k}", ckpt.adam.m[k]))
        arrays.append((f"adam_v/{k}", ckpt.adam.v[k]))
    header = {
        "config": ckpt.config.to_dict(),
        "meta": ckpt.meta,
        "rng_state": ckpt.rng_state,
        "adam": {"lr": ckpt.adam.lr, "weight_decay": ckpt.adam.weight_decay,
                 "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps,
                 "step": ckpt.adam.step},
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + payload


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    offset = 20 + hlen
    params, m, v = {}, {}, {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
        kind, name = entry["name"].split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[kind][name] = arr
    if offset != len(blob):
        raise ContractError("checkpoint payload length does not match its header")
    a = header["adam"]
    adam = AdamState(lr=a["lr"], weight_decay=a["weight_decay"], beta1=a["beta1"],
                     beta2=a["beta2"], eps=a["eps"], step=a["step"], m=m, v=v)
    return Checkpoint(ModelConfig.from_dict(header["config"]), params, adam, header["meta"],
                      header["rng_state"])


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())

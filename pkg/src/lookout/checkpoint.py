"""Single-file binary checkpoints for parameters and optimizer state.

Layout (all integers little-endian):

  bytes 0..7    magic ``LKCKPT01``
  bytes 8..11   uint32 header length N
  bytes 12..12+N-1  UTF-8 JSON header
  remainder     concatenated raw payloads, little-endian float64,
                row-major, in exactly the header's entry order

Header schema::

  {"format_version": 1,
   "config_hash": "<sha256 hex of the resolved config text>",
   "meta": {...},                      # free-form (variant, epochs, ...)
   "adam": {"lr", "beta1", "beta2", "eps", "weight_decay", "step"},
   "entries": [{"name": "param.<dotted>", "shape": [...]}, ...]}

Entry names are ``param.<name>`` for parameters and ``adam.m.<name>`` /
``adam.v.<name>`` for Adam's moment buffers. Writes are atomic.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import atomic_write_bytes
from .optim import AdamState

__all__ = ["save_checkpoint", "load_checkpoint", "Checkpoint"]

MAGIC = b"LKCKPT01"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState | None
    config_hash: str
    meta: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    config_hash: str,
    adam: AdamState | None = None,
    meta: dict | None = None,
) -> None:
    entries = []
    payloads = []

    def push(name: str, arr: np.ndarray) -> None:
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        payloads.append(a.tobytes())

    for name in sorted(params):
        push(f"param.{name}", params[name])
    adam_header = None
    if adam is not None:
        adam_header = {
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "weight_decay": adam.weight_decay,
            "step": adam.step,
        }
        for name in sorted(adam.m):
            push(f"adam.m.{name}", adam.m[name])
        for name in sorted(adam.v):
            push(f"adam.v.{name}", adam.v[name])

    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "meta": meta or {},
        "adam": adam_header,
        "entries": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(payloads)
    atomic_write_bytes(Path(path), blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")

    offset = 12 + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing payload bytes")

    params = {
        name[len("param.") :]: arr for name, arr in arrays.items() if name.startswith("param.")
    }
    adam = None
    if header.get("adam") is not None:
        a = header["adam"]
        adam = AdamState(
            lr=a["lr"],
            beta1=a["beta1"],
            beta2=a["beta2"],
            eps=a["eps"],
            weight_decay=a["weight_decay"],
            step=a["step"],
            m={n[len("adam.m.") :]: v for n, v in arrays.items() if n.startswith("adam.m.")},
            v={n[len("adam.v.") :]: v for n, v in arrays.items() if n.startswith("adam.v.")},
        )
    return Checkpoint(
        params=params, adam=adam, config_hash=header["config_hash"], meta=header["meta"]
    )

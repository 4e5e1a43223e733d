"""Versioned binary checkpoint container.

Layout::

    MAGIC (8 bytes) | version (u32 LE) | header length (u64 LE) | JSON header
    | raw little-endian tensor payload | SHA-256 of everything before it (32 bytes)
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import IntegrityError, UnsupportedVersionError

MAGIC = b"EHRTCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    stage: str
    tensors: dict[str, torch.Tensor]
    config: dict = field(default_factory=dict)
    schema: dict | None = None
    vocab: dict | None = None
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped (a state dict)."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for group, tensors in (("tensors", self.tensors), ("optimizer", self.optimizer)):
            for name in sorted(tensors):
                t = tensors[name].detach().cpu().contiguous()
                if t.dtype not in _DTYPES:
                    raise TypeError(f"unsupported tensor dtype {t.dtype} for {name}")
                raw = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[t.dtype]).tobytes()
                entries.append({"group": group, "name": name, "dtype": _DTYPES[t.dtype],
                                "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
                chunks.append(raw)
                offset += len(raw)
        header = json.dumps(
            {"stage": self.stage, "config": self.config, "schema": self.schema,
             "vocab": self.vocab, "meta": self.meta, "entries": entries},
            sort_keys=True, separators=(",", ":"),
        ).encode("utf-8")
        body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < _PREFIX.size + _DIGEST:
            raise IntegrityError("checkpoint is truncated")
        magic, version, header_len = _PREFIX.unpack_from(blob)
        if magic != MAGIC:
            raise IntegrityError("not a checkpoint file (bad magic bytes)")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )
        body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
        if hashlib.sha256(body).digest() != digest:
            raise IntegrityError("checkpoint content hash mismatch")
        start = _PREFIX.size
        header = json.loads(body[start : start + header_len].decode("utf-8"))
        payload = memoryview(body)[start + header_len :]
        groups: dict[str, dict[str, torch.Tensor]] = {"tensors": {}, "optimizer": {}}
        for e in header["entries"]:
            raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
            groups[e["group"]][e["name"]] = torch.from_numpy(arr).to(_TORCH[e["dtype"]])
        return cls(header["stage"], groups["tensors"], header["config"], header["schema"],
                   header["vocab"], groups["optimizer"], header["meta"])

    @property
    def content_hash(self) -> str:
        return self.to_bytes()[-_DIGEST:].hex()


def save_checkpoint(ckpt: Checkpoint, path, force: bool = True) -> str:
    """Write ``ckpt`` atomically; returns its content hash."""
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    blob = ckpt.to_bytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return blob[-_DIGEST:].hex()


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())

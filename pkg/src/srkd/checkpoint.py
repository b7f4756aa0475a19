"""Versioned named-tensor checkpoint container with integrity hashing.

Layout: magic "CKPT" | u16 format version | u32 header length | header JSON
| raw float32 payload | 32-byte SHA-256 of (header + payload).  The header
indexes tensors by (name, shape, offset) into the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IntegrityError

MAGIC = b"CKPT"
FORMAT_VERSION = 1
COMPONENTS = ("ae", "teacher", "student")


@dataclass
class CheckpointState:
    component: str
    config: dict
    tensors: dict
    ema: dict = field(default_factory=dict)
    plan: dict | None = None
    step: int = 0

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ConfigurationError(
                f"component must be one of {COMPONENTS}, got {self.component!r}"
            )


def state_dict_to_np(state_dict) -> dict:
    out = {}
    for name, tensor in state_dict.items():
        out[name] = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=np.float32)
    return out


def np_to_state_dict(tensors: dict):
    import torch

    return {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}


def _pack_tensors(groups: dict) -> tuple[list, bytes]:
    index = []
    chunks = []
    offset = 0
    for group, tensors in groups.items():
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            raw = arr.tobytes(order="C")
            index.append(
                {"group": group, "name": name, "shape": list(arr.shape), "offset": offset,
                 "nbytes": len(raw)}
            )
            chunks.append(raw)
            offset += len(raw)
    return index, b"".join(chunks)


def save_checkpoint(path, state: CheckpointState) -> str:
    """Write the checkpoint; returns the hex content hash."""
    index, payload = _pack_tensors({"tensors": state.tensors, "ema": state.ema})
    header = {
        "component": state.component,
        "config": state.config,
        "plan": state.plan,
        "step": state.step,
        "index": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    digest = hashlib.sha256(header_bytes + payload).digest()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(digest)
    return digest.hex()


def load_checkpoint(path, expect_component: str | None = None) -> CheckpointState:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint container")
    version, header_len = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise IntegrityError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    header_end = 10 + header_len
    if len(raw) < header_end + 32:
        raise IntegrityError(f"{path}: truncated checkpoint")
    header_bytes = raw[10:header_end]
    payload = raw[header_end:-32]
    digest = raw[-32:]
    if hashlib.sha256(header_bytes + payload).digest() != digest:
        raise IntegrityError(f"{path}: content hash mismatch; file is corrupt")
    header = json.loads(header_bytes.decode("utf-8"))
    if expect_component is not None and header["component"] != expect_component:
        raise ConfigurationError(
            f"{path}: checkpoint holds component {header['component']!r}, "
            f"expected {expect_component!r}"
        )
    groups: dict = {"tensors": {}, "ema": {}}
    for entry in header["index"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + n], dtype="<f4").reshape(entry["shape"])
        groups[entry["group"]][entry["name"]] = arr.copy()
    return CheckpointState(
        component=header["component"],
        config=header["config"],
        tensors=groups["tensors"],
        ema=groups["ema"],
        plan=header.get("plan"),
        step=header.get("step", 0),
    )


def content_hash(path) -> str:
    """Stored integrity hash of a checkpoint file (no recompute)."""
    raw = Path(path).read_bytes()
    if len(raw) < 42 or raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint container")
    return raw[-32:].hex()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

"""Checkpoint container: magic, version, JSON header, raw float32 payload.

Layout (all integers little-endian):

    bytes 0..3   magic "DMOE"
    bytes 4..7   format version (u32)
    bytes 8..11  header length in bytes (u32)
    ...          UTF-8 JSON header
    ...          payload: the tensors as raw little-endian float32, back to
                 back, in exactly the order listed in the header

The header records every tensor's name/shape/offset, the training step, the
data-RNG state, the effective run configuration (as flat text), and a SHA-256
of the payload. JSON is serialized with sorted keys and fixed separators and
tensors are kept as an ordered list, so save -> load -> save reproduces the
file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DMOE"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = "<f4"  # little-endian float32


class CheckpointError(Exception):
    """Malformed or unreadable checkpoint file."""


class ChecksumError(CheckpointError):
    """Payload bytes do not match the recorded SHA-256."""


class VersionError(CheckpointError):
    """Checkpoint was written by a newer format version."""


@dataclass
class Checkpoint:
    """In-memory image of a checkpoint file."""

    step: int
    tensors: dict[str, np.ndarray]
    config_text: str
    rng_state: dict | None = None
    version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    step: int,
    config_text: str,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> Path:
    """Write tensors (in dict order) plus run metadata to ``path``."""
    records = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE).tobytes()
        records.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        )
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "step": int(step),
        "dtype": "float32",
        "config": config_text,
        "rng": rng_state,
        "tensors": records,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        header["extra"] = extra
    header_json = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header_json)) + header_json + payload
    path.write_bytes(blob)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and verify a checkpoint; checksum failures raise ChecksumError."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version > FORMAT_VERSION:
        raise VersionError(
            f"{path} uses format version {version}; this build reads up to {FORMAT_VERSION}"
        )
    if len(blob) < 12 + header_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    payload = blob[12 + header_len :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise ChecksumError(f"{path} payload checksum mismatch")
    tensors: dict[str, np.ndarray] = {}
    for rec in header["tensors"]:
        start, nbytes = rec["offset"], rec["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {rec['name']} overruns the payload")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=PAYLOAD_DTYPE)
        shape = tuple(rec["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {rec['name']} shape/size mismatch")
        tensors[rec["name"]] = arr.reshape(shape).copy()
    return Checkpoint(
        step=int(header["step"]),
        tensors=tensors,
        config_text=header.get("config", ""),
        rng_state=header.get("rng"),
        version=version,
        extra=header.get("extra", {}),
    )

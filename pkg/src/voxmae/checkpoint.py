"""Named-parameter checkpoints with provenance and config fingerprints.

File layout ("VOXCKPT1"): one line of canonical JSON (parameter manifest
with shapes, dtypes and byte offsets, plus fingerprint / provenance /
epoch / seed), a newline, then each parameter's raw little-endian bytes in
manifest order. Parameters are sorted by name at save time, so a
load-then-save round trip is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = "VOXCKPT1"
PROVENANCES = ("mae-pretrained", "scratch", "finetuned")

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def fingerprint(payload: dict) -> str:
    """SHA-256 over a canonical JSON rendering of a config dict."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config_fingerprint: str
    encoder_fingerprint: str
    provenance: str
    epoch: int
    seed: int

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ParseError(f"unknown provenance {self.provenance!r}; expected {PROVENANCES}")


def save_checkpoint(path: str | Path, c: Checkpoint) -> None:
    names = sorted(c.params)
    manifest_params = []
    offset = 0
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(c.params[name])
        if arr.dtype.name not in _DTYPE_CODES:
            raise ParseError(f"parameter {name!r}: unsupported dtype {arr.dtype.name}")
        raw = arr.astype(_DTYPE_CODES[arr.dtype.name], copy=False).tobytes()
        manifest_params.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": offset,
        })
        payload.extend(raw)
        offset += len(raw)
    header = {
        "magic": MAGIC,
        "params": manifest_params,
        "payload_bytes": offset,
        "fingerprint": c.config_fingerprint,
        "encoder_fingerprint": c.encoder_fingerprint,
        "provenance": c.provenance,
        "epoch": c.epoch,
        "seed": c.seed,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
    Path(path).write_bytes(blob + b"\n" + bytes(payload))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError(f"{path}: malformed header (no newline terminator)")
    try:
        header = json.loads(raw[:nl].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: malformed header ({e})") from e
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise ParseError(f"{path}: unknown checkpoint version (magic {header.get('magic')!r})")
    payload = raw[nl + 1:]
    declared = int(header.get("payload_bytes", -1))
    if declared != len(payload):
        raise ParseError(
            f"{path}: payload length mismatch: manifest declares {declared} bytes, "
            f"file holds {len(payload)}")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["params"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        dtype = entry["dtype"]
        if dtype not in _DTYPE_CODES:
            raise ParseError(f"{path}: parameter {name!r} has unsupported dtype {dtype!r}")
        if int(entry["offset"]) != offset:
            raise ParseError(
                f"{path}: manifest inconsistency at parameter {name!r}: "
                f"offset {entry['offset']} but {offset} bytes precede it")
        count = 1
        for s in shape:
            count *= s
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(payload):
            raise ParseError(
                f"{path}: payload too short for parameter {name!r} "
                f"(needs {nbytes} bytes at offset {offset})")
        arr = np.frombuffer(payload[offset:offset + nbytes],
                            dtype=_DTYPE_CODES[dtype]).reshape(shape)
        params[name] = arr.astype(dtype, copy=True)
        offset += nbytes
    if offset != len(payload):
        raise ParseError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return Checkpoint(
        params=params,
        config_fingerprint=header["fingerprint"],
        encoder_fingerprint=header["encoder_fingerprint"],
        provenance=header["provenance"],
        epoch=int(header["epoch"]),
        seed=int(header["seed"]),
    )

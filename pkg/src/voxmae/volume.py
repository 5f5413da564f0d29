"""Single-channel 3D volumes, voxel label maps, and their on-disk format.

File layout ("VOXMAE1"): one line of JSON (the header: magic, extents,
spacing, dtype, label presence), a newline, then raw little-endian payloads
in row-major (D-major) order — float32 voxels first, uint8 labels if
present. The format round-trips bit-exactly and is trivially parseable
from any language.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

MAGIC = "VOXMAE1"


@dataclass
class Volume:
    """A (D, H, W) grid of float32 intensities. Spacing is informational."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ContractError(f"volume must be rank 3, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class LabelMap:
    """Per-voxel integer class ids in [0, num_classes)."""

    classes: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.classes = np.ascontiguousarray(self.classes, dtype=np.uint8)
        if self.classes.ndim != 3:
            raise ContractError(f"label map must be rank 3, got shape {self.classes.shape}")
        if self.classes.size and int(self.classes.max()) >= self.num_classes:
            raise ContractError(
                f"label id {int(self.classes.max())} out of range for {self.num_classes} classes")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.classes.shape


def normalize_volume(v: Volume) -> Volume:
    """Z-score over all voxels; a constant volume maps to all zeros."""
    if v.voxels.size < 2:
        raise ContractError("normalize_volume needs at least 2 voxels")
    x = v.voxels.astype(np.float64)
    mu = x.mean()
    sd = x.std()
    if sd < 1e-12:
        out = np.zeros_like(v.voxels)
    else:
        out = ((x - mu) / sd).astype(np.float32)
    return Volume(out, v.spacing)


def write_volume(path: str | Path, v: Volume, labels: LabelMap | None = None) -> None:
    if labels is not None and labels.extents != v.extents:
        raise ContractError(
            f"label extents {labels.extents} do not match volume extents {v.extents}")
    header = {
        "magic": MAGIC,
        "extents": list(v.extents),
        "spacing": list(v.spacing),
        "dtype": "float32",
        "labels": labels is not None,
    }
    if labels is not None:
        header["label_dtype"] = "uint8"
        header["num_classes"] = labels.num_classes
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii") + b"\n"
    blob += v.voxels.astype("<f4").tobytes()
    if labels is not None:
        blob += labels.classes.astype("u1").tobytes()
    Path(path).write_bytes(blob)


def read_volume(path: str | Path) -> tuple[Volume, LabelMap | None]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError(f"{path}: malformed header (no newline terminator)")
    try:
        header = json.loads(raw[:nl].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: malformed header ({e})") from e
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise ParseError(f"{path}: unknown format version (magic {header.get('magic')!r})")
    try:
        extents = tuple(int(e) for e in header["extents"])
        spacing = tuple(float(s) for s in header["spacing"])
        has_labels = bool(header["labels"])
        dtype = header["dtype"]
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{path}: malformed header field ({e})") from e
    if dtype != "float32":
        raise ParseError(f"{path}: unsupported voxel dtype {dtype!r}")
    if len(extents) != 3 or any(e <= 0 for e in extents):
        raise ParseError(f"{path}: bad extents {extents}")

    n = extents[0] * extents[1] * extents[2]
    payload = raw[nl + 1:]
    expect = n * 4 + (n if has_labels else 0)
    if len(payload) != expect:
        raise ParseError(
            f"{path}: payload length mismatch: expected {n} voxel values "
            f"({expect} bytes), got {len(payload)} bytes")
    voxels = np.frombuffer(payload[:n * 4], dtype="<f4").reshape(extents)
    vol = Volume(voxels.copy(), spacing)
    labels = None
    if has_labels:
        classes = np.frombuffer(payload[n * 4:], dtype="u1").reshape(extents)
        labels = LabelMap(classes.copy(), int(header.get("num_classes", int(classes.max()) + 1)))
    return vol, labels

"""Seeded synthetic phantoms: an ellipsoidal organ containing a spherical
lesion on a uniform background, with per-class intensity means plus Gaussian
noise. Stands in for volumetric scans where no real data is available, and
gives every experiment exact voxel-level ground truth.

Class ids: 0 background, 1 organ, 2 lesion (lesion voxels are labeled 2,
not 1, even though they lie geometrically inside the organ).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .rng import Rng
from .volume import LabelMap, Volume, read_volume, write_volume

SPLITS = ("pretrain", "train", "val", "test")


@dataclass(frozen=True)
class PhantomConfig:
    extents: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 3
    organ_radius_range: tuple[float, float] = (0.22, 0.38)  # fraction of each extent
    lesion_radius_range: tuple[float, float] = (0.08, 0.14)  # fraction of min extent
    class_means: tuple[float, ...] = (0.0, 0.5, 1.0)
    noise_sigma: float = 0.08
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.class_means) != self.num_classes:
            raise ConfigError(
                f"{self.num_classes} classes but {len(self.class_means)} intensity means")
        for name, rng_ in (("organ", self.organ_radius_range), ("lesion", self.lesion_radius_range)):
            lo, hi = rng_
            if not (0.0 < lo <= hi <= 0.5):
                raise ConfigError(f"{name} radius range {rng_} must lie within (0, 0.5]")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if any(e <= 0 for e in self.extents) or len(self.extents) != 3:
            raise ConfigError(f"bad extents {self.extents}")
        # Minimum radii must resolve to at least a couple of voxels, otherwise
        # a class can vanish from the label map entirely.
        min_extent = min(self.extents)
        if self.organ_radius_range[0] * min_extent < 2.0:
            raise ConfigError(
                f"extents {self.extents} too small to fit minimum organ radius "
                f"{self.organ_radius_range[0]} (needs >= 2 voxels)")
        if self.lesion_radius_range[0] * min_extent < 1.0:
            raise ConfigError(
                f"extents {self.extents} too small to fit minimum lesion radius "
                f"{self.lesion_radius_range[0]} (needs >= 1 voxel)")

    def to_dict(self) -> dict:
        return {
            "extents": list(self.extents),
            "num_classes": self.num_classes,
            "organ_radius_range": list(self.organ_radius_range),
            "lesion_radius_range": list(self.lesion_radius_range),
            "class_means": list(self.class_means),
            "noise_sigma": self.noise_sigma,
            "spacing": list(self.spacing),
        }

    @staticmethod
    def from_dict(d: dict) -> "PhantomConfig":
        return PhantomConfig(
            extents=tuple(d["extents"]),
            num_classes=int(d["num_classes"]),
            organ_radius_range=tuple(d["organ_radius_range"]),
            lesion_radius_range=tuple(d["lesion_radius_range"]),
            class_means=tuple(d["class_means"]),
            noise_sigma=float(d["noise_sigma"]),
            spacing=tuple(d.get("spacing", (1.0, 1.0, 1.0))),
        )


def generate_phantom(config: PhantomConfig, rng: Rng) -> tuple[Volume, LabelMap]:
    """One seeded phantom: organ ellipsoid fully inside the volume, lesion
    sphere fully inside the organ, intensities = class mean + noise."""
    config.validate()
    extents = np.array(config.extents, dtype=np.float64)

    lo, hi = config.organ_radius_range
    organ_radii = np.array([rng.uniform_scalar(lo, hi) for _ in range(3)]) * extents
    center = np.array([
        rng.uniform_scalar(organ_radii[i], extents[i] - organ_radii[i]) for i in range(3)
    ])

    llo, lhi = config.lesion_radius_range
    lesion_radius = rng.uniform_scalar(llo, lhi) * float(extents.min())
    # Place the lesion center inside the organ shrunk by the lesion radius:
    # if |(p - c) / radii| <= 1 - r/min(radii), a sphere of radius r at p
    # stays within the ellipsoid.
    shrink = max(0.0, 1.0 - lesion_radius / float(organ_radii.min()))
    direction = np.array([rng.uniform_scalar(-1.0, 1.0) for _ in range(3)])
    norm = np.linalg.norm(direction)
    direction = direction / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])
    radial = rng.uniform_scalar(0.0, 1.0) ** (1.0 / 3.0)
    lesion_center = center + direction * radial * shrink * organ_radii

    zz, yy, xx = np.meshgrid(
        np.arange(config.extents[0], dtype=np.float64),
        np.arange(config.extents[1], dtype=np.float64),
        np.arange(config.extents[2], dtype=np.float64),
        indexing="ij",
    )
    organ_mask = (((zz - center[0]) / organ_radii[0]) ** 2
                  + ((yy - center[1]) / organ_radii[1]) ** 2
                  + ((xx - center[2]) / organ_radii[2]) ** 2) <= 1.0
    lesion_mask = ((zz - lesion_center[0]) ** 2
                   + (yy - lesion_center[1]) ** 2
                   + (xx - lesion_center[2]) ** 2) <= lesion_radius ** 2

    classes = np.zeros(config.extents, dtype=np.uint8)
    classes[organ_mask] = 1
    classes[lesion_mask] = 2

    means = np.array(config.class_means, dtype=np.float64)
    voxels = means[classes]
    if config.noise_sigma > 0:
        voxels = voxels + rng.normal(config.extents, sigma=config.noise_sigma, dtype=np.float64)
    return Volume(voxels.astype(np.float32), config.spacing), LabelMap(classes, config.num_classes)


@dataclass
class Dataset:
    """Phantom volumes partitioned into disjoint named splits.

    Items in the pretrain split carry no label map at all, so no supervised
    code path can touch labels that should not exist.
    """

    items: list[tuple[Volume, LabelMap | None]]
    splits: dict[str, list[int]]
    config: PhantomConfig
    seed: int

    def split_items(self, name: str) -> list[tuple[Volume, LabelMap | None]]:
        if name not in self.splits:
            raise DataError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return [self.items[i] for i in self.splits[name]]

    def labeled_split(self, name: str) -> list[tuple[Volume, LabelMap]]:
        out = []
        for vol, lab in self.split_items(name):
            if lab is None:
                raise DataError(f"split {name!r} contains an unlabeled item")
            out.append((vol, lab))
        return out

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}


def generate_dataset(config: PhantomConfig, counts: dict[str, int] | tuple[int, int, int, int],
                     seed: int) -> Dataset:
    """Deterministic dataset; each item draws from its own (seed, split, index)
    stream so items are independent and order of generation is irrelevant."""
    if not isinstance(counts, dict):
        counts = dict(zip(SPLITS, counts))
    unknown = set(counts) - set(SPLITS)
    if unknown:
        raise ConfigError(f"unknown split names {sorted(unknown)}; expected {SPLITS}")
    for name in SPLITS:
        if counts.get(name, 0) < 0:
            raise ConfigError(f"negative count for split {name!r}")
    config.validate()

    root = Rng(seed, "dataset")
    items: list[tuple[Volume, LabelMap | None]] = []
    splits: dict[str, list[int]] = {name: [] for name in SPLITS}
    for name in SPLITS:
        for i in range(counts.get(name, 0)):
            vol, lab = generate_phantom(config, root.child(name, i))
            splits[name].append(len(items))
            items.append((vol, None if name == "pretrain" else lab))
    return Dataset(items, splits, config, seed)


# -- on-disk dataset directories ------------------------------------------------

MANIFEST_NAME = "dataset.json"


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in SPLITS:
        for k, idx in enumerate(ds.splits[name]):
            vol, lab = ds.items[idx]
            fname = f"{name}_{k:04d}.vox"
            write_volume(out / fname, vol, lab)
            entries.append({"file": fname, "split": name})
    manifest = {
        "magic": "VOXMAE-DATASET1",
        "seed": ds.seed,
        "config": ds.config.to_dict(),
        "items": entries,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return out


def load_dataset(data_dir: str | Path) -> Dataset:
    root = Path(data_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise ParseError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{manifest_path}: malformed manifest ({e})") from e
    if manifest.get("magic") != "VOXMAE-DATASET1":
        raise ParseError(f"{manifest_path}: unknown manifest version")
    config = PhantomConfig.from_dict(manifest["config"])
    items: list[tuple[Volume, LabelMap | None]] = []
    splits: dict[str, list[int]] = {name: [] for name in SPLITS}
    for entry in manifest["items"]:
        name = entry["split"]
        if name not in SPLITS:
            raise ParseError(f"{manifest_path}: unknown split {name!r}")
        vol, lab = read_volume(root / entry["file"])
        if name == "pretrain":
            lab = None
        splits[name].append(len(items))
        items.append((vol, lab))
    return Dataset(items, splits, config, int(manifest["seed"]))

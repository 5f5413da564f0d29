"""Experiment orchestration: scratch vs MAE-pretrained initialization across
label fractions and seeds, with convergence statistics and report emission.

A report is a pure function of its descriptor: the dataset is generated
in-process, all randomness is seeded, and the emitted JSON is canonical
(sorted keys, no timestamps), so re-running an identical descriptor yields
byte-identical files. Arms are independent and may execute in parallel;
results are assembled in sorted arm order either way.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .checkpoint import fingerprint, save_checkpoint
from .errors import ConfigError, ParseError
from .mae import MaeConfig, pretrain
from .metrics import MetricReport, epochs_to_threshold, evaluate
from .phantom import Dataset, PhantomConfig, generate_dataset
from .rng import Rng
from .segmenter import SegConfig, SegModel, finetune, subsample_labeled

INIT_STRATEGIES = ("scratch", "mae-pretrained")

# Dice results reported for the original clinical-data study. Carried in
# every report for context, never produced by this code.
REFERENCE_RESULTS = {
    "status": "paper-reported, not reproduced",
    "note": ("reported on a clinical dataset unavailable here; the synthetic-"
             "phantom numbers in this report are not comparable in absolute terms"),
    "results_text": {"baseline_mean_dice_pct": 86.0, "mae_pretrained_mean_dice_pct": 88.0},
    "strategy_comparison_dice": {"baseline": 86.3, "mae_pretrained": 88.7},
    "model_comparison_dice_pct": {
        "TransUNet": 83.6,
        "Swin-UNETR": 85.1,
        "UNETR": 84.3,
        "nnFormer (Baseline)": 86.4,
        "Proposed Method (MAE + nnFormer)": 88.7,
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig = PhantomConfig()
    counts: tuple[int, int, int, int] = (32, 40, 4, 4)  # pretrain/train/val/test
    dataset_seed: int = 1234
    mae: MaeConfig = MaeConfig()
    seg: SegConfig = SegConfig()
    fractions: tuple[float, ...] = (0.1, 0.25, 1.0)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    dice_threshold: float = 0.6

    def validate(self) -> None:
        self.phantom.validate()
        self.mae.validate()
        self.seg.validate()
        if len(self.counts) != 4 or any(c < 0 for c in self.counts):
            raise ConfigError(f"bad split counts {self.counts}")
        if self.counts[1] < 1 or self.counts[2] < 1 or self.counts[3] < 1:
            raise ConfigError("experiments need train, validation and test items")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not self.fractions:
            raise ConfigError("need at least one label fraction")
        ntrain = self.counts[1]
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigError(f"label fraction {f} outside (0, 1]")
            if math.ceil(f * ntrain) < 1:
                raise ConfigError(f"fraction {f} of {ntrain} train items leaves none")
        if not 0.0 < self.dice_threshold < 1.0:
            raise ConfigError(f"dice threshold {self.dice_threshold} outside (0, 1)")

    def to_dict(self) -> dict:
        return {
            "phantom": self.phantom.to_dict(),
            "counts": list(self.counts),
            "dataset_seed": self.dataset_seed,
            "mae": self.mae.to_dict(),
            "seg": self.seg.to_dict(),
            "fractions": list(self.fractions),
            "seeds": list(self.seeds),
            "dice_threshold": self.dice_threshold,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        return ExperimentConfig(
            phantom=PhantomConfig.from_dict(d["phantom"]),
            counts=tuple(d["counts"]),
            dataset_seed=int(d["dataset_seed"]),
            mae=MaeConfig.from_dict(d["mae"]),
            seg=SegConfig.from_dict(d["seg"]),
            fractions=tuple(float(f) for f in d["fractions"]),
            seeds=tuple(int(s) for s in d["seeds"]),
            dice_threshold=float(d["dice_threshold"]),
        )


@dataclass
class ExperimentArm:
    init: str
    fraction: float
    seed: int
    train_loss: list[float]
    val_dice: list[float]
    final: MetricReport
    epochs_to_threshold: int | None

    def key(self) -> tuple:
        return (self.init, self.fraction, self.seed)

    def to_dict(self) -> dict:
        return {
            "init": self.init,
            "fraction": self.fraction,
            "seed": self.seed,
            "train_loss": self.train_loss,
            "val_dice": self.val_dice,
            "final": self.final.to_dict(),
            "epochs_to_threshold": self.epochs_to_threshold,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentArm":
        return ExperimentArm(
            init=d["init"], fraction=float(d["fraction"]), seed=int(d["seed"]),
            train_loss=[float(x) for x in d["train_loss"]],
            val_dice=[float(x) for x in d["val_dice"]],
            final=MetricReport.from_dict(d["final"]),
            epochs_to_threshold=(None if d["epochs_to_threshold"] is None
                                 else int(d["epochs_to_threshold"])),
        )


@dataclass
class ExperimentReport:
    arms: list[ExperimentArm]
    cells: dict[tuple[str, float], dict]
    config_fingerprint: str
    reference: dict = field(default_factory=lambda: dict(REFERENCE_RESULTS))

    def cell(self, init: str, fraction: float) -> dict:
        return self.cells[(init, fraction)]

    def to_dict(self) -> dict:
        return {
            "arms": [a.to_dict() for a in sorted(self.arms, key=lambda a: a.key())],
            "cells": [
                {"init": k[0], "fraction": k[1], **v}
                for k, v in sorted(self.cells.items())
            ],
            "config_fingerprint": self.config_fingerprint,
            "reference": self.reference,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentReport":
        cells = {}
        for row in d["cells"]:
            row = dict(row)
            key = (row.pop("init"), float(row.pop("fraction")))
            cells[key] = row
        return ExperimentReport(
            arms=[ExperimentArm.from_dict(a) for a in d["arms"]],
            cells=cells,
            config_fingerprint=d["config_fingerprint"],
            reference=d["reference"],
        )


def _median(values: list[float]) -> float:
    return float(statistics.median(values))


def _median_epochs(values: list[int | None]) -> float | None:
    """Median with 'never reached' treated as +inf; None if the median
    itself is unreachable."""
    as_numbers = [math.inf if v is None else float(v) for v in values]
    med = statistics.median(as_numbers)
    return None if math.isinf(med) else float(med)


def _run_arm(dataset: Dataset, config: ExperimentConfig, init: str, fraction: float,
             seed: int, checkpoint_path: str | None) -> ExperimentArm:
    sub = subsample_labeled(dataset, fraction, Rng(seed, "subsample").child(str(fraction)))
    seg_init = "scratch" if init == "scratch" else f"checkpoint:{checkpoint_path}"
    seg_cfg = replace(config.seg, init=seg_init, seed=seed)
    ckpt, train_loss, val_dice = finetune(sub, seg_cfg)
    model = SegModel(seg_cfg, Rng(seed, "finetune").child("init"))
    model.load_parameters(ckpt.params)
    final = evaluate(model.predict, dataset.labeled_split("test"))
    ett = epochs_to_threshold(val_dice, config.dice_threshold)
    return ExperimentArm(init, fraction, seed, train_loss, val_dice, final, ett)


def _arm_task(args) -> tuple[tuple, ExperimentArm]:
    dataset, config, init, fraction, seed, ckpt_path = args
    arm = _run_arm(dataset, config, init, fraction, seed, ckpt_path)
    return arm.key(), arm


def run_experiment(config: ExperimentConfig, threads: int = 1,
                   log=None, work_dir: str | Path | None = None) -> ExperimentReport:
    """Pretrain once per seed, then fine-tune and evaluate every
    (init, fraction, seed) arm. `threads` only parallelizes arms; results
    are identical for any thread count."""
    config.validate()
    if log:
        log(f"generating dataset: counts {config.counts} at {config.phantom.extents}")
    dataset = generate_dataset(config.phantom, config.counts, config.dataset_seed)

    own_tmp = None
    if work_dir is None:
        own_tmp = tempfile.TemporaryDirectory(prefix="voxmae-exp-")
        work_dir = own_tmp.name
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)

    try:
        ckpt_paths: dict[int, str] = {}
        for seed in config.seeds:
            mae_cfg = replace(config.mae, seed=seed)
            if log:
                log(f"pretraining (seed {seed}, {mae_cfg.epochs} epochs)")
            ckpt, _curve = pretrain(dataset, mae_cfg)
            path = work_dir / f"mae_seed{seed}.ckpt"
            save_checkpoint(path, ckpt)
            ckpt_paths[seed] = str(path)

        tasks = []
        for init in INIT_STRATEGIES:
            for fraction in config.fractions:
                for seed in config.seeds:
                    tasks.append((dataset, config, init, fraction, seed,
                                  ckpt_paths[seed] if init == "mae-pretrained" else None))

        results: dict[tuple, ExperimentArm] = {}
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                for key, arm in pool.map(_arm_task, tasks):
                    results[key] = arm
                    if log:
                        log(f"arm done: {key}")
        else:
            for task in tasks:
                key, arm = _arm_task(task)
                results[key] = arm
                if log:
                    log(f"arm done: {key} (final dice "
                        f"{arm.final.mean_foreground_dice:.4f}, "
                        f"epochs-to-threshold {arm.epochs_to_threshold})")

        arms = [results[k] for k in sorted(results)]
        cells: dict[tuple[str, float], dict] = {}
        for init in INIT_STRATEGIES:
            for fraction in config.fractions:
                group = [a for a in arms if a.init == init and a.fraction == fraction]
                cells[(init, fraction)] = {
                    "median_final_mean_dice": _median(
                        [a.final.mean_foreground_dice for a in group]),
                    "median_epochs_to_threshold": _median_epochs(
                        [a.epochs_to_threshold for a in group]),
                    "num_arms": len(group),
                }
        return ExperimentReport(arms, cells, fingerprint(config.to_dict()))
    finally:
        if own_tmp is not None:
            own_tmp.cleanup()


# -- emission -------------------------------------------------------------------

REPORT_JSON = "report.json"
SUMMARY_CSV = "summary.csv"
CURVES_CSV = "curves.csv"


def report_to_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=1)


def emit_report(report: ExperimentReport, out_dir: str | Path) -> dict[str, Path]:
    """Write report.json (canonical), summary.csv (one row per cell) and
    curves.csv (per-arm, per-epoch)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    json_path = out / REPORT_JSON
    json_path.write_text(report_to_json(report))

    summary_path = out / SUMMARY_CSV
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["init", "fraction", "median_final_mean_dice",
                     "median_epochs_to_threshold", "num_arms"])
    for (init, fraction), cell in sorted(report.cells.items()):
        med_ett = cell["median_epochs_to_threshold"]
        writer.writerow([init, fraction, repr(cell["median_final_mean_dice"]),
                         "" if med_ett is None else med_ett, cell["num_arms"]])
    summary_path.write_text(buf.getvalue())

    curves_path = out / CURVES_CSV
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["init", "fraction", "seed", "epoch", "train_loss", "val_mean_dice"])
    for arm in sorted(report.arms, key=lambda a: a.key()):
        for epoch, (loss, dice) in enumerate(zip(arm.train_loss, arm.val_dice), start=1):
            writer.writerow([arm.init, arm.fraction, arm.seed, epoch, repr(loss), repr(dice)])
    curves_path.write_text(buf.getvalue())

    return {"json": json_path, "summary": summary_path, "curves": curves_path}


def load_report(path: str | Path) -> ExperimentReport:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed report ({e})") from e
    return ExperimentReport.from_dict(data)

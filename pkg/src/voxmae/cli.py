"""Command-line surface: gen-data, pretrain, finetune, evaluate, experiment,
gradcheck.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical failure (NaN/Inf).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericsError, VoxmaeError
from .experiment import (ExperimentConfig, emit_report, load_report,
                         run_experiment)
from .mae import MaeConfig, pretrain
from .metrics import evaluate
from .phantom import PhantomConfig, generate_dataset, load_dataset, save_dataset
from .rng import Rng
from .segmenter import SegConfig, SegModel, finetune

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _parse_ints(text: str, expect: int, what: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated integers, got {text!r}")
    if len(values) != expect:
        raise ConfigError(f"{what} needs {expect} integers, got {len(values)}")
    return values


def cmd_gen_data(args) -> int:
    extents = _parse_ints(args.extents, 3, "--extents")
    counts = _parse_ints(args.counts, 4, "--counts")
    config = PhantomConfig(extents=extents, noise_sigma=args.noise_sigma)
    dataset = generate_dataset(config, counts, args.seed)
    out = save_dataset(dataset, args.out_dir)
    print(f"wrote {sum(dataset.counts().values())} volumes to {out} "
          f"(splits {dataset.counts()})")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    overrides = _read_config(args.config)
    config = MaeConfig.from_dict({**MaeConfig().to_dict(), **overrides})
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    dataset = load_dataset(args.data_dir)
    ckpt, curve = pretrain(dataset, config, log=print)
    save_checkpoint(args.out, ckpt)
    print(f"checkpoint -> {args.out}")
    print(f"loss curve: first {curve[0]:.5f}, last {curve[-1]:.5f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    overrides = _read_config(args.config)
    config = SegConfig.from_dict({**SegConfig().to_dict(), **overrides})
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.init is not None:
        config = replace(config, init=args.init)
    dataset = load_dataset(args.data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, train_loss, val_dice = finetune(dataset, config, log=print)
    save_checkpoint(out / "segmenter.ckpt", ckpt)
    with open(out / "curves.csv", "w") as fh:
        fh.write("epoch,train_loss,val_mean_dice\n")
        for epoch, (loss, dice) in enumerate(zip(train_loss, val_dice), start=1):
            fh.write(f"{epoch},{loss!r},{dice!r}\n")
    print(f"checkpoint -> {out / 'segmenter.ckpt'}")
    print(f"final val mean dice: {val_dice[-1]:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    overrides = _read_config(args.config)
    config = SegConfig.from_dict({**SegConfig().to_dict(), **overrides})
    dataset = load_dataset(args.data_dir)
    ckpt = load_checkpoint(args.checkpoint)
    model = SegModel(config, Rng(ckpt.seed, "finetune").child("init"))
    model.load_parameters(ckpt.params)
    report = evaluate(model.predict, dataset.labeled_split(args.split))
    payload = report.to_dict()
    print(json.dumps(payload, sort_keys=True, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=1))
    return EXIT_OK


def cmd_experiment(args) -> int:
    overrides = _read_config(args.config)
    config = ExperimentConfig.from_dict({**ExperimentConfig().to_dict(), **overrides})
    if args.seed is not None:
        seeds = tuple(args.seed + i for i in range(len(config.seeds)))
        config = replace(config, seeds=seeds)
    report = run_experiment(config, threads=args.threads, log=print)
    paths = emit_report(report, args.out)
    print(f"report -> {paths['json']}")
    for (init, fraction), cell in sorted(report.cells.items()):
        print(f"  {init:>14} @ {fraction:>4}: median dice "
              f"{cell['median_final_mean_dice']:.4f}, median epochs-to-threshold "
              f"{cell['median_epochs_to_threshold']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import (DEFAULT_CHECK_SEED, MODEL_TOLERANCE, OP_TOLERANCE,
                         model_checks, op_checks)

    seed = args.seed if args.seed is not None else DEFAULT_CHECK_SEED
    ops = op_checks(seed)
    models = model_checks(seed)
    ok = True
    for name in sorted(ops):
        status = "ok" if ops[name] < OP_TOLERANCE else "FAIL"
        ok &= ops[name] < OP_TOLERANCE
        print(f"op    {name:<16} {ops[name]:.3e}  {status}")
    for name in sorted(models):
        status = "ok" if models[name] < MODEL_TOLERANCE else "FAIL"
        ok &= models[name] < MODEL_TOLERANCE
        print(f"model {name:<22} {models[name]:.3e}  {status}")
    if not ok:
        print("gradient checks FAILED")
        return EXIT_NUMERIC
    print("all gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxmae",
        description="Masked-autoencoder pretraining and fine-tuning for a "
                    "volumetric transformer segmenter on synthetic phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--counts", default="32,40,4,4",
                   help="pretrain,train,val,test item counts")
    p.add_argument("--extents", default="32,32,32")
    p.add_argument("--noise-sigma", type=float, default=PhantomConfig().noise_sigma)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config", default=None, help="JSON config overrides")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised segmentation fine-tuning")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--init", default=None,
                   help="'scratch' or 'checkpoint:PATH'")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", help="Dice evaluation of a checkpoint")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None, help="optional JSON output path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("experiment", help="scratch-vs-pretrained comparison grid")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None,
                   help="base seed; arm seeds count up from it")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--threads", type=int, default=1,
                   help="arm-level parallelism; never changes results")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except VoxmaeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

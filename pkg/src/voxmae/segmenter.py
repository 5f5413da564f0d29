"""Stage 2: transfer the pretrained encoder into a U-shaped segmentation
network and fine-tune with voxel-wise supervision.

The decoder walks back up the encoder hierarchy: each level linearly
expands a coarse token into a 2x2x2 block of finer tokens, concatenates
the matching encoder stage's output as a skip, fuses with a linear layer
and runs one transformer block. A final head maps stage-0 tokens to
patch_dim * num_classes logits, reassembled to a C x D x H x W grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, concat, exp, log_softmax, no_grad
from .checkpoint import Checkpoint, fingerprint, load_checkpoint
from .errors import ConfigError, ContractError, DataError, TransferError
from .mae import encoder_identity
from .nn import Linear, Module
from .optim import AdamW, OptimizerConfig
from .patches import PatchGrid, grid_positions, patchify
from .phantom import Dataset
from .rng import Rng
from .transformer import EncoderConfig, StageFeatures, TransformerBlock, VoxelEncoder
from .volume import LabelMap, Volume, normalize_volume


@dataclass(frozen=True)
class SegConfig:
    encoder: EncoderConfig = EncoderConfig()
    patch_extents: tuple[int, int, int] = (4, 4, 4)
    num_classes: int = 3
    epochs: int = 40
    batch_size: int = 8
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        lr=5e-4, min_lr=1e-6, weight_decay=0.05, betas=(0.9, 0.999),
        warmup_epochs=5.0, clip_norm=1.0))
    init: str = "scratch"  # "scratch" or "checkpoint:PATH"
    freeze_encoder: bool = False
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    dice_eps: float = 1e-5
    seed: int = 0

    @property
    def patch_dim(self) -> int:
        pd, ph, pw = self.patch_extents
        return pd * ph * pw

    def validate(self) -> None:
        self.encoder.validate()
        self.optimizer.validate()
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.init != "scratch" and not self.init.startswith("checkpoint:"):
            raise ConfigError(
                f"init must be 'scratch' or 'checkpoint:PATH', got {self.init!r}")
        if self.dice_eps <= 0:
            raise ConfigError("dice_eps must be positive")

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "patch_extents": list(self.patch_extents),
            "num_classes": self.num_classes,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer.to_dict(),
            "init": self.init,
            "freeze_encoder": self.freeze_encoder,
            "dice_weight": self.dice_weight,
            "ce_weight": self.ce_weight,
            "dice_eps": self.dice_eps,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "SegConfig":
        return SegConfig(
            encoder=EncoderConfig.from_dict(d["encoder"]),
            patch_extents=tuple(d["patch_extents"]),
            num_classes=int(d["num_classes"]),
            epochs=int(d["epochs"]),
            batch_size=int(d["batch_size"]),
            optimizer=OptimizerConfig.from_dict(d["optimizer"]),
            init=d.get("init", "scratch"),
            freeze_encoder=bool(d.get("freeze_encoder", False)),
            dice_weight=float(d.get("dice_weight", 1.0)),
            ce_weight=float(d.get("ce_weight", 1.0)),
            dice_eps=float(d.get("dice_eps", 1e-5)),
            seed=int(d["seed"]),
        )

    def encoder_fingerprint(self) -> str:
        return fingerprint(encoder_identity(self.encoder, self.patch_extents))


@dataclass
class SegPrediction:
    """Logits over classes plus the hard argmax labeling."""

    logits: Tensor  # (C, D, H, W)
    labels: LabelMap


class UpLevel(Module):
    """One decoder level: expand d -> 8*(d/2) (a 2x2x2 grid upsample),
    concat the skip, fuse back to d/2, one transformer block."""

    def __init__(self, rng: Rng, dim: int, heads: int, kind: str,
                 window: tuple[int, int, int], mlp_ratio: int, dtype=np.float32):
        half = dim // 2
        self.expand = Linear(rng.child("expand"), dim, 8 * half, dtype)
        self.fuse = Linear(rng.child("fuse"), 2 * half, half, dtype)
        self.block = TransformerBlock(rng.child("block"), half, heads, kind,
                                      window, mlp_ratio, dtype)


def _expand_tokens(x: Tensor, grid: PatchGrid) -> tuple[Tensor, PatchGrid]:
    """(.., n, 8h) tokens on a coarse grid -> (.., 8n, h) on the grid with
    every axis doubled (patch extents halved)."""
    gd, gh, gw = grid.grid_extents
    lead = x.shape[:-2]
    k = len(lead)
    h = x.shape[-1] // 8
    x = x.reshape(*lead, gd, gh, gw, 2, 2, 2, h)
    x = x.transpose(tuple(range(k)) + tuple(k + a for a in (0, 3, 1, 4, 2, 5, 6)))
    x = x.reshape(*lead, gd * gh * gw * 8, h)
    fine = PatchGrid(grid.volume_extents, tuple(p // 2 for p in grid.patch_extents))
    return x, fine


class SegModel(Module):
    def __init__(self, config: SegConfig, rng: Rng, dtype=np.float32):
        config.validate()
        self.config = config
        enc = config.encoder
        dims = enc.embed_dims
        self.patch_embed = Linear(rng.child("patch_embed"), config.patch_dim, dims[0], dtype)
        self.encoder = VoxelEncoder(rng.child("encoder"), enc, dtype)
        # Decoder levels mirror encoder stages from the bottleneck back up:
        # level i upsamples to the resolution of stage (num_stages - 2 - i)
        # and reuses that stage's attention kind, heads and window.
        self.up = []
        for i in range(enc.num_stages - 1):
            stage = enc.num_stages - 2 - i
            self.up.append(UpLevel(rng.child("up", i), dims[stage + 1], enc.heads[stage],
                                   enc.kinds[stage], enc.window, enc.mlp_ratio, dtype))
        self.head = Linear(rng.child("head"), dims[0],
                           config.patch_dim * config.num_classes, dtype)
        self.dtype = dtype

    def encoder_parameters(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters().items()
                if name.startswith(("patch_embed.", "encoder."))}

    def features(self, tokens: Tensor, grid: PatchGrid) -> StageFeatures:
        x = self.patch_embed(tokens)
        x = x + Tensor(grid_positions(grid, self.config.encoder.embed_dims[0], self.dtype))
        return self.encoder(x, grid, covers_grid=True)

    def forward_volumes(self, volumes: list[Volume]) -> Tensor:
        """Normalized volumes -> logits (B, C, D, H, W)."""
        grid = PatchGrid(volumes[0].extents, self.config.patch_extents)
        tokens = np.stack([patchify(v, self.config.patch_extents).tokens.data
                           for v in volumes]).astype(self.dtype, copy=False)
        feats = self.features(Tensor(tokens), grid)
        return decoder_forward(feats, self)

    def predict(self, volume: Volume) -> SegPrediction:
        """Normalize, run the network, return logits and argmax labels."""
        with no_grad():
            logits = self.forward_volumes([normalize_volume(volume)])
        grid_logits = Tensor(logits.data[0])
        labels = np.argmax(grid_logits.data, axis=0).astype(np.uint8)
        return SegPrediction(grid_logits, LabelMap(labels, self.config.num_classes))


def decoder_forward(features: StageFeatures, model: SegModel) -> Tensor:
    """U-shaped expansion from the bottleneck with per-stage skips; returns
    logits shaped (.., C, D, H, W)."""
    cfg = model.config
    if len(features.stages) != cfg.encoder.num_stages:
        raise ConfigError(
            f"feature pyramid has {len(features.stages)} stages, "
            f"config expects {cfg.encoder.num_stages}")
    x, grid = features.bottleneck
    if grid is None:
        raise ContractError("decoder needs full-grid features, got visible-only features")
    for i, level in enumerate(model.up):
        skip, skip_grid = features.stages[-2 - i]
        x, grid = _expand_tokens(level.expand(x), grid)
        if grid != skip_grid:
            raise ContractError(
                f"decoder level {i}: expanded grid {grid.grid_extents} does not match "
                f"skip grid {None if skip_grid is None else skip_grid.grid_extents}")
        x = level.fuse(concat([x, skip], axis=-1))
        x = level.block(x, grid=grid)
    logits_tokens = model.head(x)  # (.., N0, patch_dim * C)
    return _tokens_to_logits(logits_tokens, grid, cfg.num_classes)


def _tokens_to_logits(tokens: Tensor, grid: PatchGrid, num_classes: int) -> Tensor:
    lead = tokens.shape[:-2]
    k = len(lead)
    gd, gh, gw = grid.grid_extents
    pd, ph, pw = grid.patch_extents
    x = tokens.reshape(*lead, gd, gh, gw, pd, ph, pw, num_classes)
    # -> (.., C, gd, pd, gh, ph, gw, pw)
    x = x.transpose(tuple(range(k)) + tuple(k + a for a in (6, 0, 3, 1, 4, 2, 5)))
    return x.reshape(*lead, num_classes, gd * pd, gh * ph, gw * pw)


def dice_ce_loss(logits: Tensor, labels: np.ndarray | LabelMap,
                 weights: tuple[float, float] = (1.0, 1.0), eps: float = 1e-5) -> Tensor:
    """w_dice * (1 - mean-over-classes soft Dice) + w_ce * mean voxel
    cross-entropy. Accepts (C, D, H, W) or batched (B, C, D, H, W) logits."""
    w_dice, w_ce = weights
    lab = labels.classes if isinstance(labels, LabelMap) else np.asarray(labels)
    batched = logits.ndim == 5
    if not batched and logits.ndim != 4:
        raise ContractError(f"logits must be rank 4 or 5, got {logits.shape}")
    if lab.ndim == logits.ndim - 2:
        lab = lab[None]
    x = logits if batched else logits.reshape(1, *logits.shape)
    b, c = x.shape[0], x.shape[1]
    if lab.shape != (b,) + x.shape[2:]:
        raise ContractError(f"labels shape {lab.shape} does not match logits {x.shape}")
    if lab.size and int(lab.max()) >= c:
        raise DataError(f"label id {int(lab.max())} out of range for {c} classes")

    onehot = np.zeros(x.shape, dtype=x.dtype.type)
    bidx = np.arange(b)[:, None, None, None]
    zidx, yidx, xidx = np.ix_(*[np.arange(s) for s in lab.shape[1:]])
    onehot[bidx, lab.astype(np.int64), zidx, yidx, xidx] = 1.0
    onehot_t = Tensor(onehot)

    ls = log_softmax(x, axis=1)
    voxels = lab.size
    ce = -(ls * onehot_t).sum() * (1.0 / voxels)

    probs = exp(ls)
    spatial = (2, 3, 4)
    inter = (probs * onehot_t).sum(axis=spatial)
    psum = probs.sum(axis=spatial)
    gsum = Tensor(onehot.sum(axis=spatial))
    dice = (inter * 2.0 + eps) / (psum + gsum + eps)  # (B, C)
    soft_dice = dice.mean()
    return ce * w_ce + (1.0 - soft_dice) * w_dice


def transfer_encoder(ckpt: Checkpoint, model: SegModel) -> list[str]:
    """Copy the checkpoint's encoder-side weights into the model, leaving
    decoder and head at their fresh initialization. Returns the transferred
    parameter names."""
    if ckpt.provenance != "mae-pretrained":
        warnings.warn(
            f"transferring weights with provenance {ckpt.provenance!r} "
            "(expected 'mae-pretrained'); proceeding anyway", stacklevel=2)
    model_fp = model.config.encoder_fingerprint()
    encoder_params = model.encoder_parameters()
    if ckpt.encoder_fingerprint != model_fp:
        for name in sorted(set(ckpt.params) | set(encoder_params)):
            if name not in encoder_params:
                raise TransferError(f"checkpoint parameter {name!r} has no counterpart "
                                    "in the target encoder")
            if name not in ckpt.params:
                raise TransferError(f"encoder parameter {name!r} missing from checkpoint")
            have = tuple(ckpt.params[name].shape)
            want = encoder_params[name].shape
            if have != want:
                raise TransferError(
                    f"parameter {name!r}: checkpoint shape {have} != model shape {want}")
        raise TransferError("encoder fingerprint mismatch between checkpoint and model")
    if set(ckpt.params) != set(encoder_params):
        missing = sorted(set(encoder_params) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(encoder_params))
        raise TransferError(
            f"checkpoint parameter names do not match encoder: missing {missing[:3]}, "
            f"unexpected {extra[:3]}")
    return model.load_parameters(ckpt.params)


def subsample_labeled(dataset: Dataset, fraction: float, rng: Rng) -> Dataset:
    """Deterministically keep ceil(fraction * n) train items: seeded shuffle,
    take the first chunk. Other splits are untouched."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"label fraction must be in (0, 1], got {fraction}")
    train = dataset.splits["train"]
    keep = math.ceil(fraction * len(train))
    if keep < 1:
        raise ConfigError(f"fraction {fraction} of {len(train)} train items leaves none")
    order = rng.permutation(len(train))
    chosen = [train[i] for i in order[:keep]]
    splits = dict(dataset.splits)
    splits["train"] = chosen
    return Dataset(dataset.items, splits, dataset.config, dataset.seed)


def finetune(dataset: Dataset, config: SegConfig,
             log=None) -> tuple[Checkpoint, list[float], list[float]]:
    """Supervised training of the whole segmentation network (encoder
    included unless freeze_encoder). Returns the final checkpoint, per-epoch
    train loss, and per-epoch validation mean foreground Dice."""
    from .metrics import evaluate

    config.validate()
    train = dataset.labeled_split("train")
    val = dataset.labeled_split("val")
    if not train or not val:
        raise ConfigError("finetune needs non-empty train and val splits")

    root = Rng(config.seed, "finetune")
    model = SegModel(config, root.child("init"))
    if config.init.startswith("checkpoint:"):
        ckpt_path = config.init.split(":", 1)[1]
        transfer_encoder(load_checkpoint(ckpt_path), model)

    grid = PatchGrid(train[0][0].extents, config.patch_extents)
    tokens_all = np.stack([
        patchify(normalize_volume(v), config.patch_extents).tokens.data for v, _ in train])
    labels_all = np.stack([l.classes for _, l in train])

    params = model.named_parameters()
    trainable = params
    if config.freeze_encoder:
        encoder_names = set(model.encoder_parameters())
        trainable = {k: p for k, p in params.items() if k not in encoder_names}
    n = len(train)
    steps_per_epoch = math.ceil(n / config.batch_size)
    opt = AdamW(trainable, config.optimizer, steps_per_epoch, config.epochs)

    train_curve: list[float] = []
    val_curve: list[float] = []
    for epoch in range(config.epochs):
        order = root.child("order", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            feats = model.features(Tensor(tokens_all[batch]), grid)
            logits = decoder_forward(feats, model)
            loss = dice_ce_loss(logits, labels_all[batch],
                                (config.dice_weight, config.ce_weight), config.dice_eps)
            grads = backward(loss, params)
            opt.step(grads)
            total += loss.item() * len(batch)
        train_curve.append(total / n)
        report = evaluate(model.predict, val)
        val_curve.append(report.mean_foreground_dice)
        if log:
            log(f"finetune epoch {epoch + 1}/{config.epochs}: "
                f"loss {train_curve[-1]:.5f}, val dice {val_curve[-1]:.4f}")

    ckpt = Checkpoint(
        params={name: p.data.copy() for name, p in params.items()},
        config_fingerprint=fingerprint(config.to_dict()),
        encoder_fingerprint=config.encoder_fingerprint(),
        provenance="finetuned",
        epoch=config.epochs,
        seed=config.seed,
    )
    return ckpt, train_curve, val_curve

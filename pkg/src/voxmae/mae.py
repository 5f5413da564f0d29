"""Stage 1: masked-reconstruction pretraining of the encoder on unlabeled
volumes.

Pipeline per batch: patchify -> linear patch embed -> add positions ->
keep visible tokens only -> encoder (visible-only mode) -> project to
decoder width -> scatter into the full sequence with the learned mask
token -> add positions -> global decoder blocks -> linear head back to
voxel space -> MSE on masked patches only. The decoder is throwaway; only
the patch embed and encoder weights go into the checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, gather_tokens, scatter_tokens
from .checkpoint import Checkpoint, fingerprint
from .errors import ConfigError, ContractError
from .nn import Linear, Module
from .optim import AdamW, OptimizerConfig
from .patches import (MaskPlan, PatchGrid, PatchSequence, grid_positions,
                      patchify, sample_mask)
from .phantom import Dataset
from .rng import Rng
from .transformer import EncoderConfig, TransformerBlock, VoxelEncoder
from .volume import Volume, normalize_volume


def encoder_identity(encoder: EncoderConfig, patch_extents: tuple[int, int, int]) -> dict:
    """The architecture facts that decide whether encoder weights are
    interchangeable between two models."""
    return {"encoder": encoder.to_dict(), "patch_extents": list(patch_extents)}


@dataclass(frozen=True)
class MaeConfig:
    encoder: EncoderConfig = EncoderConfig()
    patch_extents: tuple[int, int, int] = (4, 4, 4)
    mask_ratio: float = 0.75
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    epochs: int = 30
    batch_size: int = 8
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        lr=1e-3, min_lr=1e-5, weight_decay=0.05, betas=(0.9, 0.95),
        warmup_epochs=5.0, clip_norm=1.0))
    seed: int = 0
    norm_patch_targets: bool = False

    @property
    def patch_dim(self) -> int:
        pd, ph, pw = self.patch_extents
        return pd * ph * pw

    def validate(self) -> None:
        self.encoder.validate()
        self.optimizer.validate()
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask ratio must be in (0, 1), got {self.mask_ratio}")
        if self.decoder_depth < 1:
            raise ConfigError("decoder needs at least one block")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ConfigError(
                f"{self.decoder_heads} decoder heads do not divide dim {self.decoder_dim}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "patch_extents": list(self.patch_extents),
            "mask_ratio": self.mask_ratio,
            "decoder_dim": self.decoder_dim,
            "decoder_depth": self.decoder_depth,
            "decoder_heads": self.decoder_heads,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer.to_dict(),
            "seed": self.seed,
            "norm_patch_targets": self.norm_patch_targets,
        }

    @staticmethod
    def from_dict(d: dict) -> "MaeConfig":
        return MaeConfig(
            encoder=EncoderConfig.from_dict(d["encoder"]),
            patch_extents=tuple(d["patch_extents"]),
            mask_ratio=float(d["mask_ratio"]),
            decoder_dim=int(d["decoder_dim"]),
            decoder_depth=int(d["decoder_depth"]),
            decoder_heads=int(d["decoder_heads"]),
            epochs=int(d["epochs"]),
            batch_size=int(d["batch_size"]),
            optimizer=OptimizerConfig.from_dict(d["optimizer"]),
            seed=int(d["seed"]),
            norm_patch_targets=bool(d.get("norm_patch_targets", False)),
        )

    def encoder_fingerprint(self) -> str:
        return fingerprint(encoder_identity(self.encoder, self.patch_extents))


class MaeModel(Module):
    def __init__(self, config: MaeConfig, rng: Rng, dtype=np.float32):
        config.validate()
        self.config = config
        dims = config.encoder.embed_dims
        self.patch_embed = Linear(rng.child("patch_embed"), config.patch_dim, dims[0], dtype)
        self.encoder = VoxelEncoder(rng.child("encoder"), config.encoder, dtype)
        self.to_decoder = Linear(rng.child("to_decoder"), dims[-1], config.decoder_dim, dtype)
        self.mask_token = Tensor(
            rng.child("mask_token").normal((config.decoder_dim,), 0.02, dtype),
            requires_grad=True)
        self.decoder = [
            TransformerBlock(rng.child("decoder", i), config.decoder_dim,
                             config.decoder_heads, "global", config.encoder.window,
                             config.encoder.mlp_ratio, dtype)
            for i in range(config.decoder_depth)
        ]
        self.head = Linear(rng.child("head"), config.decoder_dim, config.patch_dim, dtype)
        self.dtype = dtype

    def encoder_parameters(self) -> dict[str, Tensor]:
        """The transferable subset: patch embed plus all encoder stages and
        merges. Decoder-side weights are deliberately excluded."""
        return {name: p for name, p in self.named_parameters().items()
                if name.startswith(("patch_embed.", "encoder."))}


def masked_mse_loss(pred: Tensor, target: Tensor, plans: list[MaskPlan] | MaskPlan) -> Tensor:
    """Mean squared error over masked tokens' voxels only, normalized by
    |masked| * patch_dim (and batch size). Visible entries never contribute."""
    single = isinstance(plans, MaskPlan)
    plan_list = [plans] if single else list(plans)
    if pred.shape != target.shape:
        raise ContractError(f"pred shape {pred.shape} != target shape {target.shape}")
    midx = np.stack([p.masked for p in plan_list])
    if pred.ndim == 2:
        if not single and len(plan_list) != 1:
            raise ContractError("unbatched tokens but multiple mask plans")
        midx = midx[0]
    elif pred.ndim == 3:
        if pred.shape[0] != len(plan_list):
            raise ContractError(
                f"batch of {pred.shape[0]} tokens but {len(plan_list)} mask plans")
    else:
        raise ContractError(f"tokens must be rank 2 or 3, got {pred.shape}")
    pm = gather_tokens(pred, midx)
    tm = gather_tokens(target, midx)
    diff = pm - tm
    return (diff * diff).sum() * (1.0 / diff.size)


def _normalize_patch_targets(tokens: np.ndarray) -> np.ndarray:
    mu = tokens.mean(axis=-1, keepdims=True)
    sd = tokens.std(axis=-1, keepdims=True)
    return ((tokens - mu) / np.maximum(sd, 1e-6)).astype(tokens.dtype)


def _forward_tokens(raw_tokens: Tensor, grid: PatchGrid, plans: list[MaskPlan],
                    model: MaeModel) -> tuple[Tensor, Tensor]:
    """Shared forward given pre-patchified raw tokens (B, N, patch_dim).
    Returns (reconstruction tokens, loss)."""
    cfg = model.config
    target = raw_tokens
    if cfg.norm_patch_targets:
        target = Tensor(_normalize_patch_targets(raw_tokens.data))

    x = model.patch_embed(raw_tokens)
    x = x + Tensor(grid_positions(grid, cfg.encoder.embed_dims[0], model.dtype))
    vidx = np.stack([p.visible for p in plans])
    midx = np.stack([p.masked for p in plans])
    x = gather_tokens(x, vidx)
    feats = model.encoder(x, grid, covers_grid=False)
    bottleneck, _ = feats.bottleneck
    dec_vis = model.to_decoder(bottleneck)
    full = scatter_tokens(dec_vis, model.mask_token, vidx, midx, grid.num_patches)
    full = full + Tensor(grid_positions(grid, cfg.decoder_dim, model.dtype))
    for block in model.decoder:
        full = block(full)
    pred = model.head(full)
    return pred, masked_mse_loss(pred, target, plans)


def mae_forward(volumes: list[Volume] | Volume, plans: list[MaskPlan] | MaskPlan,
                model: MaeModel) -> tuple[PatchSequence, Tensor]:
    """Masked-reconstruction forward pass over a batch of (already
    normalized) volumes. Returns the raw reconstruction tokens
    (B, N, patch_dim) and the scalar masked-MSE loss."""
    vols = [volumes] if isinstance(volumes, Volume) else list(volumes)
    plan_list = [plans] if isinstance(plans, MaskPlan) else list(plans)
    if len(vols) != len(plan_list):
        raise ContractError(f"{len(vols)} volumes but {len(plan_list)} mask plans")
    grid = plan_list[0].grid
    for v, p in zip(vols, plan_list):
        if v.extents != grid.volume_extents:
            raise ContractError(
                f"volume extents {v.extents} do not match plan grid {grid.volume_extents}")
        if p.grid != grid:
            raise ContractError("all mask plans in a batch must share one grid")
    tokens = np.stack([patchify(v, grid.patch_extents).tokens.data for v in vols])
    tokens = tokens.astype(model.dtype, copy=False)
    pred, loss = _forward_tokens(Tensor(tokens), grid, plan_list, model)
    return PatchSequence(grid, pred), loss


def mask_stream(root: Rng, epoch: int, item: int) -> Rng:
    """The per-(epoch, item) stream masks are drawn from; factored out so
    tests can re-derive the exact masks a training run used."""
    return root.child("mask", epoch, item)


def pretrain(dataset: Dataset, config: MaeConfig,
             log=None) -> tuple[Checkpoint, list[float]]:
    """Masked-reconstruction training over the pretrain split. Deterministic
    in (dataset bytes, config): returns the encoder checkpoint tagged
    mae-pretrained and the per-epoch mean loss curve."""
    config.validate()
    items = dataset.split_items("pretrain")
    if not items:
        raise ConfigError("pretrain split is empty")
    vols = [normalize_volume(v) for v, _ in items]
    extents = vols[0].extents
    for v in vols:
        if v.extents != extents:
            raise ContractError("all pretraining volumes must share extents")
    grid = PatchGrid(extents, config.patch_extents)

    root = Rng(config.seed, "pretrain")
    model = MaeModel(config, root.child("init"))
    params = model.named_parameters()
    n = len(vols)
    steps_per_epoch = math.ceil(n / config.batch_size)
    opt = AdamW(params, config.optimizer, steps_per_epoch, config.epochs)

    tokens_all = np.stack([patchify(v, config.patch_extents).tokens.data for v in vols])
    curve: list[float] = []
    for epoch in range(config.epochs):
        order = root.child("order", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            plans = [sample_mask(grid, config.mask_ratio, mask_stream(root, epoch, int(i)))
                     for i in batch]
            raw = Tensor(tokens_all[batch])
            _, loss = _forward_tokens(raw, grid, plans, model)
            grads = backward(loss, params)
            opt.step(grads)
            total += loss.item() * len(batch)
        curve.append(total / n)
        if log:
            log(f"pretrain epoch {epoch + 1}/{config.epochs}: loss {curve[-1]:.5f}")

    encoder_params = {name: p.data.copy() for name, p in model.encoder_parameters().items()}
    ckpt = Checkpoint(
        params=encoder_params,
        config_fingerprint=fingerprint(config.to_dict()),
        encoder_fingerprint=config.encoder_fingerprint(),
        provenance="mae-pretrained",
        epoch=config.epochs,
        seed=config.seed,
    )
    return ckpt, curve

"""Finite-difference verification harness for ops and whole models.

Every check is deterministic (fixed streams off the caller's seed) and
evaluates gradients at generic, well-scaled parameter points: tiny-sigma
inits leave attention near-uniform with true gradients below the
finite-difference noise floor, which says nothing about correctness. The
`gradcheck` CLI subcommand and the acceptance suite both run this harness.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, grad_check, gradcheck_cases
from .mae import MaeConfig, MaeModel, _forward_tokens
from .nn import Module
from .patches import PatchGrid, patchify, sample_mask
from .rng import Rng
from .segmenter import SegConfig, SegModel, decoder_forward, dice_ce_loss
from .transformer import EncoderConfig, PatchMerge, TransformerBlock, VoxelEncoder
from .volume import Volume, normalize_volume

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4

# Default stream for the check points. Verified to keep every coordinate's
# true gradient above the central-difference noise floor (a property of the
# evaluation point, not of gradient correctness; see module docstring).
DEFAULT_CHECK_SEED = 2

TINY_ENCODER = EncoderConfig(embed_dims=(6, 12), blocks=(1, 1), heads=(1, 2),
                             window=(2, 2, 2), kinds=("local", "global"), mlp_ratio=2)


def _randomize(module: Module, rng: Rng, sigma: float = 0.5) -> None:
    for name, p in sorted(module.named_parameters().items()):
        p.data = rng.child("point", name).normal(p.shape, sigma, dtype=np.float64)


def op_checks(seed: int = DEFAULT_CHECK_SEED) -> dict[str, float]:
    """Max relative FD error per registered differentiable op."""
    return gradcheck_cases(Rng(seed, "opcheck"))


def model_checks(seed: int = DEFAULT_CHECK_SEED) -> dict[str, float]:
    """Max relative FD error for composite models: a single transformer
    block, the hierarchical encoder (both modes), patch merging in its
    degraded visible-only form, and the full masked-autoencoder and
    segmentation pipelines including their losses."""
    rng = Rng(seed, "modelcheck")
    out: dict[str, float] = {}

    block = TransformerBlock(rng.child("block-init"), 6, 2, "global", (2, 2, 2), 2,
                             dtype=np.float64)
    _randomize(block, rng.child("block-point"))
    xb = Tensor(rng.child("block-x").normal((5, 6), dtype=np.float64), dtype=np.float64)
    wb = Tensor(rng.child("block-w").normal((5, 6), dtype=np.float64), dtype=np.float64)
    out["transformer_block"] = grad_check(
        lambda *ps: (block(xb) * wb).sum(), list(block.named_parameters().values()))

    enc = VoxelEncoder(rng.child("enc-init"), TINY_ENCODER, dtype=np.float64)
    _randomize(enc, rng.child("enc-point"), sigma=0.4)
    grid = PatchGrid((8, 8, 8), (2, 2, 2))
    xe = Tensor(rng.child("enc-x").normal((grid.num_patches, 6), dtype=np.float64),
                dtype=np.float64)
    we = Tensor(rng.child("enc-w").normal((8, 12), dtype=np.float64), dtype=np.float64)
    enc_params = list(enc.named_parameters().values())
    out["encoder_full_grid"] = grad_check(
        lambda *ps: (enc(xe, grid).bottleneck[0] * we).sum(), enc_params)

    xg = Tensor(rng.child("enc-xg").normal((10, 6), dtype=np.float64), dtype=np.float64)
    wg = Tensor(rng.child("enc-wg").normal((10, 12), dtype=np.float64), dtype=np.float64)
    out["encoder_visible_only"] = grad_check(
        lambda *ps: (enc(xg, grid, covers_grid=False).bottleneck[0] * wg).sum(), enc_params)

    merge = PatchMerge(rng.child("merge-init"), 5, dtype=np.float64)
    _randomize(merge, rng.child("merge-point"))
    xm = Tensor(rng.child("merge-x").normal((7, 5), dtype=np.float64), dtype=np.float64)
    wm = Tensor(rng.child("merge-w").normal((7, 10), dtype=np.float64), dtype=np.float64)
    out["patch_merge_degraded"] = grad_check(
        lambda *ps: (merge.degraded(xm) * wm).sum(), list(merge.named_parameters().values()))

    out["mae_pipeline"] = _mae_check(rng.child("mae"))
    out["seg_pipeline"] = _seg_check(rng.child("seg"))
    return out


def _mae_check(rng: Rng) -> float:
    cfg = MaeConfig(encoder=TINY_ENCODER, patch_extents=(4, 4, 4), mask_ratio=0.5,
                    decoder_dim=8, decoder_depth=1, decoder_heads=2)
    model = MaeModel(cfg, rng.child("init"), dtype=np.float64)
    _randomize(model, rng.child("point"))
    grid = PatchGrid((8, 8, 8), (4, 4, 4))
    plan = sample_mask(grid, 0.5, rng.child("mask"))
    vol = Volume(rng.child("vol").normal((8, 8, 8)))
    tokens = patchify(normalize_volume(vol), (4, 4, 4)).tokens.data.astype(np.float64)
    # doubled input amplitude keeps attention score gradients well above the
    # finite-difference noise floor
    batch = Tensor(tokens[None] * 2.0)
    params = list(model.named_parameters().values())
    return grad_check(lambda *ps: _forward_tokens(batch, grid, [plan], model)[1], params)


def _seg_check(rng: Rng) -> float:
    # 16^3 volume so the bottleneck keeps 8 tokens: attention over a single
    # token is constant and would make its q/k weights structurally dead
    cfg = SegConfig(encoder=TINY_ENCODER, patch_extents=(4, 4, 4), num_classes=2)
    model = SegModel(cfg, rng.child("init"), dtype=np.float64)
    _randomize(model, rng.child("point"))
    grid = PatchGrid((16, 16, 16), (4, 4, 4))
    vol = Volume(rng.child("vol").normal((16, 16, 16)))
    tokens = patchify(normalize_volume(vol), (4, 4, 4)).tokens.data.astype(np.float64)
    batch = Tensor(tokens[None] * 2.0)
    labels = (rng.child("labels").uniform((16, 16, 16)) > 0.5).astype(np.uint8)[None]

    def loss(*ps):
        feats = model.features(batch, grid)
        return dice_ce_loss(decoder_forward(feats, model), labels)

    return grad_check(loss, list(model.named_parameters().values()))


def run_all(seed: int = DEFAULT_CHECK_SEED) -> tuple[dict[str, float], dict[str, float], bool]:
    """(op errors, model errors, all within tolerance)."""
    ops = op_checks(seed)
    models = model_checks(seed)
    ok = (max(ops.values()) < OP_TOLERANCE) and (max(models.values()) < MODEL_TOLERANCE)
    return ops, models, ok

"""The shared hierarchical volumetric transformer encoder.

Stages interleave local-window and global self-attention; a patch-merging
step between stages halves every grid axis and doubles the channel width.
The encoder runs in two modes:

* full-grid mode (segmentation, and any input whose tokens cover the whole
  patch grid): local stages partition the grid into disjoint windows, and
  patch merging concatenates real 2x2x2 neighborhoods;
* visible-only mode (masked pretraining, where the token set is a gappy
  subset of the grid): windows and spatial neighborhoods are undefined, so
  local attention falls back to global attention over the visible tokens
  and patch merging applies the same projection to each token with its
  neighborhood slots filled by replication. Same parameters, degraded
  spatial semantics; every weight still trains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, softmax
from .errors import ConfigError, ContractError
from .nn import Linear, LayerNorm, Mlp, Module
from .patches import PatchGrid
from .rng import Rng

ATTENTION_KINDS = ("local", "global")


@dataclass(frozen=True)
class EncoderConfig:
    embed_dims: tuple[int, ...] = (32, 64, 128)
    blocks: tuple[int, ...] = (2, 2, 2)
    heads: tuple[int, ...] = (2, 4, 8)
    window: tuple[int, int, int] = (2, 2, 2)
    kinds: tuple[str, ...] = ("local", "local", "global")
    mlp_ratio: int = 4

    @property
    def num_stages(self) -> int:
        return len(self.embed_dims)

    def validate(self) -> None:
        n = self.num_stages
        if n == 0:
            raise ConfigError("encoder needs at least one stage")
        if not (len(self.blocks) == len(self.heads) == len(self.kinds) == n):
            raise ConfigError(
                f"per-stage lists disagree: dims {n}, blocks {len(self.blocks)}, "
                f"heads {len(self.heads)}, kinds {len(self.kinds)}")
        for s in range(1, n):
            if self.embed_dims[s] != 2 * self.embed_dims[s - 1]:
                raise ConfigError(
                    f"stage dims must double: stage {s} has {self.embed_dims[s]}, "
                    f"stage {s-1} has {self.embed_dims[s-1]}")
        for s in range(n):
            if self.embed_dims[s] % self.heads[s] != 0:
                raise ConfigError(
                    f"stage {s}: {self.heads[s]} heads do not divide dim {self.embed_dims[s]}")
            if self.kinds[s] not in ATTENTION_KINDS:
                raise ConfigError(f"stage {s}: unknown attention kind {self.kinds[s]!r}")
            if self.blocks[s] < 1:
                raise ConfigError(f"stage {s}: needs at least one block")
        if self.kinds[-1] != "global":
            raise ConfigError("final stage must use global attention")
        if len(self.window) != 3 or any(w < 1 for w in self.window):
            raise ConfigError(f"bad window extents {self.window}")

    def to_dict(self) -> dict:
        return {
            "embed_dims": list(self.embed_dims),
            "blocks": list(self.blocks),
            "heads": list(self.heads),
            "window": list(self.window),
            "kinds": list(self.kinds),
            "mlp_ratio": self.mlp_ratio,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(
            embed_dims=tuple(d["embed_dims"]),
            blocks=tuple(d["blocks"]),
            heads=tuple(d["heads"]),
            window=tuple(d["window"]),
            kinds=tuple(d["kinds"]),
            mlp_ratio=int(d["mlp_ratio"]),
        )


@dataclass
class StageFeatures:
    """Each stage's output tokens with its grid (None in visible-only mode,
    where tokens do not cover a spatial grid). The last entry is the
    bottleneck."""

    stages: list[tuple[Tensor, PatchGrid | None]]

    @property
    def bottleneck(self) -> tuple[Tensor, PatchGrid | None]:
        return self.stages[-1]


class MultiHeadAttention(Module):
    """Scaled dot-product attention over the trailing (tokens, dim) axes;
    any leading axes are treated as batch."""

    def __init__(self, rng: Rng, dim: int, heads: int, dtype=np.float32):
        if dim % heads != 0:
            raise ConfigError(f"{heads} heads do not divide dim {dim}")
        self.dim = dim
        self.heads = heads
        # q/k/v carry no bias: a key bias shifts every score in a row by the
        # same amount, which softmax cancels, leaving a permanently dead
        # parameter.
        self.wq = Linear(rng.child("wq"), dim, dim, dtype, bias=False)
        self.wk = Linear(rng.child("wk"), dim, dim, dtype, bias=False)
        self.wv = Linear(rng.child("wv"), dim, dim, dtype, bias=False)
        self.wo = Linear(rng.child("wo"), dim, dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-2]
        n, d = x.shape[-2], x.shape[-1]
        h = self.heads
        dh = d // h

        def split_heads(t: Tensor) -> Tensor:
            # (..., n, d) -> (..., h, n, dh)
            return t.reshape(*lead, n, h, dh).swap(-2, -3)

        # scale q up front: 64x cheaper than scaling the n x n score matrix
        q = split_heads(self.wq(x)) * (1.0 / math.sqrt(dh))
        k = split_heads(self.wk(x))
        v = split_heads(self.wv(x))
        attn = softmax(q @ k.swap(-1, -2), axis=-1)
        out = (attn @ v).swap(-2, -3).reshape(*lead, n, d)
        return self.wo(out)


def window_partition(x: Tensor, grid: PatchGrid, window: tuple[int, int, int]) -> Tensor:
    """(..., N, d) -> (..., num_windows, window_tokens, d), disjoint windows
    in z-major order."""
    gd, gh, gw = grid.grid_extents
    wd, wh, ww = window
    for axis, (g, w) in enumerate(zip((gd, gh, gw), (wd, wh, ww))):
        if g % w != 0:
            raise ConfigError(
                f"window extent {w} does not divide grid extent {g} on axis {axis}")
    lead = x.shape[:-2]
    n, d = x.shape[-2], x.shape[-1]
    k = len(lead)
    x = x.reshape(*lead, gd // wd, wd, gh // wh, wh, gw // ww, ww, d)
    x = x.transpose(tuple(range(k)) + tuple(k + a for a in (0, 2, 4, 1, 3, 5, 6)))
    return x.reshape(*lead, n // (wd * wh * ww), wd * wh * ww, d)


def window_merge(x: Tensor, grid: PatchGrid, window: tuple[int, int, int]) -> Tensor:
    """Inverse of `window_partition`."""
    gd, gh, gw = grid.grid_extents
    wd, wh, ww = window
    lead = x.shape[:-3]
    d = x.shape[-1]
    k = len(lead)
    x = x.reshape(*lead, gd // wd, gh // wh, gw // ww, wd, wh, ww, d)
    x = x.transpose(tuple(range(k)) + tuple(k + a for a in (0, 3, 1, 4, 2, 5, 6)))
    return x.reshape(*lead, grid.num_patches, d)


class TransformerBlock(Module):
    """Pre-norm residual block: x + attn(norm(x)), then x + mlp(norm(x)).

    `kind` chooses global attention over the whole sequence or attention
    within disjoint local windows of the token grid. Local attention needs
    tokens covering the full grid; callers in visible-only mode must pass
    grid=None to request the global fallback.
    """

    def __init__(self, rng: Rng, dim: int, heads: int, kind: str,
                 window: tuple[int, int, int], mlp_ratio: int, dtype=np.float32):
        if kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {kind!r}")
        self.kind = kind
        self.window = window
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(rng.child("attn"), dim, heads, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(rng.child("mlp"), dim, dim * mlp_ratio, dtype)

    def __call__(self, x: Tensor, grid: PatchGrid | None = None) -> Tensor:
        normed = self.norm1(x)
        if self.kind == "local" and grid is not None:
            windows = window_partition(normed, grid, self.window)
            attended = window_merge(self.attn(windows), grid, self.window)
        else:
            attended = self.attn(normed)
        x = x + attended
        return x + self.mlp(self.norm2(x))


class PatchMerge(Module):
    """Downsample: concatenate each 2x2x2 token neighborhood (8d), layer_norm,
    then project 8d -> 2d. Halves every grid axis."""

    def __init__(self, rng: Rng, dim: int, dtype=np.float32):
        self.norm = LayerNorm(8 * dim, dtype)
        self.proj = Linear(rng.child("proj"), 8 * dim, 2 * dim, dtype)

    def __call__(self, x: Tensor, grid: PatchGrid) -> tuple[Tensor, PatchGrid]:
        gd, gh, gw = grid.grid_extents
        if any(g % 2 for g in (gd, gh, gw)):
            raise ConfigError(f"patch merge requires even grid extents, got {grid.grid_extents}")
        lead = x.shape[:-2]
        n, d = x.shape[-2], x.shape[-1]
        k = len(lead)
        x = x.reshape(*lead, gd // 2, 2, gh // 2, 2, gw // 2, 2, d)
        x = x.transpose(tuple(range(k)) + tuple(k + a for a in (0, 2, 4, 1, 3, 5, 6)))
        x = x.reshape(*lead, n // 8, 8 * d)
        merged = self.proj(self.norm(x))
        new_grid = PatchGrid(grid.volume_extents,
                             tuple(p * 2 for p in grid.patch_extents))
        return merged, new_grid

    def degraded(self, x: Tensor) -> Tensor:
        """Visible-only fallback: each token fills all 8 neighborhood slots
        itself. Token count is preserved; the same weights apply."""
        stacked = concat([x] * 8, axis=-1)
        return self.proj(self.norm(stacked))


class VoxelEncoder(Module):
    """Stacked stages with patch merging in between. Forward returns every
    stage's output (decoder skips) plus the bottleneck."""

    def __init__(self, rng: Rng, config: EncoderConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.stages = [
            [TransformerBlock(rng.child("stage", s, "block", i), config.embed_dims[s],
                              config.heads[s], config.kinds[s], config.window,
                              config.mlp_ratio, dtype)
             for i in range(config.blocks[s])]
            for s in range(config.num_stages)
        ]
        self.merges = [
            PatchMerge(rng.child("merge", s), config.embed_dims[s], dtype)
            for s in range(config.num_stages - 1)
        ]

    def __call__(self, tokens: Tensor, grid: PatchGrid, covers_grid: bool = True) -> StageFeatures:
        if covers_grid and tokens.shape[-2] != grid.num_patches:
            raise ContractError(
                f"token count {tokens.shape[-2]} does not cover grid of {grid.num_patches}")
        x = tokens
        g: PatchGrid | None = grid if covers_grid else None
        feats: list[tuple[Tensor, PatchGrid | None]] = []
        for s in range(self.config.num_stages):
            for block in self.stages[s]:
                x = block(x, grid=g)
            feats.append((x, g))
            if s < self.config.num_stages - 1:
                if covers_grid:
                    x, g = self.merges[s](x, g)
                else:
                    x = self.merges[s].degraded(x)
        return StageFeatures(feats)

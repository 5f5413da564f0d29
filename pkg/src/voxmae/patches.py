"""Decomposing volumes into non-overlapping 3D patch tokens, sinusoidal
position codes over the patch grid, and the random masked/visible partition
that drives masked-reconstruction pretraining.

Patch indexing is z-major throughout: linear patch index
i = gz * (gh * gw) + gy * gw + gx, and each token stores its patch's voxels
in local z-major order. Volume extents must divide exactly; there is no
implicit padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gather_tokens, scatter_tokens
from .errors import ConfigError, ContractError
from .rng import Rng
from .volume import Volume


@dataclass(frozen=True)
class PatchGrid:
    """Bookkeeping for one volume/patch-size decomposition."""

    volume_extents: tuple[int, int, int]
    patch_extents: tuple[int, int, int]

    def __post_init__(self):
        for axis, (v, p) in enumerate(zip(self.volume_extents, self.patch_extents)):
            if p <= 0 or v <= 0:
                raise ConfigError(f"non-positive extent on axis {axis}: volume {v}, patch {p}")
            if v % p != 0:
                raise ConfigError(
                    f"patch extent {p} does not divide volume extent {v} on axis {axis} "
                    f"(no implicit padding)")

    @property
    def grid_extents(self) -> tuple[int, int, int]:
        return tuple(v // p for v, p in zip(self.volume_extents, self.patch_extents))

    @property
    def num_patches(self) -> int:
        gd, gh, gw = self.grid_extents
        return gd * gh * gw

    @property
    def patch_dim(self) -> int:
        pd, ph, pw = self.patch_extents
        return pd * ph * pw

    def patch_coord(self, index: int) -> tuple[int, int, int]:
        gd, gh, gw = self.grid_extents
        if not 0 <= index < self.num_patches:
            raise ContractError(f"patch index {index} out of range [0, {self.num_patches})")
        return index // (gh * gw), (index // gw) % gh, index % gw

    def patch_index(self, z: int, y: int, x: int) -> int:
        gd, gh, gw = self.grid_extents
        return z * gh * gw + y * gw + x


@dataclass
class PatchSequence:
    """Tokens over a patch grid; raw tokens hold voxels (N x patch_dim),
    embedded tokens hold model features (N x embed_dim). A leading batch
    axis is allowed. When `plan` is set the sequence holds only that plan's
    visible tokens, in ascending original-index order."""

    grid: PatchGrid
    tokens: Tensor
    embedded: bool = False
    plan: "MaskPlan | None" = None

    def __post_init__(self):
        expected = self.grid.num_patches if self.plan is None else len(self.plan.visible)
        if self.tokens.shape[-2] != expected:
            raise ContractError(
                f"token count {self.tokens.shape[-2]} != expected {expected}")
        if not self.embedded and self.tokens.shape[-1] != self.grid.patch_dim:
            raise ContractError(
                f"raw tokens must have width {self.grid.patch_dim}, got {self.tokens.shape[-1]}")


@dataclass(frozen=True, eq=False)
class MaskPlan:
    """A masked/visible partition of {0..N-1}; both index sets sorted."""

    grid: PatchGrid
    ratio: float
    masked: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        n = self.grid.num_patches
        union = np.concatenate([self.masked, self.visible])
        if len(union) != n or not np.array_equal(np.sort(union), np.arange(n)):
            raise ContractError("masked and visible sets must partition the patch index range")


def patchify(v: Volume | np.ndarray, patch_extents: tuple[int, int, int]) -> PatchSequence:
    """Split a volume into N = prod(grid) tokens of patch_dim voxels each.
    Exact inverse of `unpatchify`: no voxel duplicated or dropped."""
    voxels = v.voxels if isinstance(v, Volume) else np.asarray(v)
    grid = PatchGrid(tuple(voxels.shape), tuple(patch_extents))
    gd, gh, gw = grid.grid_extents
    pd, ph, pw = grid.patch_extents
    blocks = voxels.reshape(gd, pd, gh, ph, gw, pw)
    tokens = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(grid.num_patches, grid.patch_dim)
    return PatchSequence(grid, Tensor(np.ascontiguousarray(tokens)))


def unpatchify(p: PatchSequence) -> Volume:
    """Reassemble raw tokens into the original volume."""
    if p.embedded:
        raise ContractError("unpatchify requires raw (patch_dim) tokens, got embedded tokens")
    if p.tokens.ndim != 2:
        raise ContractError(f"unpatchify expects unbatched (N, patch_dim) tokens, got {p.tokens.shape}")
    grid = p.grid
    gd, gh, gw = grid.grid_extents
    pd, ph, pw = grid.patch_extents
    blocks = p.tokens.data.reshape(gd, gh, gw, pd, ph, pw)
    voxels = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(grid.volume_extents)
    return Volume(np.ascontiguousarray(voxels))


def positional_encoding(grid: PatchGrid, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed 3D sinusoidal codes, one row per patch: dim/3 channels per axis
    (half sine, half cosine on a geometric frequency ladder), concatenated in
    (z, y, x) order. Parameter-free and deterministic."""
    if dim % 6 != 0:
        raise ConfigError(f"positional encoding dim must be divisible by 6, got {dim}")
    per_axis = dim // 3
    half = per_axis // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))

    def axis_code(positions: np.ndarray) -> np.ndarray:
        angles = positions[:, None] * freqs[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    gd, gh, gw = grid.grid_extents
    zs, ys, xs = np.meshgrid(np.arange(gd), np.arange(gh), np.arange(gw), indexing="ij")
    parts = [axis_code(c.reshape(-1).astype(np.float64)) for c in (zs, ys, xs)]
    return np.concatenate(parts, axis=1).astype(dtype)


def grid_positions(grid: PatchGrid, dim: int, dtype=np.float32) -> np.ndarray:
    """Positional codes for an arbitrary token width: the largest multiple of
    6 that fits gets sinusoidal channels, the remainder is zero-padded."""
    usable = (dim // 6) * 6
    if usable == 0:
        raise ConfigError(f"token width {dim} too small for 3-axis positional codes")
    out = np.zeros((grid.num_patches, dim), dtype=dtype)
    out[:, :usable] = positional_encoding(grid, usable, dtype)
    return out


def sample_mask(grid: PatchGrid, ratio: float, rng: Rng) -> MaskPlan:
    """Uniform mask of ceil(ratio * N) patch indices, drawn without
    replacement by shuffle-then-take."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must be in (0, 1) exclusive, got {ratio}")
    n = grid.num_patches
    k = math.ceil(ratio * n)
    if k >= n:
        raise ConfigError(
            f"mask ratio {ratio} would mask all {n} patches, leaving the encoder no input")
    perm = rng.permutation(n)
    masked = np.sort(perm[:k])
    visible = np.sort(perm[k:])
    return MaskPlan(grid, ratio, masked, visible)


def gather_visible(p: PatchSequence, m: MaskPlan) -> PatchSequence:
    """Keep only visible tokens, ascending original-index order; the plan is
    retained on the result so `scatter_full` can restore positions."""
    if p.grid != m.grid:
        raise ContractError(f"sequence grid {p.grid} does not match mask grid {m.grid}")
    idx = m.visible
    if p.tokens.ndim == 3:
        idx = np.broadcast_to(idx, (p.tokens.shape[0], len(idx)))
    kept = gather_tokens(p.tokens, idx)
    return PatchSequence(p.grid, kept, embedded=p.embedded, plan=m)


def scatter_full(visible: PatchSequence, mask_token: Tensor, m: MaskPlan) -> PatchSequence:
    """Rebuild the full N-token sequence: visible tokens at their original
    slots, the shared learnable mask token in every masked slot. Positional
    codes are the caller's job."""
    if visible.tokens.shape[-2] != len(m.visible):
        raise ContractError(
            f"visible token count {visible.tokens.shape[-2]} != plan visible count {len(m.visible)}")
    vidx = m.visible
    midx = m.masked
    if visible.tokens.ndim == 3:
        b = visible.tokens.shape[0]
        vidx = np.broadcast_to(vidx, (b, len(vidx)))
        midx = np.broadcast_to(midx, (b, len(midx)))
    full = scatter_tokens(visible.tokens, mask_token, vidx, midx, m.grid.num_patches)
    return PatchSequence(visible.grid, full, embedded=visible.embedded)

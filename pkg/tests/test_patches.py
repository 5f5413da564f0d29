import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxmae.autodiff import Tensor
from voxmae.errors import ConfigError, ContractError
from voxmae.patches import (MaskPlan, PatchGrid, PatchSequence, gather_visible,
                            grid_positions, patchify, positional_encoding,
                            sample_mask, scatter_full, unpatchify)
from voxmae.rng import Rng
from voxmae.volume import Volume


def rand_volume(seed, extents):
    return Volume(Rng(seed, "pv").normal(extents))


# -- patchify / unpatchify ------------------------------------------------------


def test_eight_cubed_yields_eight_tokens_of_64():
    seq = patchify(rand_volume(1, (8, 8, 8)), (4, 4, 4))
    assert seq.tokens.shape == (8, 64)
    assert seq.grid.grid_extents == (2, 2, 2)


def test_round_trip_bit_exact():
    v = rand_volume(2, (8, 8, 8))
    assert np.array_equal(unpatchify(patchify(v, (4, 4, 4))).voxels, v.voxels)


def test_voxel_index_arithmetic_oracle():
    # token layout oracle: voxel (z,y,x) lands in patch (z//pd, y//ph, x//pw)
    # at local offset (z%pd, y%ph, x%pw), checked for every voxel
    v = rand_volume(3, (8, 8, 8))
    seq = patchify(v, (4, 4, 4))
    grid = seq.grid
    for z in range(8):
        for y in range(8):
            for x in range(8):
                patch = grid.patch_index(z // 4, y // 4, x // 4)
                local = (z % 4) * 16 + (y % 4) * 4 + (x % 4)
                assert seq.tokens.data[patch, local] == v.voxels[z, y, x]


def test_specific_voxel_lands_where_expected():
    v = rand_volume(4, (8, 8, 8))
    seq = patchify(v, (4, 4, 4))
    patch = seq.grid.patch_index(1, 0, 1)
    local = 1 * 16 + 2 * 4 + 3
    assert seq.tokens.data[patch, local] == v.voxels[5, 2, 7]


def test_non_divisible_extent_names_axis():
    with pytest.raises(ConfigError, match="axis 1"):
        patchify(rand_volume(5, (8, 6, 8)), (4, 4, 4))


def test_unpatchify_rejects_embedded_tokens():
    seq = patchify(rand_volume(6, (8, 8, 8)), (4, 4, 4))
    embedded = PatchSequence(seq.grid, seq.tokens.reshape(8, 64), embedded=True)
    with pytest.raises(ContractError):
        unpatchify(embedded)


def test_unpatchify_zero_tokens_zero_volume():
    grid = PatchGrid((8, 8, 8), (4, 4, 4))
    seq = PatchSequence(grid, Tensor(np.zeros((8, 64), np.float32)))
    assert not unpatchify(seq).voxels.any()


def test_swapping_tokens_swaps_blocks():
    v = rand_volume(7, (8, 8, 8))
    seq = patchify(v, (4, 4, 4))
    tokens = seq.tokens.data.copy()
    tokens[[1, 6]] = tokens[[6, 1]]
    swapped = unpatchify(PatchSequence(seq.grid, Tensor(tokens)))
    changed = np.argwhere(swapped.voxels != v.voxels)
    blocks = {tuple(c // 4) for c in changed}
    assert blocks == {seq.grid.patch_coord(1), seq.grid.patch_coord(6)}
    # unchanged everywhere else
    mask = np.ones((8, 8, 8), bool)
    for z, y, x in changed:
        mask[z, y, x] = False
    assert np.array_equal(swapped.voxels[mask], v.voxels[mask])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 9),
       st.sampled_from([(4, 4, 4), (8, 8, 8), (8, 4, 4), (6, 6, 4), (4, 8, 6)]),
       st.sampled_from([(1, 1, 1), (2, 2, 2), (2, 1, 1), (1, 2, 2)]))
def test_round_trip_many(seed, extents, patch):
    if any(e % p for e, p in zip(extents, patch)):
        with pytest.raises(ConfigError):
            patchify(rand_volume(seed, extents), patch)
        return
    v = rand_volume(seed, extents)
    seq = patchify(v, patch)
    assert np.array_equal(unpatchify(seq).voxels, v.voxels)


# -- positional encoding ---------------------------------------------------------


def test_positions_separable_across_axes():
    grid = PatchGrid((8, 8, 8), (2, 2, 2))
    enc = positional_encoding(grid, 12)
    a = grid.patch_index(1, 2, 0)
    b = grid.patch_index(1, 2, 3)
    per_axis = 4
    assert np.array_equal(enc[a, :2 * per_axis], enc[b, :2 * per_axis])
    assert not np.array_equal(enc[a, 2 * per_axis:], enc[b, 2 * per_axis:])


def test_positions_in_unit_range():
    enc = positional_encoding(PatchGrid((16, 8, 8), (2, 2, 2)), 24)
    assert enc.min() >= -1.0 and enc.max() <= 1.0


def test_positions_distinct_for_2x2x2_grid():
    enc = positional_encoding(PatchGrid((4, 4, 4), (2, 2, 2)), 12)
    assert enc.shape == (8, 12)
    for i in range(8):
        for j in range(i + 1, 8):
            assert not np.array_equal(enc[i], enc[j])


def test_positions_require_dim_divisible_by_6():
    with pytest.raises(ConfigError):
        positional_encoding(PatchGrid((4, 4, 4), (2, 2, 2)), 16)


def test_grid_positions_pads_to_any_width():
    grid = PatchGrid((4, 4, 4), (2, 2, 2))
    padded = grid_positions(grid, 32)
    assert padded.shape == (8, 32)
    assert np.array_equal(padded[:, :30], positional_encoding(grid, 30))
    assert not padded[:, 30:].any()


def test_positions_deterministic():
    grid = PatchGrid((8, 8, 8), (2, 2, 2))
    assert np.array_equal(positional_encoding(grid, 12), positional_encoding(grid, 12))


# -- masking ------------------------------------------------------------------------


def test_mask_counts_ceil():
    grid = PatchGrid((8, 8, 8), (4, 4, 4))
    m = sample_mask(grid, 0.75, Rng(1, "m"))
    assert len(m.masked) == 6 and len(m.visible) == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6),
       st.sampled_from([(2, 2, 2), (4, 2, 2), (4, 4, 2), (4, 4, 4)]),
       st.floats(0.05, 0.9))
def test_mask_partition_invariant(seed, gext, ratio):
    grid = PatchGrid(tuple(4 * g for g in gext), (4, 4, 4))
    n = grid.num_patches
    k = math.ceil(ratio * n)
    if k >= n:
        with pytest.raises(ConfigError):
            sample_mask(grid, ratio, Rng(seed, "mp"))
        return
    m = sample_mask(grid, ratio, Rng(seed, "mp"))
    assert len(m.masked) == k
    union = np.sort(np.concatenate([m.masked, m.visible]))
    assert np.array_equal(union, np.arange(n))
    assert np.array_equal(m.masked, np.sort(m.masked))
    assert np.array_equal(m.visible, np.sort(m.visible))


def test_mask_deterministic():
    grid = PatchGrid((8, 8, 8), (4, 4, 4))
    a = sample_mask(grid, 0.5, Rng(7, "det"))
    b = sample_mask(grid, 0.5, Rng(7, "det"))
    assert np.array_equal(a.masked, b.masked)


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.5])
def test_mask_ratio_bounds_rejected(ratio):
    grid = PatchGrid((8, 8, 8), (4, 4, 4))
    with pytest.raises(ConfigError):
        sample_mask(grid, ratio, Rng(0, "r"))


def test_mask_marginal_uniformity_monte_carlo():
    # 10k draws at N=8, rho=0.5: every index masked with frequency 0.5 +- 0.02
    grid = PatchGrid((8, 8, 8), (4, 4, 4))
    counts = np.zeros(8)
    draws = 10_000
    root = Rng(123, "mc")
    for i in range(draws):
        counts[sample_mask(grid, 0.5, root.child(i)).masked] += 1
    freq = counts / draws
    assert np.all(np.abs(freq - 0.5) <= 0.02), freq


# -- gather / scatter ------------------------------------------------------------------


def test_gather_visible_order_and_count():
    seq = patchify(rand_volume(8, (8, 8, 8)), (4, 4, 4))
    m = sample_mask(seq.grid, 0.25, Rng(2, "g"))  # 2 masked, 6 visible
    vis = gather_visible(seq, m)
    assert vis.tokens.shape == (6, 64)
    assert np.array_equal(vis.tokens.data, seq.tokens.data[m.visible])
    assert np.all(np.diff(m.visible) > 0)


def test_gather_grid_mismatch_rejected():
    seq = patchify(rand_volume(9, (8, 8, 8)), (4, 4, 4))
    other = sample_mask(PatchGrid((8, 8, 8), (2, 2, 2)), 0.5, Rng(3, "h"))
    with pytest.raises(ContractError):
        gather_visible(seq, other)


def test_scatter_full_fills_mask_token_and_restores_visible():
    seq = patchify(rand_volume(10, (8, 8, 8)), (4, 4, 4))
    m = sample_mask(seq.grid, 0.75, Rng(4, "s"))
    vis = gather_visible(seq, m)
    token = Tensor(Rng(5, "tok").normal((64,)))
    full = scatter_full(vis, token, m)
    assert full.tokens.shape == (8, 64)
    assert np.array_equal(full.tokens.data[m.visible], seq.tokens.data[m.visible])
    for idx in m.masked:
        assert np.array_equal(full.tokens.data[idx], token.data)


def test_scatter_count_mismatch_rejected():
    seq = patchify(rand_volume(11, (8, 8, 8)), (4, 4, 4))
    m75 = sample_mask(seq.grid, 0.75, Rng(6, "s"))
    m25 = sample_mask(seq.grid, 0.25, Rng(6, "s"))
    vis = gather_visible(seq, m75)
    with pytest.raises(ContractError):
        scatter_full(vis, Tensor(np.zeros(64, np.float32)), m25)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.1, 0.9))
def test_gather_scatter_round_trip_property(seed, ratio):
    rng = Rng(seed, "rt")
    v = Volume(rng.child("v").normal((8, 8, 8)))
    seq = patchify(v, (4, 4, 4))
    try:
        m = sample_mask(seq.grid, ratio, rng.child("m"))
    except ConfigError:
        return
    token = Tensor(rng.child("t").normal((64,)))
    full = scatter_full(gather_visible(seq, m), token, m)
    assert np.array_equal(full.tokens.data[m.visible], seq.tokens.data[m.visible])

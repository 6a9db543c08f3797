import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from umd.patching import (MaskSpec, gather_visible, keep_count, patchify, sample_mask, scatter_full,
                          unpatchify)


def test_patch_counts_at_64px():
    grid = patchify(torch.zeros(3, 64, 64), 4)
    assert grid.tokens.shape == (256, 48)
    assert (grid.grid_h, grid.grid_w, grid.n_patches, grid.patch_dim) == (16, 16, 256, 48)


def test_zero_image_small_patches():
    grid = patchify(torch.zeros(1, 4, 4), 2)
    assert torch.equal(grid.tokens, torch.zeros(4, 4))


def test_row_major_layout():
    img = torch.arange(16.0).reshape(1, 4, 4)
    tokens = patchify(img, 2).tokens
    torch.testing.assert_close(tokens[0], torch.tensor([0.0, 1.0, 4.0, 5.0]))
    torch.testing.assert_close(tokens[1], torch.tensor([2.0, 3.0, 6.0, 7.0]))
    torch.testing.assert_close(tokens[2], torch.tensor([8.0, 9.0, 12.0, 13.0]))


def test_roundtrip_random_image(gen):
    img = torch.rand(3, 16, 16, generator=gen)
    assert torch.equal(unpatchify(patchify(img, 4)), img)
    batch = torch.rand(5, 3, 16, 16, generator=gen)
    assert torch.equal(unpatchify(patchify(batch, 2)), batch)


def test_patchify_rejects_bad_size():
    with pytest.raises(ValueError):
        patchify(torch.zeros(1, 10, 10), 4)


@pytest.mark.parametrize("n,ratio,visible", [(256, 0.75, 64), (256, 0.375, 160), (256, 0.0, 256), (16, 0.75, 4)])
def test_exact_keep_counts(gen, n, ratio, visible):
    spec = sample_mask(n, ratio, gen)
    assert spec.n_keep == visible
    assert int(spec.mask.sum()) == n - visible
    assert keep_count(n, ratio) == visible


def test_zero_ratio_masks_nothing(gen):
    spec = sample_mask(256, 0.0, gen)
    assert not spec.mask.any()
    assert torch.equal(spec.keep_indices, torch.arange(256))


@pytest.mark.parametrize("ratio", [-0.1, 1.0, 1.5])
def test_bad_ratio(ratio):
    with pytest.raises(ValueError):
        sample_mask(16, ratio)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 300), ratio=st.floats(0, 0.99), seed=st.integers(0, 2**31))
def test_mask_partition_invariants(n, ratio, seed):
    g = torch.Generator().manual_seed(seed)
    spec = sample_mask(n, ratio, g, batch_size=3)
    expected_masked = n - int(np.floor(n * (1 - ratio) + 1e-9))
    assert (spec.mask.sum(1) == expected_masked).all()
    for row_mask, keep in zip(spec.mask, spec.keep_indices):
        assert torch.equal(keep, torch.nonzero(~row_mask).flatten())


def test_masking_is_uniform(gen):
    n, ratio, draws = 16, 0.75, 10_000
    spec = sample_mask(n, ratio, gen, batch_size=draws)
    freq = spec.mask.double().mean(0)
    assert float((freq - ratio).abs().max()) < 0.02


def test_gather_all_visible_is_identity(gen):
    tokens = torch.randn(6, 5, generator=gen)
    assert torch.equal(gather_visible(tokens, sample_mask(6, 0.0, gen)), tokens)


def test_gather_drops_masked_token():
    tokens = torch.arange(8.0).reshape(4, 2)
    spec = MaskSpec.from_mask(torch.tensor([True, False, False, False]))
    assert torch.equal(gather_visible(tokens, spec), tokens[1:])


def test_scatter_all_visible_is_identity(gen):
    vis = torch.randn(6, 5, generator=gen)
    assert torch.equal(scatter_full(vis, sample_mask(6, 0.0, gen), torch.zeros(5)), vis)


def test_scatter_single_visible():
    spec = MaskSpec.from_mask(torch.tensor([True, True, False, True]))
    mt = torch.tensor([9.0, 9.0])
    out = scatter_full(torch.tensor([[1.0, 2.0]]), spec, mt)
    assert torch.equal(out[2], torch.tensor([1.0, 2.0]))
    assert torch.equal(out[[0, 1, 3]], mt.expand(3, 2))


def test_gather_scatter_roundtrip(gen):
    for _ in range(100):
        n = int(torch.randint(2, 40, (1,), generator=gen))
        ratio = float(torch.rand(1, generator=gen)) * 0.95
        tokens = torch.randn(2, n, 3, generator=gen)
        spec = sample_mask(n, ratio, gen, batch_size=2)
        out = scatter_full(gather_visible(tokens, spec), spec, torch.full((3,), -7.0))
        keep = ~spec.mask
        assert torch.equal(out[keep], tokens[keep])
        assert (out[spec.mask] == -7.0).all()


def test_size_mismatch_errors(gen):
    spec = sample_mask(8, 0.5, gen)
    with pytest.raises(ValueError):
        gather_visible(torch.zeros(6, 2), spec)
    with pytest.raises(ValueError):
        scatter_full(torch.zeros(3, 2), spec, torch.zeros(2))


def test_scatter_passes_gradient_to_mask_token(gen):
    spec = sample_mask(8, 0.5, gen, batch_size=2)
    mt = torch.zeros(3, requires_grad=True)
    vis = torch.randn(2, 4, 3, generator=gen, requires_grad=True)
    scatter_full(vis, spec, mt).sum().backward()
    assert torch.equal(mt.grad, torch.full((3,), 8.0))
    assert torch.equal(vis.grad, torch.ones(2, 4, 3))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from palletdet.depth_completion import CompletionParams, complete_depth, diffuse_fill, large_region_mask


def test_params_validation():
    with pytest.raises(ValueError):
        CompletionParams(0.0)
    with pytest.raises(ValueError):
        CompletionParams(4.0, large_area_px=0)
    with pytest.raises(ValueError):
        CompletionParams(4.0, morph_radius=0)
    assert CompletionParams(4.0).area_threshold((100, 50)) == 100


def test_fully_valid_unchanged():
    d = np.random.default_rng(0).uniform(1, 3, (20, 30)).astype(np.float32)
    assert np.array_equal(complete_depth(d, CompletionParams(4.0)), d)


def test_all_invalid_rejected():
    with pytest.raises(ValueError):
        complete_depth(np.zeros((5, 5)), CompletionParams(4.0))


def test_huge_hole_becomes_wall():
    d = np.full((40, 40), 2.0, dtype=np.float32)
    d[5:30, 5:30] = 0
    out = complete_depth(d, CompletionParams(4.5, large_area_px=100))
    assert np.all(out[5:30, 5:30] == np.float32(4.5))


def test_single_pixel_hole_takes_constant():
    d = np.full((9, 9), 2.25, dtype=np.float32)
    d[4, 4] = 0
    out = complete_depth(d, CompletionParams(4.0))
    assert out[4, 4] == pytest.approx(2.25, abs=1e-6)


def test_linear_ramp_is_reproduced():
    # a linear function is harmonic, so diffusion recovers it inside a hole
    cols = np.linspace(1.0, 2.0, 30)
    d = np.tile(cols, (12, 1)).astype(np.float32)
    ref = d.copy()
    d[4:8, 10:14] = 0
    out = complete_depth(d, CompletionParams(4.0, large_area_px=1000, inpaint_iterations=2000))
    assert np.abs(out - ref).max() < 1e-4


def test_large_region_mask_examples():
    inv = np.zeros((30, 30), dtype=bool)
    inv[2:4, 2:4] = True
    inv[10:25, 10:25] = True
    big = large_region_mask(inv, CompletionParams(4.0, large_area_px=50))
    assert big[10:25, 10:25].all() and not big[2:4, 2:4].any()
    # closing only joins holes, it never marks valid pixels
    assert not big[~inv].any()


def test_diffuse_fill_needs_boundary():
    holes = np.zeros((4, 4), dtype=bool)
    assert np.array_equal(diffuse_fill(np.ones((4, 4)), holes, 3), np.ones((4, 4)))


def random_depth(rng, h=24, w=32):
    d = rng.uniform(1.0, 3.0, (h, w))
    d = ndimage.gaussian_filter(d, 2)
    holes = rng.random((h, w)) < rng.uniform(0.02, 0.3)
    blobs = ndimage.binary_dilation(rng.random((h, w)) < 0.01, iterations=int(rng.integers(1, 4)))
    invalid = holes | blobs
    if invalid.all():
        invalid[0, 0] = False
    d[invalid] = 0
    return d.astype(np.float32)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_completion_invariants(seed):
    rng = np.random.default_rng(seed)
    d = random_depth(rng)
    p = CompletionParams(4.0, large_area_px=int(rng.integers(5, 200)))
    out = complete_depth(d, p)
    valid = d > 0
    assert np.all(out > 0)
    assert np.array_equal(out[valid], d[valid])
    # maximum principle per small-hole component against its fixed boundary
    wall = large_region_mask(~valid, p)
    assert np.all(out[wall] == np.float32(4.0))
    holes = ~valid & ~wall
    fixed = np.where(valid, d, np.where(wall, 4.0, np.nan))
    labels, n = ndimage.label(holes, structure=ndimage.generate_binary_structure(2, 1))
    for k in range(1, n + 1):
        comp = labels == k
        ring = ndimage.binary_dilation(comp, structure=ndimage.generate_binary_structure(2, 1)) & ~comp
        vals = fixed[ring]
        assert out[comp].min() >= np.nanmin(vals) - 1e-5
        assert out[comp].max() <= np.nanmax(vals) + 1e-5

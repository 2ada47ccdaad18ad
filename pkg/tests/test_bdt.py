import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from palletdet.bdt import (BdtParams, bounded_distance_transform, euclidean_distance_transform,
                           instance_boundaries, instance_masks_from_bdt, squared_edt)


def brute_force_sq(mask):
    """O(N^2) scan over every boundary pixel."""
    pts = np.argwhere(mask)
    h, w = mask.shape
    rr, cc = np.mgrid[:h, :w]
    d2 = (rr[..., None] - pts[:, 0]) ** 2 + (cc[..., None] - pts[:, 1]) ** 2
    return d2.min(-1)


def brute_force_edt(mask):
    return np.sqrt(brute_force_sq(mask))


def test_boundaries_examples():
    assert not instance_boundaries(np.full((5, 5), 3)).any()
    ids = np.ones((6, 6), dtype=int)
    ids[:, 3:] = 2
    b = instance_boundaries(ids)
    expected = np.zeros((6, 6), dtype=np.uint8)
    expected[:, 2:4] = 1
    assert np.array_equal(b, expected)


def test_boundaries_every_pixel_distinct():
    # a two-id checkerboard cancels in the Sobel sum; distinct ids do not
    ids = np.arange(1, 37).reshape(6, 6)
    assert instance_boundaries(ids).all()


def test_edt_three_four_five():
    m = np.zeros((6, 6), dtype=np.uint8)
    m[0, 0] = 1
    assert euclidean_distance_transform(m)[3, 4] == 5.0


def test_edt_all_boundary_and_empty():
    assert np.all(euclidean_distance_transform(np.ones((4, 7))) == 0)
    out = euclidean_distance_transform(np.zeros((4, 7)))
    assert np.all(out == 11)


def test_edt_matches_brute_force_500_masks():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(500):
        h, w = rng.integers(1, 17, size=2)
        m = rng.random((h, w)) < rng.uniform(0.02, 0.5)
        if not m.any():
            m[rng.integers(h), rng.integers(w)] = True
        worst = max(worst, np.abs(euclidean_distance_transform(m) - brute_force_edt(m)).max())
    assert worst < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_squared_edt_is_integer_valued(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((12, 12)) < 0.1
    m[0, 0] = True
    d2 = squared_edt(m)
    assert np.array_equal(d2, np.round(d2))
    assert np.array_equal(d2, brute_force_sq(m))


def test_bdt_background_and_tanh_values():
    ids = np.zeros((40, 40), dtype=int)
    ids[5:35, 5:35] = 1
    s = 3.0
    bdt = bounded_distance_transform(ids, BdtParams(s))
    assert np.all(bdt[ids == 0] == 0)
    assert bdt.min() >= 0 and bdt.max() < 1
    # boundary pixels sit on rows/cols 4,5 and 34,35; (8, 20) is 3 px from row 5
    assert bdt[8, 20] == pytest.approx(math.tanh(1.0), abs=1e-6)
    assert bdt[17, 17] == pytest.approx(math.tanh(12 / s), abs=1e-6)
    assert math.tanh(4.0) == pytest.approx(0.99933, abs=1e-5)


def test_bdt_scale_validation():
    for s in (0.0, -1.0):
        with pytest.raises(ValueError):
            BdtParams(s)


def test_bdt_monotone_into_convex_interior():
    ids = np.zeros((30, 30), dtype=int)
    ids[3:27, 3:27] = 4
    bdt = bounded_distance_transform(ids, BdtParams(4.0))
    for row in bdt[3:15, 15], bdt[15, 3:15], np.diag(bdt)[3:15]:
        assert np.all(np.diff(row) >= 0)


def test_bdt_adjacent_to_boundary_is_small():
    rng = np.random.default_rng(1)
    for _ in range(20):
        ids = rng.integers(0, 3, size=(10, 10))
        s = rng.uniform(0.5, 8)
        b = instance_boundaries(ids).astype(bool)
        bdt = bounded_distance_transform(ids, BdtParams(s))
        assert np.all(bdt[b] == 0)
        near = np.zeros_like(b)
        near[1:] |= b[:-1]
        near[:-1] |= b[1:]
        near[:, 1:] |= b[:, :-1]
        near[:, :-1] |= b[:, 1:]
        assert np.all(bdt[near] < math.tanh(math.sqrt(2) / s) + 1e-7)


def test_instance_separation():
    ids = np.zeros((30, 50), dtype=int)
    ids[5:25, 5:24] = 1
    ids[5:25, 26:45] = 2
    bdt = bounded_distance_transform(ids, BdtParams(2.0))
    masks = instance_masks_from_bdt(bdt, 0.5 * math.tanh(1.0), dilation_radius=0)
    assert len(masks) == 2
    for m, i in zip(masks, (1, 2)):
        assert np.all(ids[m.astype(bool)] == i)


def test_masks_examples():
    ids = np.zeros((40, 60), dtype=int)
    ids[5:15, 5:15] = 1
    ids[25:35, 40:50] = 2
    bdt = bounded_distance_transform(ids, BdtParams(2.0))
    masks = instance_masks_from_bdt(bdt, 0.5, dilation_radius=2)
    assert len(masks) == 2
    # tanh(d/2) >= 0.5 needs d >= 1.0986, so the cores drop the ring next to the boundary
    core = instance_masks_from_bdt(bdt, 0.5, dilation_radius=0)
    for m, c in zip(masks, core):
        assert c.sum() < m.sum()
        assert np.all(m[c.astype(bool)] == 1)
    assert instance_masks_from_bdt(bdt, 0.999) == []
    for c, i in zip(core, (1, 2)):
        assert np.all(ids[c.astype(bool)] == i)
    with pytest.raises(ValueError):
        instance_masks_from_bdt(bdt, 1.0)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from palletdet.grid import DTYPE, binary_mask, depth_image, grid_map2, grid_new, grid_reduce_mean


def test_grid_new_fill():
    assert np.array_equal(grid_new((1, 2, 2, 1), 0.0), np.zeros((1, 2, 2, 1)))
    g = grid_new((1, 1, 1, 1), 3.5)
    assert g.shape == (1, 1, 1, 1) and g[0, 0, 0, 0] == 3.5
    g = grid_new((2, 4, 4, 3), 1.0)
    assert g.size == 96 and np.all(g == 1.0) and g.dtype == DTYPE


@pytest.mark.parametrize("shape", [(0, 1, 1, 1), (1, 0, 2, 1), (1, 1, 1, 0)])
def test_grid_new_rejects_empty(shape):
    with pytest.raises(ValueError):
        grid_new(shape)


def test_grid_map2_examples():
    z = grid_new((1, 2, 2, 1))
    o = grid_new((1, 2, 2, 1), 1.0)
    assert np.all(grid_map2(z, z, np.subtract) == 0)
    assert np.all(grid_map2(o, o, np.add) == 2.0)
    assert np.all(grid_map2(grid_new((1, 2, 2, 1), 0.5), grid_new((1, 2, 2, 1), 0.25), np.subtract) == 0.25)
    with pytest.raises(ValueError):
        grid_map2(z, grid_new((1, 2, 3, 1)), np.add)


def test_grid_reduce_mean_examples():
    assert grid_reduce_mean(grid_new((2, 3, 3, 2), 2.0)) == 2.0
    assert grid_reduce_mean(np.array([1.0, 3.0]).reshape(1, 1, 2, 1)) == 2.0
    assert grid_reduce_mean(np.arange(8.0).reshape(1, 2, 2, 2)) == 3.5


shapes = st.tuples(*[st.integers(1, 4)] * 4)


@settings(max_examples=50, deadline=None)
@given(shapes, st.floats(-1e3, 1e3, allow_nan=False, width=32))
def test_mean_of_constant_grid(shape, c):
    assert grid_reduce_mean(grid_new(shape, c)) == pytest.approx(float(np.float32(c)), rel=1e-6, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_map2_index_aligned(shape, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=shape)
    b = rng.normal(size=shape)
    out = grid_map2(a, b, lambda x, y: x * 2 - y)
    assert out.shape == tuple(shape)
    for _ in range(5):
        idx = tuple(rng.integers(0, s) for s in shape)
        assert out[idx] == pytest.approx(np.float32(a[idx]) * 2 - np.float32(b[idx]), rel=1e-5, abs=1e-5)


def test_non_finite_rejected():
    with pytest.raises(ValueError), np.errstate(divide="ignore"):
        grid_map2(np.ones((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)), np.divide)


def test_masks_and_depth_validation():
    assert binary_mask([[0, 1], [1, 0]]).dtype == np.uint8
    assert np.array_equal(binary_mask([[0, 2]]), [[0, 1]])
    with pytest.raises(ValueError):
        depth_image([[1.0, -0.1]])
    assert depth_image([[0.0, 2.5]]).dtype == np.float32

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compositor_lab.masks import BBox, InvalidBBoxError, box_iou, dilate, kernel_offsets, union
from oracles import dilate_naive


def test_bbox_rejects_zero_area():
    with pytest.raises(InvalidBBoxError):
        BBox(10, 10, 10, 20)
    with pytest.raises(InvalidBBoxError):
        BBox(0, 5, 3, 5)


def test_bbox_from_mask_is_tight(rng):
    for _ in range(50):
        m = rng.random((64, 64)) < 0.01
        if not m.any():
            continue
        ys, xs = np.nonzero(m)
        assert BBox.from_mask(m).as_tuple() == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def test_bbox_from_empty_mask_raises():
    with pytest.raises(InvalidBBoxError):
        BBox.from_mask(np.zeros((4, 4), bool))


def test_box_iou_known_value():
    assert box_iou(BBox(0, 0, 4, 4), BBox(2, 0, 6, 4)) == pytest.approx(8 / 24)


def test_kernel_offsets_even_and_odd():
    assert kernel_offsets(40) == (-20, 19)
    assert kernel_offsets(3) == (-1, 1)


def test_single_pixel_dilates_to_offset_block():
    m = np.zeros((64, 64), bool)
    m[32, 32] = True
    out = dilate(m, 40)
    expected = np.zeros_like(m)
    expected[12:52, 12:52] = True
    assert out.sum() == 1600
    assert np.array_equal(out, expected)


def test_dilation_matches_minkowski_oracle(rng):
    for i in range(100):
        density = [0.001, 0.005, 0.02][i % 3]
        m = rng.random((64, 64)) < density
        assert np.array_equal(dilate(m, 40), dilate_naive(m, 40))


def test_dilation_small_kernels_match_oracle(rng):
    for size in (1, 2, 5, 8):
        m = rng.random((20, 17)) < 0.05
        assert np.array_equal(dilate(m, size), dilate_naive(m, size))


def test_dilation_distributes_over_union(rng):
    a, b, c = (rng.random((64, 64)) < 0.003 for _ in range(3))
    assert np.array_equal(dilate(union(a, b, c)), dilate(a) | dilate(b) | dilate(c))


def test_union_dimension_mismatch():
    with pytest.raises(ValueError):
        union(np.zeros((3, 3)), np.zeros((3, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_dilation_is_monotone(seed, size):
    r = np.random.default_rng(seed)
    b = r.random((24, 24)) < 0.1
    a = b & (r.random((24, 24)) < 0.5)
    assert not (dilate(a, size) & ~dilate(b, size)).any()

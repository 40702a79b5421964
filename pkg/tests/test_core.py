import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantarecon.core import (BitVolume, CropSpec, DenseVolume, RandomSource, Shape3,
                              VolumeError, bit_get, bit_set, crop, popcount)

from conftest import random_bits


def test_set_first_voxel_sets_lsb():
    v = bit_set(BitVolume.zeros((1, 1, 8)), 0, 0, 0, 1)
    assert v.bits.tolist() == [0b00000001]


def test_get_on_zero_volume():
    v = BitVolume.zeros((3, 4, 5))
    assert all(bit_get(v, t, y, x) == 0 for t in range(3) for y in range(4) for x in range(5))


def test_set_then_get_single_voxel():
    v = bit_set(BitVolume.zeros((4, 4, 8)), 2, 3, 5, 1)
    assert bit_get(v, 2, 3, 5) == 1
    assert popcount(v) == 1


def test_exhaustive_set_get_round_trip():
    shape = (4, 4, 8)
    base = BitVolume.zeros(shape)
    for t in range(4):
        for y in range(4):
            for x in range(8):
                v = base.set(t, y, x, 1)
                arr = v.to_array()
                assert arr[t, y, x] == 1 and arr.sum() == 1
                assert v.set(t, y, x, 0) == base


def test_bit_order_matches_linear_index():
    v = BitVolume.zeros((2, 3, 5)).set(1, 2, 4, 1)
    i = (1 * 3 + 2) * 5 + 4
    assert v.bits[i // 8] == 1 << (i % 8)


def test_out_of_range_index():
    v = BitVolume.zeros((2, 2, 2))
    with pytest.raises(VolumeError):
        v.get(2, 0, 0)
    with pytest.raises(VolumeError):
        v.set(0, -1, 0, 1)


def test_padding_bits_zero_and_enforced():
    v = BitVolume.from_array(np.ones((1, 1, 3), np.uint8))
    assert v.bits.tolist() == [0b111]
    with pytest.raises(VolumeError):
        BitVolume(Shape3(1, 1, 3), np.array([0b1111], np.uint8))


def test_buffer_length():
    assert BitVolume.zeros((3, 3, 3)).bits.size == 4


def test_popcount_trivial():
    assert popcount(BitVolume.zeros((8, 8, 8))) == 0
    assert popcount(BitVolume.from_array(np.ones((3, 3, 3)))) == 27


def test_popcount_matches_naive_loop(np_rng):
    v = random_bits(np_rng, (5, 7, 9), 0.4)
    naive = 0
    for t in range(5):
        for y in range(7):
            for x in range(9):
                naive += v.get(t, y, x)
    assert popcount(v) == naive


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 11), st.integers(0, 2**32 - 1))
def test_pack_unpack_bijection(t, h, w, seed):
    arr = (np.random.default_rng(seed).random((t, h, w)) < 0.5).astype(np.uint8)
    v = BitVolume.from_array(arr)
    np.testing.assert_array_equal(v.to_array(), arr)
    assert v.bits.size == (t * h * w + 7) // 8


def test_full_crop_identity(np_rng):
    v = random_bits(np_rng, (4, 6, 6))
    assert crop(v, CropSpec((0, 0, 0), v.shape)) == v


def test_single_voxel_crop(np_rng):
    v = random_bits(np_rng, (4, 6, 6))
    c = crop(v, CropSpec((2, 3, 1), (1, 1, 1)))
    assert c.to_array()[0, 0, 0] == v.get(2, 3, 1)


def test_random_crops_match_naive_indexing(np_rng):
    for _ in range(20):
        shape = tuple(int(s) for s in np_rng.integers(1, 9, 3))
        v = random_bits(np_rng, shape)
        d = DenseVolume.from_array(np_rng.random(shape))
        size = tuple(int(np_rng.integers(1, s + 1)) for s in shape)
        origin = tuple(int(np_rng.integers(0, s - z + 1)) for s, z in zip(shape, size))
        cb, cd = crop(v, CropSpec(origin, size)), crop(d, CropSpec(origin, size))
        for t in range(size[0]):
            for y in range(size[1]):
                for x in range(size[2]):
                    p = (origin[0] + t, origin[1] + y, origin[2] + x)
                    assert cb.get(t, y, x) == v.get(*p)
                    assert cd.values[t, y, x] == d.values[p]


def test_crop_outside_raises():
    with pytest.raises(VolumeError):
        crop(BitVolume.zeros((4, 4, 4)), CropSpec((1, 0, 0), (4, 4, 4)))


def test_shape_validation():
    with pytest.raises(VolumeError):
        Shape3(0, 1, 1)


def test_dense_rejects_non_finite():
    with pytest.raises(VolumeError):
        DenseVolume.from_array(np.full((1, 2, 2), np.nan))


def test_volumes_are_immutable(np_rng):
    v = random_bits(np_rng, (2, 2, 2))
    with pytest.raises(ValueError):
        v.bits[0] = 1


def test_random_source_reproducible_and_independent():
    a = RandomSource(7, 3).generator().random(5)
    b = RandomSource(7, 3).generator().random(5)
    c = RandomSource(7, 4).generator().random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    assert RandomSource(7).child(1, 2) == RandomSource(7, (1, 2))

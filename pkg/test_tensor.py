"""
Tests for the Tensor4 value grid, cellwise maps, group sums and serialization.
"""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from errors import DimensionError, InputError, NumericError
from partition import StatPartition
from tensor import Tensor4, group_sums, map_cells, read_binary, read_csv, zeros


@pytest.mark.parametrize("shape", [(1, 1, 1, 1), (2, 3, 1, 1), (2, 2, 2, 2)])
def test_zeros(shape):
    x = zeros(*shape)
    assert x.shape == shape
    assert x.size == int(np.prod(shape))
    assert_array_equal(x.flat_values, np.zeros(x.size))


@pytest.mark.parametrize("shape", [(0, 1, 1, 1), (1, 0, 2, 2), (2, 2, 2, 0)])
def test_zeros_rejects_empty_axis(shape):
    with pytest.raises(DimensionError):
        zeros(*shape)


def test_tensor_rejects_wrong_rank_and_non_finite():
    with pytest.raises(DimensionError):
        Tensor4(np.zeros((2, 2, 2)))
    with pytest.raises(NumericError):
        Tensor4(np.array([np.nan]).reshape(1, 1, 1, 1))


def test_tensor_is_read_only_copy():
    source = np.arange(4.0).reshape(1, 1, 2, 2)
    x = Tensor4(source)
    source[0, 0, 0, 0] = 99.0
    assert x.values[0, 0, 0, 0] == 0.0
    with pytest.raises(ValueError):
        x.values[0, 0, 0, 0] = 1.0


def test_from_flat_layout_is_example_major():
    x = Tensor4.from_flat((2, 3, 1, 2), np.arange(12.0))
    assert x.values[1, 0, 0, 0] == 6.0
    assert x.values[0, 2, 0, 1] == 5.0
    with pytest.raises(DimensionError):
        Tensor4.from_flat((2, 2, 1, 1), np.arange(3.0))


def test_map_cells_examples():
    x = Tensor4.from_flat((1, 1, 2, 2), [1.0, 2.0, 3.0, 4.0])
    assert map_cells(x, lambda v: v) == x
    assert_array_equal(map_cells(x, np.square).flat_values, [1.0, 4.0, 9.0, 16.0])
    half = Tensor4.from_flat((1, 1, 1, 1), [0.5])
    assert_array_equal(map_cells(half, np.negative).flat_values, [-0.5])


def test_map_cells_inverse_is_bit_exact():
    rng = np.random.default_rng(3)
    x = Tensor4(rng.normal(size=(3, 2, 2, 2)))
    assert map_cells(map_cells(x, np.negative), np.negative) == x


def test_map_cells_non_finite_is_numeric_error():
    x = Tensor4.from_flat((1, 1, 1, 2), [0.0, 1.0])
    with pytest.raises(NumericError):
        map_cells(x, lambda v: 1.0 / v)


def test_group_sums_examples():
    x = Tensor4.from_flat((1, 1, 2, 2), [1.0, 2.0, 3.0, 4.0])
    one = StatPartition.from_labels(x.shape, np.zeros(x.shape, dtype=int))
    sums, sum_sq, counts = group_sums(x, one)
    assert_array_equal(sums, [10.0])
    assert_array_equal(sum_sq, [30.0])
    assert_array_equal(counts, [4])

    two = StatPartition.from_labels(x.shape, np.array([0, 0, 1, 1]).reshape(x.shape))
    sums, sum_sq, counts = group_sums(x, two)
    assert_array_equal(sums, [3.0, 7.0])
    assert_array_equal(sum_sq, [5.0, 25.0])
    assert_array_equal(counts, [2, 2])


def test_group_sums_counts_cover_all_cells():
    rng = np.random.default_rng(0)
    x = Tensor4(rng.normal(size=(4, 3, 2, 2)))
    labels = rng.integers(0, 5, size=x.shape)
    labels[0, 0, 0, :] = np.arange(2)
    labels[1, 0, 0, :] = [2, 3]
    labels[2, 0, 0, 0] = 4
    p = StatPartition.from_labels(x.shape, labels)
    _, _, counts = group_sums(x, p)
    assert counts.sum() == x.size


def test_group_sums_shape_mismatch():
    x = zeros(2, 2, 1, 1)
    p = StatPartition.singletons((2, 2, 2, 1))
    with pytest.raises(DimensionError):
        group_sums(x, p)


def test_csv_and_binary_files(tmp_path):
    rng = np.random.default_rng(1)
    x = Tensor4(rng.normal(size=(2, 3, 2, 1)))

    csv_path = tmp_path / "x.csv"
    x.to_csv(str(csv_path))
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "2,3,2,1"
    assert len(lines) == 1 + x.size
    assert read_csv(str(csv_path)) == x

    bin_path = tmp_path / "x.bin"
    x.to_binary(str(bin_path))
    assert bin_path.stat().st_size == 32 + 8 * x.size
    assert read_binary(str(bin_path)) == x


def test_read_missing_file(tmp_path):
    with pytest.raises(InputError):
        read_csv(str(tmp_path / "missing.csv"))
    with pytest.raises(InputError):
        read_binary(str(tmp_path / "missing.bin"))

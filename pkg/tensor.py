"""
Dense 4-axis value grid (examples x channels x height x width).

All values are 64-bit floats stored example-major, then channel, then row,
then column. Tensors are read-only once constructed.
"""

import os
from dataclasses import dataclass
from typing import Callable, Tuple, TYPE_CHECKING

import numpy as np
import pandas as pd

from errors import DimensionError, InputError, NumericError

if TYPE_CHECKING:
    from partition import StatPartition

Shape = Tuple[int, int, int, int]


@dataclass(frozen=True, eq=False)
class Tensor4:
    """Immutable NCHW grid of float64 values."""
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim != 4:
            raise DimensionError(f"Tensor4 needs 4 axes, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionError(f"Tensor4 counts must all be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("Tensor4 values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_flat(cls, shape: Shape, flat) -> "Tensor4":
        flat = np.asarray(flat, dtype=np.float64).ravel()
        expected = int(np.prod(shape))
        if flat.size != expected:
            raise DimensionError(f"{flat.size} values do not fill shape {shape}")
        return cls(flat.reshape(shape))

    @property
    def shape(self) -> Shape:
        return tuple(int(s) for s in self.values.shape)

    @property
    def n_examples(self) -> int:
        return self.shape[0]

    @property
    def n_channels(self) -> int:
        return self.shape[1]

    @property
    def height(self) -> int:
        return self.shape[2]

    @property
    def width(self) -> int:
        return self.shape[3]

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def flat_values(self) -> np.ndarray:
        return self.values.ravel()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor4):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))

    def to_csv(self, filepath: str):
        """Write the header line `n,c,h,w` followed by one value per line."""
        n, c, h, w = self.shape
        with open(filepath, "w", encoding="utf-8") as fh:
            fh.write(f"{n},{c},{h},{w}\n")
            for value in self.flat_values:
                fh.write(f"{float(value)!r}\n")

    def to_binary(self, filepath: str):
        """Write four little-endian int64 counts followed by float64 values."""
        with open(filepath, "wb") as fh:
            fh.write(np.asarray(self.shape, dtype="<i8").tobytes())
            fh.write(self.flat_values.astype("<f8").tobytes())


def zeros(n: int, c: int, h: int, w: int) -> Tensor4:
    """Tensor of the given shape with every cell 0.0."""
    counts = (n, c, h, w)
    if any(int(k) < 1 for k in counts):
        raise DimensionError(f"All counts must be >= 1, got {counts}")
    return Tensor4(np.zeros(counts, dtype=np.float64))


def map_cells(x: Tensor4, f: Callable[[np.ndarray], np.ndarray]) -> Tensor4:
    """
    Apply a cellwise function.

    `f` receives the whole value grid and must act elementwise (numpy ufuncs
    such as np.square, or lambdas built from them).
    """
    out = np.asarray(f(x.values), dtype=np.float64)
    if out.shape != x.values.shape:
        raise DimensionError(f"Cellwise function changed shape {x.shape} -> {out.shape}")
    if not np.all(np.isfinite(out)):
        raise NumericError("Cellwise function produced a non-finite value")
    return Tensor4(out)


def group_sums(x: Tensor4, p: "StatPartition") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per-group (sum, sum of squares, cell count) of x under partition p.
    """
    if tuple(p.shape) != x.shape:
        raise DimensionError(f"Partition shape {p.shape} does not cover tensor shape {x.shape}")
    labels = p.flat_labels
    flat = x.flat_values
    sums = np.bincount(labels, weights=flat, minlength=p.n_groups)
    sum_sq = np.bincount(labels, weights=flat * flat, minlength=p.n_groups)
    counts = np.bincount(labels, minlength=p.n_groups)
    return sums, sum_sq, counts


def read_csv(filepath: str) -> Tensor4:
    """Read a tensor written by Tensor4.to_csv."""
    if not os.path.exists(filepath):
        raise InputError(f"Tensor file not found: {filepath}")
    with open(filepath, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
    try:
        shape = tuple(int(k) for k in header.split(","))
    except ValueError:
        raise DimensionError(f"Bad tensor header {header!r} in {filepath}")
    if len(shape) != 4:
        raise DimensionError(f"Tensor header needs 4 counts, got {header!r}")
    values = pd.read_csv(filepath, skiprows=1, header=None, dtype=np.float64,
                         float_precision="round_trip")[0].to_numpy()
    return Tensor4.from_flat(shape, values)


def read_binary(filepath: str) -> Tensor4:
    """Read a tensor written by Tensor4.to_binary."""
    if not os.path.exists(filepath):
        raise InputError(f"Tensor file not found: {filepath}")
    with open(filepath, "rb") as fh:
        raw = fh.read()
    if len(raw) < 32:
        raise DimensionError(f"Truncated tensor file {filepath}")
    shape = tuple(int(k) for k in np.frombuffer(raw[:32], dtype="<i8"))
    values = np.frombuffer(raw[32:], dtype="<f8")
    return Tensor4.from_flat(shape, values)

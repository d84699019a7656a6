"""
Output bounds of train-mode normalization and range tracking.

During training every example contributes to its own statistics, so a group
of n_g cells can only produce normalized values in [-sqrt(n_g - 1), sqrt(n_g - 1)].
Inference with moving statistics has no such bound.
"""

import copy
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from errors import ConfigurationError, DomainError
from tensor import Tensor4

MODES = ("train", "infer")
RANGE_COLUMNS = ["layer", "mode", "min", "max", "bound_lo", "bound_hi"]


def output_bound(gamma: float, beta: float, n_g: int) -> Tuple[float, float]:
    """(lo, hi) = beta -/+ |gamma| * sqrt(n_g - 1)."""
    if n_g < 2:
        raise DomainError(f"Output bound needs at least two cells per group, got {n_g}")
    half_width = abs(gamma) * math.sqrt(n_g - 1)
    return beta - half_width, beta + half_width


@dataclass(frozen=True)
class TightnessProbe:
    """Batch [0, a, ..., a] of B values that approaches the lower bound."""
    B: int
    a: float
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.B < 2:
            raise DomainError(f"Tightness probe needs B >= 2, got {self.B}")
        if self.a < 0:
            raise DomainError(f"Tightness probe needs a >= 0, got {self.a}")
        if not self.epsilon > 0:
            raise DomainError(f"Tightness probe needs epsilon > 0, got {self.epsilon}")

    def batch(self) -> Tensor4:
        values = np.full(self.B, float(self.a))
        values[0] = 0.0
        return Tensor4(values.reshape(self.B, 1, 1, 1))


def tightness_value(probe: TightnessProbe) -> float:
    """
    Normalized value of x_0 = 0 in the batch [0, a, ..., a]:
    -(B-1)a / sqrt(a^2 (B-1) + B^2 eps).
    """
    b = probe.B
    a = float(probe.a)
    return -(b - 1) * a / math.sqrt(a * a * (b - 1) + b * b * probe.epsilon)


def tightness_value_literal(probe: TightnessProbe) -> float:
    """The closed form with eps not scaled by B^2; equal to tightness_value when eps -> 0."""
    b = probe.B
    a = float(probe.a)
    return -(b - 1) * a / math.sqrt(a * a * (b - 1) + probe.epsilon)


def tightness_sweep(B: int, a_grid: Iterable[float], epsilon: float = 1e-5) -> pd.DataFrame:
    rows = []
    limit = -math.sqrt(B - 1)
    for a in a_grid:
        probe = TightnessProbe(B=B, a=float(a), epsilon=epsilon)
        rows.append({
            "B": B,
            "a": float(a),
            "epsilon": epsilon,
            "value": tightness_value(probe),
            "literal_value": tightness_value_literal(probe),
            "limit": limit,
        })
    return pd.DataFrame(rows, columns=["B", "a", "epsilon", "value", "literal_value", "limit"])


class RangeTracker:
    """Running min/max of normalization outputs per (layer, mode)."""

    def __init__(self):
        self._ranges: Dict[Tuple[int, str], List[float]] = {}

    def record(self, layer: int, mode: str, values) -> "RangeTracker":
        if mode not in MODES:
            raise ConfigurationError(f"Unknown mode {mode!r}")
        values = values.values if isinstance(values, Tensor4) else np.asarray(values)
        lo, hi = float(np.min(values)), float(np.max(values))
        current = self._ranges.get((layer, mode))
        if current is None:
            self._ranges[(layer, mode)] = [lo, hi]
        else:
            current[0] = min(current[0], lo)
            current[1] = max(current[1], hi)
        return self

    def range(self, layer: int, mode: str) -> Optional[Tuple[float, float]]:
        current = self._ranges.get((layer, mode))
        return None if current is None else (current[0], current[1])

    def keys(self) -> List[Tuple[int, str]]:
        return sorted(self._ranges, key=lambda k: (k[0], MODES.index(k[1])))

    def snapshot(self) -> "RangeTracker":
        return copy.deepcopy(self)

    def to_frame(self, group_cells: Dict[int, int], gamma: float = 1.0,
                 beta: float = 0.0) -> pd.DataFrame:
        """
        One row per tracked (layer, mode) with the train-mode bound for the
        layer's group cell count.
        """
        rows = []
        for layer, mode in self.keys():
            lo, hi = self._ranges[(layer, mode)]
            bound_lo, bound_hi = output_bound(gamma, beta, group_cells[layer])
            rows.append({"layer": layer, "mode": mode, "min": lo, "max": hi,
                         "bound_lo": bound_lo, "bound_hi": bound_hi})
        return pd.DataFrame(rows, columns=RANGE_COLUMNS)


def track(tracker: RangeTracker, y, mode: str, layer: int = 0) -> RangeTracker:
    """Fold the values of y into the running range of (layer, mode)."""
    return tracker.record(layer, mode, y)

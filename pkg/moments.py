"""
Group statistics, exponential moving raw moments and the inference blend.

Moving statistics are kept as raw moments m_x = E[x] and m_x2 = E[x^2] per
channel rather than (mean, variance), so that blending an example's own
statistics with the moving averages is a plain convex combination.
"""

import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from errors import ConfigurationError, DimensionError, DomainError, InputError
from partition import StatPartition
from tensor import Tensor4, group_sums

DEFAULT_RHO = 0.99


@dataclass(frozen=True, eq=False)
class Moments:
    """Per-group mean, raw second moment, ML variance and cell count."""
    mean: np.ndarray
    mean_sq: np.ndarray
    var: np.ndarray
    count: np.ndarray


def _variance(mean: np.ndarray, mean_sq: np.ndarray) -> np.ndarray:
    # clamp absorbs rounding, epsilon is added later by the layer
    return np.maximum(mean_sq - mean * mean, 0.0)


def compute_moments(x: Tensor4, p: StatPartition) -> Moments:
    """Per-group mean and maximum-likelihood variance of x under p."""
    sums, sum_sq, counts = group_sums(x, p)
    mean = sums / counts
    mean_sq = sum_sq / counts
    return Moments(mean=mean, mean_sq=mean_sq, var=_variance(mean, mean_sq), count=counts)


@dataclass(frozen=True, eq=False)
class MovingMoments:
    """Exponential moving averages of E[x] and E[x^2] per channel."""
    m_x: np.ndarray
    m_x2: np.ndarray
    rho: float = DEFAULT_RHO

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ConfigurationError(f"rho must lie in (0, 1), got {self.rho}")
        m_x = np.array(self.m_x, dtype=np.float64).ravel()
        m_x2 = np.array(self.m_x2, dtype=np.float64).ravel()
        if m_x.shape != m_x2.shape:
            raise DimensionError("m_x and m_x2 must have one entry per channel")
        object.__setattr__(self, "m_x", m_x)
        object.__setattr__(self, "m_x2", m_x2)

    @classmethod
    def initial(cls, n_channels: int, rho: float = DEFAULT_RHO) -> "MovingMoments":
        """m_x = 0, m_x2 = 1: unit implied variance."""
        return cls(np.zeros(n_channels), np.ones(n_channels), rho)

    @property
    def n_channels(self) -> int:
        return int(self.m_x.size)

    def implied_var(self) -> np.ndarray:
        return self.m_x2 - self.m_x * self.m_x

    def to_csv(self, filepath: str):
        """`rho=<value>` header line, then `channel,m_x,m_x2` rows."""
        frame = pd.DataFrame({
            "channel": np.arange(self.n_channels),
            "m_x": self.m_x,
            "m_x2": self.m_x2,
        })
        with open(filepath, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"rho={self.rho!r}\n")
            frame.to_csv(fh, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, filepath: str) -> "MovingMoments":
        if not os.path.exists(filepath):
            raise InputError(f"Moving moments file not found: {filepath}")
        with open(filepath, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
        if not header.startswith("rho="):
            raise InputError(f"Missing rho header in {filepath}")
        rho = float(header[len("rho="):])
        frame = pd.read_csv(filepath, skiprows=1, float_precision="round_trip")
        frame = frame.sort_values("channel")
        return cls(frame["m_x"].to_numpy(), frame["m_x2"].to_numpy(), rho)


def update_moving(m: MovingMoments, x: Tensor4) -> MovingMoments:
    """One exponential-average step from the per-channel moments of batch x."""
    if x.n_channels != m.n_channels:
        raise DimensionError(
            f"Batch has {x.n_channels} channels, moving moments track {m.n_channels}")
    batch_mean = x.values.mean(axis=(0, 2, 3))
    batch_mean_sq = (x.values * x.values).mean(axis=(0, 2, 3))
    rho = m.rho
    return MovingMoments(
        m_x=rho * m.m_x + (1.0 - rho) * batch_mean,
        m_x2=rho * m.m_x2 + (1.0 - rho) * batch_mean_sq,
        rho=rho,
    )


def from_mean_var(mean, var, rho: float = DEFAULT_RHO) -> MovingMoments:
    """Convert conventional (mean, variance) statistics to raw moving moments."""
    mean = np.asarray(mean, dtype=np.float64).ravel()
    var = np.asarray(var, dtype=np.float64).ravel()
    if mean.shape != var.shape:
        raise DimensionError("mean and var must have one entry per channel")
    if np.any(var < 0):
        raise DomainError("Variance must be non-negative")
    return MovingMoments(m_x=mean, m_x2=var + mean * mean, rho=rho)


def group_moving(moving: MovingMoments, p: StatPartition):
    """Moving moments averaged over each group's member channels."""
    if p.shape[1] != moving.n_channels:
        raise DimensionError(
            f"Partition has {p.shape[1]} channels, moving moments track {moving.n_channels}")
    members = np.bincount(p.member_groups, minlength=p.n_groups)
    m_x = np.bincount(p.member_groups, weights=moving.m_x[p.member_channels],
                      minlength=p.n_groups) / members
    m_x2 = np.bincount(p.member_groups, weights=moving.m_x2[p.member_channels],
                       minlength=p.n_groups) / members
    return m_x, m_x2


def blend(example: Moments, moving: MovingMoments, alpha: float, p: StatPartition,
          extrapolate: bool = False) -> Moments:
    """
    Blend example statistics with moving moments:
    mean = alpha*E[x] + (1-alpha)*m_x, second moment likewise, var = second - mean^2.

    `extrapolate` admits alpha > 1 for wide sweeps.
    """
    if not np.isfinite(alpha) or alpha < 0.0 or (alpha > 1.0 and not extrapolate):
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    if example.mean.shape != (p.n_groups,):
        raise DimensionError(
            f"Example moments cover {example.mean.shape[0]} groups, partition has {p.n_groups}")
    m_x, m_x2 = group_moving(moving, p)
    mean = alpha * example.mean + (1.0 - alpha) * m_x
    mean_sq = alpha * example.mean_sq + (1.0 - alpha) * m_x2
    return Moments(mean=mean, mean_sq=mean_sq, var=_variance(mean, mean_sq), count=example.count)

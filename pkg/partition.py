"""
Normalization schemes expressed as partitions of the cell grid.

Every scheme (batch, ghost, group, batch-group, plus layer and instance as
named special cases) assigns each (example, channel, row, column) cell to
exactly one statistics group. Groups are contiguous example blocks crossed
with contiguous channel blocks, spanning all spatial cells.
"""

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from errors import ConfigurationError, DimensionError

Shape = Tuple[int, int, int, int]
Mode = Literal["train", "infer"]

SCHEME_KINDS = ("batch", "ghost", "group", "batch_group", "layer", "instance")

_SCHEME_PATTERN = re.compile(
    r"^\s*(?P<kind>batch|ghost|group|batchgroup|batch_group|layer|instance)"
    r"(?::(?P<a>\d+))?(?::(?P<b>\d+))?"
    r"(?:\s*,\s*alpha\s*=\s*(?P<alpha>[-+0-9.eE]+))?\s*$"
)


class NormScheme(BaseModel):
    """Which normalizer to apply, plus the inference blend alpha."""
    model_config = ConfigDict(frozen=True)

    kind: Literal["batch", "ghost", "group", "batch_group", "layer", "instance"] = "batch"
    ghost_size: Optional[int] = None
    n_channel_groups: Optional[int] = None
    example_group_size: Optional[int] = None
    alpha: float = 0.0

    @model_validator(mode="before")
    @classmethod
    def _accept_string(cls, data):
        if isinstance(data, str):
            return _parse_scheme_fields(data)
        return data

    @model_validator(mode="after")
    def _check_fields(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.kind == "ghost" and (self.ghost_size is None or self.ghost_size < 1):
            raise ValueError("ghost scheme needs ghost_size >= 1")
        if self.kind in ("group", "batch_group") and (
                self.n_channel_groups is None or self.n_channel_groups < 1):
            raise ValueError(f"{self.kind} scheme needs n_channel_groups >= 1")
        if self.kind == "batch_group" and (
                self.example_group_size is None or self.example_group_size < 1):
            raise ValueError("batch_group scheme needs example_group_size >= 1")
        return self

    def __str__(self) -> str:
        return self.spec_string()

    def spec_string(self, with_alpha: bool = True) -> str:
        """Config-string form, e.g. `ghost:4` or `batchgroup:2:4,alpha=0.1`."""
        if self.kind == "ghost":
            text = f"ghost:{self.ghost_size}"
        elif self.kind == "group":
            text = f"group:{self.n_channel_groups}"
        elif self.kind == "batch_group":
            text = f"batchgroup:{self.example_group_size}:{self.n_channel_groups}"
        else:
            text = self.kind
        if with_alpha and self.alpha != 0.0:
            text += f",alpha={self.alpha!r}"
        return text

    def with_alpha(self, alpha: float) -> "NormScheme":
        return self.model_copy(update={"alpha": float(alpha)})

    @property
    def uses_cross_example_statistics(self) -> bool:
        if self.kind in ("batch", "ghost"):
            return True
        return self.kind == "batch_group" and self.example_group_size > 1

    def grouping(self, n_examples: int, n_channels: int, mode: Mode = "train") -> Tuple[int, int]:
        """
        (examples per group, number of channel groups) for a batch shape.

        Batch-dependent schemes fall back to one example per group at
        inference so each example is normalized from itself only.
        """
        self.validate_for(n_examples, n_channels, mode)
        if self.kind == "batch":
            examples = n_examples
            groups = n_channels
        elif self.kind == "ghost":
            examples = self.ghost_size
            groups = n_channels
        elif self.kind == "group":
            return 1, self.n_channel_groups
        elif self.kind == "layer":
            return 1, 1
        elif self.kind == "instance":
            return 1, n_channels
        else:
            examples = self.example_group_size
            groups = self.n_channel_groups
        if mode == "infer":
            examples = 1
        return examples, groups

    def validate_for(self, n_examples: int, n_channels: int, mode: Mode = "train"):
        """
        Raise ConfigurationError unless the divisibility constraints hold.
        Example-block sizes only constrain training batches.
        """
        train = mode == "train"
        if train and self.kind == "ghost" and n_examples % self.ghost_size != 0:
            raise ConfigurationError(
                f"ghost size {self.ghost_size} does not divide batch size {n_examples}")
        if self.kind in ("group", "batch_group") and n_channels % self.n_channel_groups != 0:
            raise ConfigurationError(
                f"{self.n_channel_groups} channel groups do not divide {n_channels} channels")
        if train and self.kind == "batch_group" and n_examples % self.example_group_size != 0:
            raise ConfigurationError(
                f"example group size {self.example_group_size} does not divide "
                f"batch size {n_examples}")


def _parse_scheme_fields(text: str) -> dict:
    match = _SCHEME_PATTERN.match(text)
    if not match:
        raise ValueError(f"Unrecognized normalization scheme {text!r}")
    kind = match.group("kind")
    a, b = match.group("a"), match.group("b")
    fields = {}
    if kind == "ghost":
        if a is None or b is not None:
            raise ValueError(f"Expected ghost:B', got {text!r}")
        fields = {"kind": "ghost", "ghost_size": int(a)}
    elif kind == "group":
        if a is None or b is not None:
            raise ValueError(f"Expected group:G, got {text!r}")
        fields = {"kind": "group", "n_channel_groups": int(a)}
    elif kind in ("batchgroup", "batch_group"):
        if a is None or b is None:
            raise ValueError(f"Expected batchgroup:E:G, got {text!r}")
        fields = {"kind": "batch_group", "example_group_size": int(a),
                  "n_channel_groups": int(b)}
    else:
        if a is not None:
            raise ValueError(f"{kind} takes no size arguments, got {text!r}")
        fields = {"kind": kind}
    if match.group("alpha") is not None:
        fields["alpha"] = float(match.group("alpha"))
    return fields


def parse_scheme(text: str) -> NormScheme:
    """Parse `batch`, `ghost:B'`, `group:G`, `batchgroup:E:G`, `layer`, `instance`."""
    try:
        return NormScheme.model_validate(text)
    except ValueError as e:
        raise ConfigurationError(str(e))


@dataclass(frozen=True, eq=False)
class StatPartition:
    """Assignment of every cell of an (n, c, h, w) grid to one statistics group."""
    shape: Shape
    labels: np.ndarray
    n_groups: int
    channels_of_group: Tuple[Tuple[int, ...], ...]
    member_groups: np.ndarray
    member_channels: np.ndarray

    @classmethod
    def from_labels(cls, shape: Shape, labels) -> "StatPartition":
        shape = tuple(int(k) for k in shape)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != shape:
            raise DimensionError(f"Label grid shape {labels.shape} does not match {shape}")
        if labels.size and labels.min() < 0:
            raise DimensionError("Group ids must be non-negative")
        n_groups = int(labels.max()) + 1
        counts = np.bincount(labels.ravel(), minlength=n_groups)
        if np.any(counts == 0):
            raise DimensionError("Every group id below the maximum must own at least one cell")

        n_channels = shape[1]
        channel_index = np.broadcast_to(np.arange(n_channels).reshape(1, -1, 1, 1), shape)
        pairs = np.unique(labels.ravel() * n_channels + channel_index.ravel())
        member_groups = pairs // n_channels
        member_channels = pairs % n_channels
        split_at = np.searchsorted(member_groups, np.arange(1, n_groups))
        channels_of_group = tuple(tuple(int(c) for c in chunk)
                                  for chunk in np.split(member_channels, split_at))

        labels = labels.copy()
        for arr in (labels, member_groups, member_channels):
            arr.setflags(write=False)
        return cls(shape, labels, n_groups, channels_of_group, member_groups, member_channels)

    @classmethod
    def singletons(cls, shape: Shape) -> "StatPartition":
        """One group per cell."""
        return cls.from_labels(shape, np.arange(int(np.prod(shape))).reshape(shape))

    @property
    def flat_labels(self) -> np.ndarray:
        return self.labels.ravel()

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.flat_labels, minlength=self.n_groups)

    def canonical_labels(self) -> np.ndarray:
        """Labels renumbered by first appearance, for comparing groupings."""
        _, first, inverse = np.unique(self.flat_labels, return_index=True, return_inverse=True)
        order = np.argsort(np.argsort(first))
        return order[inverse].reshape(self.shape)


@lru_cache(maxsize=256)
def _structured_partition(shape: Shape, examples_per_group: int, n_channel_groups: int) -> StatPartition:
    n, c, h, w = shape
    example_block = np.arange(n) // examples_per_group
    channel_block = np.arange(c) // (c // n_channel_groups)
    grid = example_block[:, None] * n_channel_groups + channel_block[None, :]
    labels = np.broadcast_to(grid[:, :, None, None], shape)
    return StatPartition.from_labels(shape, labels)


def partition_of(scheme: NormScheme, shape: Shape, mode: Mode = "train") -> StatPartition:
    """Statistics partition of `scheme` for a tensor shape in train or infer mode."""
    shape = tuple(int(k) for k in shape)
    if len(shape) != 4:
        raise DimensionError(f"Expected an (n, c, h, w) shape, got {shape}")
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"Unknown mode {mode!r}")
    examples, groups = scheme.grouping(shape[0], shape[1], mode)
    partition = _structured_partition(shape, examples, groups)
    if mode == "train":
        if shape[0] == 1 and scheme.uses_cross_example_statistics:
            raise ConfigurationError(f"{scheme.spec_string(False)} needs more than one example per batch")
        if partition.counts.min() < 2:
            raise ConfigurationError(
                f"{scheme.spec_string(False)} on {shape} gives single-cell groups in training")
    return partition


def reduces_to(scheme_a: NormScheme, scheme_b: NormScheme, shape: Shape) -> bool:
    """True iff both schemes group the cells of `shape` identically in train mode."""
    part_a = partition_of(scheme_a, shape, "train")
    part_b = partition_of(scheme_b, shape, "train")
    if part_a.n_groups != part_b.n_groups:
        return False
    return bool(np.array_equal(part_a.canonical_labels(), part_b.canonical_labels()))


def group_cells(scheme: NormScheme, shape: Shape, mode: Mode = "train") -> int:
    """Cell count of the smallest group (all groups are equal for built-in schemes)."""
    return int(partition_of(scheme, shape, mode).counts.min())

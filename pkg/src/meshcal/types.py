"""Domain value types shared by every stage of the pipeline.

All containers are frozen; array fields are copied and marked read-only on
construction so instances can be shared between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NodeId:
    label: str
    index: int

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class Position2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite position ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def distance_to(self, other: Position2D) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    @classmethod
    def from_array(cls, xy) -> Position2D:
        return cls(float(xy[0]), float(xy[1]))


@dataclass(frozen=True)
class DistanceMatrix:
    """Measured ranges of one epoch.

    ``entries[i, j]`` is only meaningful where ``mask[i, j]`` is true. Absent
    entries are stored as NaN so they can never leak into arithmetic silently.
    The diagonal is always absent.
    """

    epoch: float
    entries: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError(f"distance matrix must be square, got {entries.shape}")
        if mask.shape != entries.shape:
            raise ValueError("mask shape does not match entries")
        np.fill_diagonal(mask, False)
        present = entries[mask]
        if not np.all(np.isfinite(present)) or np.any(present < 0):
            raise ValueError("present ranges must be finite and non-negative")
        entries = np.where(mask, entries, np.nan)
        object.__setattr__(self, "entries", _frozen_array(entries, float))
        object.__setattr__(self, "mask", _frozen_array(mask, bool))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def has(self, i: int, j: int) -> bool:
        return bool(self.mask[i, j])

    def get(self, i: int, j: int) -> float | None:
        return float(self.entries[i, j]) if self.mask[i, j] else None

    def is_symmetric(self) -> bool:
        if not np.array_equal(self.mask, self.mask.T):
            return False
        m = self.mask
        return bool(np.all(self.entries[m] == self.entries.T[m]))

    def with_mask(self, mask: np.ndarray) -> DistanceMatrix:
        """Copy with additional entries hidden (``mask`` is and-ed in)."""
        return DistanceMatrix(self.epoch, self.entries, self.mask & np.asarray(mask, bool))

    @classmethod
    def from_array(cls, epoch: float, values) -> DistanceMatrix:
        """Build from an array where NaN marks a missing range."""
        values = np.asarray(values, dtype=float)
        return cls(epoch, values, np.isfinite(values))


@dataclass(frozen=True)
class VisibilityMatrix:
    los: np.ndarray

    def __post_init__(self):
        los = np.array(self.los, dtype=bool)
        if los.ndim != 2 or los.shape[0] != los.shape[1]:
            raise ValueError("visibility matrix must be square")
        if not np.array_equal(los, los.T):
            raise ValueError("visibility matrix must be symmetric")
        np.fill_diagonal(los, True)
        object.__setattr__(self, "los", _frozen_array(los, bool))

    @property
    def n(self) -> int:
        return self.los.shape[0]

    @classmethod
    def all_los(cls, n: int) -> VisibilityMatrix:
        return cls(np.ones((n, n), dtype=bool))


@dataclass(frozen=True)
class NetworkTruth:
    positions: tuple[Position2D, ...]
    visibility: VisibilityMatrix
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(self.positions))
        labels = tuple(self.labels) or tuple(f"N{i:02d}" for i in range(len(self.positions)))
        object.__setattr__(self, "labels", labels)
        if len(self.positions) != self.visibility.n:
            raise ValueError("positions and visibility disagree on node count")
        if len(labels) != len(self.positions) or len(set(labels)) != len(labels):
            raise ValueError("labels must be unique, one per node")

    @property
    def n(self) -> int:
        return len(self.positions)

    def xy(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.positions])

    def distances(self) -> np.ndarray:
        xy = self.xy()
        return np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=-1)

    def node_ids(self) -> list[NodeId]:
        return [NodeId(lbl, i) for i, lbl in enumerate(self.labels)]


def symmetrize(matrix: DistanceMatrix) -> DistanceMatrix:
    """Average two-sided readings and mirror one-sided ones."""
    e = np.where(matrix.mask, matrix.entries, 0.0)
    m = matrix.mask.astype(float)
    count = m + m.T
    total = e + e.T
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count
    return DistanceMatrix(matrix.epoch, mean, count > 0)


def true_distance(truth: NetworkTruth, i: int, j: int) -> float:
    n = truth.n
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"node index out of range for {n} nodes: ({i}, {j})")
    return truth.positions[i].distance_to(truth.positions[j])


def resolve_labels(labels: Sequence[str], wanted: Sequence[str]) -> list[int]:
    """Map node labels to indices, raising KeyError listing what exists."""
    lookup = {lbl: i for i, lbl in enumerate(labels)}
    out = []
    for w in wanted:
        if w not in lookup:
            raise KeyError(f"unknown node label {w!r}; available: {', '.join(labels)}")
        out.append(lookup[w])
    return out


@dataclass(frozen=True)
class EpochResult:
    """Per-epoch output of either calibration method.

    ``estimates[i]`` is None when the method produced nothing for node i.
    ``available[i]`` follows each method's own availability rule; the grid
    filter may emit an estimate from its prior while flagging the node
    unavailable.
    """

    epoch: float
    estimates: tuple[Position2D | None, ...]
    available: tuple[bool, ...]
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "estimates", tuple(self.estimates))
        object.__setattr__(self, "available", tuple(bool(a) for a in self.available))
        if len(self.estimates) != len(self.available):
            raise ValueError("estimates and availability lengths differ")
        notes = tuple(self.notes) or ("",) * len(self.estimates)
        object.__setattr__(self, "notes", notes)

    @property
    def n(self) -> int:
        return len(self.estimates)

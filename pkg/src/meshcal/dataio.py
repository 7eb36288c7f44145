"""Dataset text format and ground-truth frame transformation.

File grammar::

    # nodes: <label> <label> ...          (required, first section line)
    # visibility                          (optional: N rows of 0/1)
    # truth                               (optional: N rows "x y", metres)
    t=<seconds>                           (one per epoch, followed by N rows)
    <N whitespace-separated ranges>       ("-" or "nan" marks a missing range)

Rows may instead be comma-separated, in which case an empty field is also a
missing range. Other ``#`` lines and blank lines are ignored. Ranges and
coordinates are written with four decimals.
"""

from __future__ import annotations

import io
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .closed_form import FrameAssumptions
from .errors import DegenerateFrame, DimensionMismatch, NonmonotoneTimestamps, ParseError
from .types import DistanceMatrix, NetworkTruth, Position2D, VisibilityMatrix, symmetrize

log = logging.getLogger(__name__)

MISSING_TOKENS = {"-", "nan", "NaN", "NAN", ""}
_NODES = re.compile(r"^#\s*nodes\s*:(.*)$", re.IGNORECASE)
_SECTION = re.compile(r"^#\s*(visibility|truth)\s*$", re.IGNORECASE)
_EPOCH = re.compile(r"^t\s*=\s*(\S+)\s*$")


@dataclass(frozen=True)
class DatasetFile:
    header: tuple[str, ...]
    records: tuple[DistanceMatrix, ...] = ()
    visibility: VisibilityMatrix | None = None
    ground_truth: tuple[Position2D, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "header", tuple(self.header))
        object.__setattr__(self, "records", tuple(self.records))
        n = len(self.header)
        if len(set(self.header)) != n:
            raise ValueError("node labels must be unique")
        for rec in self.records:
            if rec.n != n:
                raise DimensionMismatch(f"epoch t={rec.epoch} has {rec.n} nodes, header has {n}")
        times = [r.epoch for r in self.records]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("timestamps must be nondecreasing")
        if self.visibility is not None and self.visibility.n != n:
            raise DimensionMismatch("visibility matrix size does not match header")
        if self.ground_truth is not None:
            object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
            if len(self.ground_truth) != n:
                raise DimensionMismatch("ground truth count does not match header")

    @property
    def n(self) -> int:
        return len(self.header)

    def truth(self) -> NetworkTruth | None:
        """Raw ground truth, LOS everywhere if no visibility section was given."""
        if self.ground_truth is None:
            return None
        vis = self.visibility or VisibilityMatrix.all_los(self.n)
        return NetworkTruth(self.ground_truth, vis, self.header)

    def frame(self, labels: Sequence[str]) -> FrameAssumptions:
        return FrameAssumptions.from_labels(self.header, labels)


def _split_row(line: str) -> list[str]:
    if "," in line:
        return [tok.strip() for tok in line.split(",")]
    return line.split()


def _parse_range(tok: str, lineno: int) -> float:
    if tok in MISSING_TOKENS:
        return math.nan
    try:
        value = float(tok)
    except ValueError:
        raise ParseError(f"not a number: {tok!r}", lineno) from None
    if not math.isfinite(value) or value < 0:
        raise ParseError(f"range must be finite and non-negative: {tok!r}", lineno)
    return value


def parse_dataset(source: str | Path | TextIO) -> DatasetFile:
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            return _parse(fh)
    return _parse(source)


def parses(text: str) -> DatasetFile:
    return _parse(io.StringIO(text))


def _parse(stream: Iterable[str]) -> DatasetFile:
    header: list[str] | None = None
    visibility = None
    truth = None
    records: list[tuple[float, np.ndarray, int]] = []

    block_kind: str | None = None
    block_rows: list[list[str]] = []
    block_start = 0
    block_time = 0.0

    def close_block(lineno: int):
        nonlocal visibility, truth
        if block_kind is None:
            return
        n = len(header)
        if len(block_rows) != n:
            raise ParseError(
                f"{block_kind} block starting at line {block_start} has {len(block_rows)} rows, expected {n}",
                lineno,
            )
        if block_kind == "visibility":
            try:
                los = np.array([[int(t) for t in row] for row in block_rows], dtype=bool)
                visibility = VisibilityMatrix(los)
            except ValueError as exc:
                raise ParseError(f"bad visibility matrix: {exc}", block_start) from None
        elif block_kind == "truth":
            try:
                truth = tuple(Position2D(float(x), float(y)) for x, y in block_rows)
            except ValueError as exc:
                raise ParseError(f"bad truth coordinates: {exc}", block_start) from None
        else:
            records.append((block_time, np.array(block_rows_values), block_start))

    block_rows_values: list[list[float]] = []
    lineno = 0
    for lineno, raw in enumerate(stream, 1):
        line = raw.strip()
        if not line:
            continue
        if header is None:
            m = _NODES.match(line)
            if m:
                header = m.group(1).split()
                if not header:
                    raise ParseError("empty node list", lineno)
                continue
            if line.startswith("#"):
                continue
            raise ParseError("data before the '# nodes:' header", lineno)
        section = _SECTION.match(line)
        epoch = _EPOCH.match(line)
        if section or epoch:
            close_block(lineno)
            block_rows, block_rows_values = [], []
            block_start = lineno
            if section:
                block_kind = section.group(1).lower()
            else:
                block_kind = "epoch"
                try:
                    block_time = float(epoch.group(1))
                except ValueError:
                    raise ParseError(f"bad timestamp {epoch.group(1)!r}", lineno) from None
            continue
        if line.startswith("#"):
            continue
        if block_kind is None:
            raise ParseError("row outside any block", lineno)
        tokens = _split_row(line)
        n = len(header)
        expected = 2 if block_kind == "truth" else n
        if len(tokens) != expected:
            raise DimensionMismatch(f"row has {len(tokens)} fields, expected {expected}", lineno)
        if len(block_rows) >= n:
            raise ParseError(f"{block_kind} block has more than {n} rows", lineno)
        block_rows.append(tokens)
        if block_kind == "epoch":
            block_rows_values.append([_parse_range(t, lineno) for t in tokens])
    if header is None:
        raise ParseError("missing '# nodes:' header", lineno or None)
    close_block(lineno + 1)

    times = [t for t, _, _ in records]
    if any(b < a for a, b in zip(times, times[1:])):
        warnings.warn("timestamps not monotone; records reordered by time", NonmonotoneTimestamps, stacklevel=2)
        records.sort(key=lambda r: r[0])

    matrices = []
    asymmetric = 0
    for t, values, start in records:
        np.fill_diagonal(values, np.nan)
        dm = DistanceMatrix.from_array(t, values)
        if not dm.is_symmetric():
            asymmetric += 1
            dm = symmetrize(dm)
        matrices.append(dm)
    if asymmetric:
        log.info("symmetrized %d of %d epochs with one-sided or unequal readings", asymmetric, len(matrices))
    return DatasetFile(header, matrices, visibility, truth)


def _fmt(value: float) -> str:
    return "-" if not math.isfinite(value) else f"{value:.4f}"


def write_dataset(data: DatasetFile, path: str | Path | TextIO) -> None:
    if not isinstance(path, (str, Path)):
        _write(data, path)
        return
    with open(path, "w") as fh:
        _write(data, fh)


def _write(data: DatasetFile, out: TextIO) -> None:
    out.write("# nodes: " + " ".join(data.header) + "\n")
    if data.visibility is not None:
        out.write("# visibility\n")
        for row in data.visibility.los:
            out.write(" ".join("1" if v else "0" for v in row) + "\n")
    if data.ground_truth is not None:
        out.write("# truth\n")
        for p in data.ground_truth:
            out.write(f"{p.x:.4f} {p.y:.4f}\n")
    for rec in data.records:
        out.write(f"t={rec.epoch:.4f}\n")
        for row in rec.entries:
            out.write(" ".join(_fmt(v) for v in row) + "\n")


def reorder(data: DatasetFile, labels: Sequence[str]) -> DatasetFile:
    """Permute every section into the node order given by ``labels``.

    This is the hook for sources whose matrices use another column order.
    """
    if sorted(labels) != sorted(data.header):
        raise ValueError("reorder labels must be a permutation of the header")
    idx = [data.header.index(lbl) for lbl in labels]
    ix = np.ix_(idx, idx)
    records = [DistanceMatrix(r.epoch, r.entries[ix], r.mask[ix]) for r in data.records]
    vis = None if data.visibility is None else VisibilityMatrix(data.visibility.los[ix])
    gt = None if data.ground_truth is None else [data.ground_truth[i] for i in idx]
    return DatasetFile(labels, records, vis, gt)


def transform_ground_truth(raw_positions: Sequence[Position2D], frame: FrameAssumptions) -> list[Position2D]:
    """Rigidly move surveyed positions into the calibration frame.

    The origin node goes to (0, 0), the axis node onto the positive x-axis,
    and the plane is mirrored if needed so the half-plane node has y >= 0.
    """
    xy = np.array([[p.x, p.y] for p in raw_positions], dtype=float)
    xy = xy - xy[frame.origin]
    ax, ay = xy[frame.axis]
    length = math.hypot(ax, ay)
    if length == 0.0:
        raise DegenerateFrame("origin and axis nodes coincide")
    c, s = ax / length, ay / length
    rot = np.array([[c, s], [-s, c]])
    xy = xy @ rot.T
    xy[frame.origin] = 0.0
    xy[frame.axis] = (length, 0.0)
    if xy[frame.halfplane, 1] < 0:
        xy[:, 1] = -xy[:, 1]
    return [Position2D(float(x), float(y)) for x, y in xy]


def dataset_from_simulation(truth: NetworkTruth, matrices: Sequence[DistanceMatrix]) -> DatasetFile:
    return DatasetFile(truth.labels, matrices, truth.visibility, truth.positions)

"""Closed-form (CF) self-calibration baseline.

The frame is rebuilt from scratch every epoch: a0 at the origin, a1 on the
positive x-axis at the measured a0-a1 range, a2 in the upper half-plane. The
remaining nodes are placed by Gauss-Newton least squares against every node
already placed in that epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    Ambiguous,
    CalibrationError,
    DegenerateFrame,
    ImaginaryRoot,
    InsufficientReferences,
    MissingRange,
    NoConvergence,
)
from .types import DistanceMatrix, EpochResult, Position2D, resolve_labels

MAX_ITERATIONS = 50
STEP_TOLERANCE = 1e-9
# Relative smallest singular value below which references count as collinear.
COLLINEAR_TOLERANCE = 1e-9

CfEpochResult = EpochResult


@dataclass(frozen=True)
class FrameAssumptions:
    """Node indices that fix the coordinate frame."""

    origin: int
    axis: int
    halfplane: int

    def __post_init__(self):
        if len({self.origin, self.axis, self.halfplane}) != 3:
            raise ValueError("frame nodes must be three distinct nodes")

    @property
    def nodes(self) -> tuple[int, int, int]:
        return (self.origin, self.axis, self.halfplane)

    @classmethod
    def from_labels(cls, labels: Sequence[str], names: Sequence[str]) -> FrameAssumptions:
        if len(names) != 3:
            raise ValueError("a frame needs exactly three node labels")
        return cls(*resolve_labels(labels, names))


@dataclass(frozen=True)
class Fix:
    position: Position2D
    residual_norm: float
    iterations: int


def establish_frame(matrix: DistanceMatrix, frame: FrameAssumptions) -> tuple[Position2D, Position2D]:
    z01 = matrix.get(frame.origin, frame.axis)
    if z01 is None:
        raise MissingRange(frame.origin, frame.axis)
    if z01 <= 0.0:
        raise DegenerateFrame("axis node coincides with the origin")
    return Position2D(0.0, 0.0), Position2D(z01, 0.0)


def place_anchor2(a1: Position2D, z02: float | None, z12: float | None) -> Position2D:
    if z02 is None:
        raise MissingRange(0, 2)
    if z12 is None:
        raise MissingRange(1, 2)
    x1 = a1.x
    if x1 <= 0.0:
        raise DegenerateFrame("axis node must lie on the positive x-axis")
    x = (z02 * z02 - z12 * z12 + x1 * x1) / (2.0 * x1)
    h = z02 * z02 - x * x
    if h < 0.0:
        raise ImaginaryRoot(f"no real intersection: z02^2={z02 * z02:.6g} < x^2={x * x:.6g}")
    return Position2D(x, math.sqrt(h))


def _circle_pair(c0: np.ndarray, r0: float, c1: np.ndarray, r1: float, strict: bool):
    """Both intersection points of two circles.

    Non-intersecting circles raise ImaginaryRoot when ``strict``; otherwise
    the point on the centre line closest to both circles is returned twice.
    """
    delta = c1 - c0
    base = float(np.hypot(*delta))
    if base == 0.0:
        raise DegenerateFrame("seed references coincide")
    u = delta / base
    along = (r0 * r0 - r1 * r1 + base * base) / (2.0 * base)
    h2 = r0 * r0 - along * along
    if h2 < 0.0:
        if strict:
            raise ImaginaryRoot("seed circles do not intersect")
        h2 = 0.0
    normal = np.array([-u[1], u[0]])
    foot = c0 + along * u
    h = math.sqrt(h2)
    return foot + h * normal, foot - h * normal


def _collinear(points: np.ndarray) -> bool:
    centred = points - points.mean(axis=0)
    s = np.linalg.svd(centred, compute_uv=False)
    if s[0] == 0.0:
        return True
    return s[-1] <= COLLINEAR_TOLERANCE * s[0]


def _reflect(p: np.ndarray, points: np.ndarray) -> np.ndarray:
    centre = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centre)
    direction = vt[0]
    rel = p - centre
    along = direction * (rel @ direction)
    return centre + 2 * along - rel


def _cost(p: np.ndarray, refs: np.ndarray, ranges: np.ndarray) -> float:
    r = np.linalg.norm(refs - p, axis=1) - ranges
    return float(r @ r)


def _gauss_newton(seed: np.ndarray, refs: np.ndarray, ranges: np.ndarray) -> tuple[np.ndarray, int]:
    p = seed.astype(float).copy()
    cost = _cost(p, refs, ranges)
    for it in range(1, MAX_ITERATIONS + 1):
        diff = p - refs
        dist = np.linalg.norm(diff, axis=1)
        dist = np.where(dist < 1e-12, 1e-12, dist)
        jac = diff / dist[:, None]
        resid = dist - ranges
        step, *_ = np.linalg.lstsq(jac, -resid, rcond=None)
        # Step halving keeps the iteration a descent method on bad geometry.
        scale = 1.0
        for _ in range(30):
            trial = p + scale * step
            trial_cost = _cost(trial, refs, ranges)
            if trial_cost <= cost:
                break
            scale *= 0.5
        else:
            trial, trial_cost = p, cost
        moved = float(np.linalg.norm(trial - p))
        p, cost = trial, trial_cost
        if moved < STEP_TOLERANCE:
            return p, it
    raise NoConvergence(f"Gauss-Newton did not converge in {MAX_ITERATIONS} iterations")


def trilaterate_node(
    references: Sequence[tuple[Position2D, float]],
    min_refs: int = 3,
    strict_seed: bool = False,
) -> Fix:
    """Least-squares position from ranges to placed references.

    The first two references seed the solver with their circle intersection;
    the candidate that fits the remaining references better is refined. With
    ``strict_seed`` a non-intersecting seed pair is an error rather than
    being projected onto the centre line.

    Raises:
        InsufficientReferences: fewer than ``min_refs`` references.
        Ambiguous: all references are collinear, so the mirror image of the
            solution fits equally well.
        ImaginaryRoot: strict seed circles do not intersect.
        NoConvergence: iteration cap reached.
    """
    if len(references) < max(min_refs, 2):
        raise InsufficientReferences(f"{len(references)} references, need {max(min_refs, 2)}")
    refs = np.array([[p.x, p.y] for p, _ in references])
    ranges = np.array([z for _, z in references], dtype=float)

    cand_a, cand_b = _circle_pair(refs[0], ranges[0], refs[1], ranges[1], strict_seed)
    seed = cand_a if _cost(cand_a, refs, ranges) <= _cost(cand_b, refs, ranges) else cand_b
    p, iterations = _gauss_newton(seed, refs, ranges)
    resid = float(np.sqrt(_cost(p, refs, ranges)))
    if _collinear(refs):
        mirror = _reflect(p, refs)
        raise Ambiguous(
            "references are collinear; mirror solutions are indistinguishable",
            candidates=(Position2D.from_array(p), Position2D.from_array(mirror)),
        )
    return Fix(Position2D.from_array(p), resid, iterations)


def run_cf_epoch(
    matrix: DistanceMatrix,
    frame: FrameAssumptions,
    min_refs: int = 3,
    anchored: bool = True,
) -> EpochResult:
    """Calibrate one epoch; failures only clear availability flags.

    In ``anchored`` mode (the default) a node is placed only when both its
    ranges to the origin and axis nodes are present, mirroring the classic
    construction where every node is first intersected from a0 and a1. With
    ``anchored=False`` any ``min_refs`` placed references suffice.
    """
    n = matrix.n
    estimates: list[Position2D | None] = [None] * n
    notes = [""] * n
    o, a, h = frame.nodes
    try:
        a0, a1 = establish_frame(matrix, frame)
        a2 = place_anchor2(a1, matrix.get(o, h), matrix.get(a, h))
    except CalibrationError as exc:
        reason = type(exc).__name__
        return EpochResult(matrix.epoch, estimates, [False] * n, [f"frame:{reason}"] * n)

    estimates[o], estimates[a], estimates[h] = a0, a1, a2
    placed = [o, a, h]
    pending = [i for i in range(n) if i not in placed]
    progress = True
    while pending and progress:
        progress = False
        for i in list(pending):
            refs = _references_for(matrix, i, placed, estimates, frame, anchored)
            if refs is None:
                notes[i] = "MissingRange"
                continue
            try:
                fix = trilaterate_node(refs, min_refs=min_refs, strict_seed=anchored)
            except CalibrationError as exc:
                notes[i] = type(exc).__name__
                continue
            estimates[i] = fix.position
            notes[i] = ""
            placed.append(i)
            pending.remove(i)
            progress = True
    available = [e is not None for e in estimates]
    return EpochResult(matrix.epoch, estimates, available, notes)


def _references_for(matrix, i, placed, estimates, frame, anchored):
    with_range = [j for j in placed if matrix.mask[i, j]]
    if anchored:
        if not (matrix.mask[i, frame.origin] and matrix.mask[i, frame.axis]):
            return None
        head = [frame.origin, frame.axis]
        with_range = head + [j for j in with_range if j not in head]
    return [(estimates[j], float(matrix.entries[i, j])) for j in with_range]


def run_cf(
    dataset: Iterable[DistanceMatrix],
    frame: FrameAssumptions,
    min_refs: int = 3,
    anchored: bool = True,
) -> list[EpochResult]:
    return [run_cf_epoch(m, frame, min_refs=min_refs, anchored=anchored) for m in dataset]

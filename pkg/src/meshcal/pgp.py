"""Probabilistic grid-based positioning (PGP) over a sequence of epochs.

Each epoch runs the stages in a fixed order: the origin node is pinned, the
axis node's range is tracked by a 1-D histogram filter, the half-plane node
by a grid filter constrained to y >= 0, and every other node by a grid
filter whose measurement update weighs the hypothesis sets of all
established references.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .closed_form import FrameAssumptions
from .errors import AllMassZero
from .grid import (
    GridBelief,
    GridSpec,
    HypothesisSet,
    PgpParams,
    TrackSmoother,
    estimate_position,
    half_plane_mask,
    histogram_filter_a1,
    init_anchor2_grid,
    predict,
    predict_histogram,
    ring_field,
    sample_hypotheses,
)
from .types import DistanceMatrix, EpochResult, Position2D

log = logging.getLogger(__name__)

# References needed before a node's first posterior is kept; with fewer the
# posterior is a ring or mirror pair and top-k prediction would lock onto
# one arbitrary mode.
MIN_INIT_REFS = 3

Observer = Callable[[int, dict], None]


class _Reference:
    """What one established node contributes to others' measurement updates."""

    __slots__ = ("hyps", "position", "spread")

    def __init__(self, hyps: HypothesisSet, position: Position2D, spread: float):
        self.hyps = hyps
        self.position = position
        self.spread = spread


def _axis_hypotheses(bins: np.ndarray, centers: np.ndarray, tau: float) -> HypothesisSet:
    positive = np.flatnonzero(bins > 0)
    order = positive[np.lexsort((positive, -bins[positive]))]
    if tau < 1.0:
        csum = np.cumsum(bins[order])
        order = order[: int(np.searchsorted(csum, tau - 1e-12)) + 1]
    w = bins[order]
    pts = np.column_stack([centers[order], np.zeros(order.size)])
    return HypothesisSet(pts, w / w.sum())


class PgpFilter:
    """Stateful PGP calibration; feed epochs in time order with :meth:`step`."""

    def __init__(self, n: int, frame: FrameAssumptions, spec: GridSpec, params: PgpParams):
        if max(frame.nodes) >= n:
            raise ValueError("frame node index out of range")
        self.n = n
        self.frame = frame
        self.spec = spec
        self.params = params
        self.centers = spec.centers()
        self.upper = half_plane_mask(spec)
        self.axis_bins: np.ndarray | None = None
        self.axis_estimate: float | None = None
        self.beliefs: dict[int, GridBelief] = {}
        self.last_time: float | None = None
        self.fallbacks = 0
        self.resets = 0
        self.misfits = [0] * n
        self.frame_misfits = [0] * n
        self.age = [0] * n
        # Consecutive epochs in which the axis range, then the half-plane
        # node's ranges, agreed with the current estimate.
        self.axis_streak = 0
        self.anchor2_streak = 0
        self.frame_ready = params.settle_epochs == 0
        window = params.median_window if params.smoothing == "median-ema" else 1
        self.smoothers = [TrackSmoother(params.alpha, window) for _ in range(n)]

    # -- references -------------------------------------------------------
    def _anchor_refs(self) -> dict[int, _Reference]:
        o, a, _ = self.frame.nodes
        origin = Position2D(0.0, 0.0)
        refs = {o: _Reference(HypothesisSet.singleton(origin), origin, 0.0)}
        if self.axis_estimate is not None:
            pos = Position2D(self.axis_estimate, 0.0)
            if self.params.a1_mode == "histogram":
                centers = np.linspace(0.0, self.params.d_max, self.params.h_bins)
                hyps = _axis_hypotheses(self.axis_bins, centers, self.params.tau_percent)
                var = float(self.axis_bins @ (centers - self.axis_estimate) ** 2)
                refs[a] = _Reference(hyps, pos, float(np.sqrt(var)))
            else:
                refs[a] = _Reference(HypothesisSet.singleton(pos), pos, 0.0)
        return refs

    def _grid_ref(self, node: int) -> _Reference:
        belief = self.beliefs[node]
        hyps = sample_hypotheses(belief, self.params.tau_percent)
        pos = estimate_position(belief, self.params.r_est)
        spread = float(np.sqrt(belief.trace_covariance()))
        return _Reference(hyps, pos, spread)

    # -- measurement update ---------------------------------------------------
    def _update(
        self,
        predicted: GridBelief,
        refs: Sequence[tuple[_Reference, float]],
        floor: float = 0.0,
        max_hyps: int | None = None,
    ) -> tuple[GridBelief, float, list[float]]:
        """Bayes update evaluated only where the prediction has mass.

        ``floor`` is added to each reference's factor. Without a floor each
        factor is scaled to unit peak over the evaluated cells, which leaves
        the normalised posterior unchanged but avoids underflow.

        Also returns the evidence, the geometric mean over references of
        the predicted likelihood (NaN when peaks were rescaled), and each
        reference's own predicted likelihood without the floor.
        ``max_hyps`` keeps only each reference's most probable hypotheses.
        """
        flat = predicted.flat
        active = np.flatnonzero(flat > 0)
        cells = self.centers[active]
        post = flat[active].copy()
        prior = post / post.sum()
        fits = []
        sigma_r = self.params.sigma_r
        for ref, z in refs:
            if self.params.mode == "parametric":
                sigma = sigma_r + ref.spread
                d = np.hypot(cells[:, 0] - ref.position.x, cells[:, 1] - ref.position.y)
                factor = np.exp(-((d - z) ** 2) / (2.0 * sigma * sigma))
            else:
                pts, w = ref.hyps.points, ref.hyps.weights
                if max_hyps is not None and len(w) > max_hyps:
                    keep = np.argsort(-w, kind="stable")[:max_hyps]
                    pts, w = pts[keep], w[keep] / w[keep].sum()
                factor = ring_field(cells, pts, w, z, sigma_r)
            fits.append(float(prior @ factor))
            if floor > 0:
                post *= factor + floor
                continue
            peak = factor.max()
            if not peak > 0:
                raise AllMassZero("reference likelihood vanished on the support")
            post *= factor / peak
        total = post.sum()
        if not total > 0:
            raise AllMassZero("posterior has no mass")
        out = np.zeros(flat.size)
        out[active] = post / total
        evidence = float(total ** (1.0 / len(refs))) if floor > 0 else math.nan
        return GridBelief(self.spec, out), evidence, fits

    def _count_refs(self, node, matrix, refs) -> int:
        return sum(1 for j in refs if j != node and matrix.mask[node, j])

    def _frame_misfit(self, node, keys, fits, threshold) -> None:
        """Track nodes whose ranges to both the axis and half-plane node misfit.

        A cluster of nodes rotated about the origin stays consistent with the
        origin and with each other, so only these two references expose it.
        """
        _, a, h = self.frame.nodes
        got = [f for j, f in zip(keys, fits) if j in (a, h)]
        if len(got) < 2:
            return
        if all(f < threshold for f in got):
            self.frame_misfits[node] += 1
        else:
            self.frame_misfits[node] = 0

    def _filter_node(self, node, matrix, refs, dt, mask=None):
        """Predict/update one grid node. Returns (belief, available, note)."""
        belief = self.beliefs.get(node)
        keys = [j for j in sorted(refs) if j != node and matrix.mask[node, j]]
        if belief is None:
            # Acquire only from references that agree with the frame.
            keys = [j for j in keys if not self.frame_misfits[j]]
        ranged = [(refs[j], float(matrix.entries[node, j])) for j in keys]
        floor = self.params.outlier_floor
        if belief is None:
            if not ranged:
                return None, False, "uninitialised"
            predicted = GridBelief.uniform(self.spec)
        else:
            predicted = predict(belief, self.params, dt)
        if mask is not None:
            predicted = _restrict(predicted, mask)
        if not ranged:
            return predicted, False, "no-ranges"
        try:
            # Acquisition evaluates the whole grid, so references are cut to
            # their k_top best hypotheses there.
            cap = self.params.k_top if belief is None else None
            posterior, evidence, fits = self._update(predicted, ranged, floor, cap)
        except AllMassZero:
            self.fallbacks += 1
            return predicted, True, "fallback"
        # A belief most references, or the frame, disagree with for
        # reset_after epochs in a row has lost track; drop it so the node is
        # acquired again.
        limit = self.params.reset_after
        if belief is None:
            self.age[node] = 0
        if belief is None or not limit:
            return posterior, True, ""
        # A fresh acquisition gets no benefit of the doubt.
        self.age[node] += 1
        if self.age[node] <= self.params.settle_epochs:
            limit = 1
        threshold = math.sqrt(floor)
        self.misfits[node] = self.misfits[node] + 1 if evidence < threshold else 0
        if mask is None:
            self._frame_misfit(node, keys, fits, threshold)
        if self.misfits[node] >= limit or self.frame_misfits[node] >= limit:
            self.misfits[node] = self.frame_misfits[node] = 0
            self.resets += 1
            return None, True, "reset"
        return posterior, True, ""

    # -- epoch ----------------------------------------------------------------
    def step(self, matrix: DistanceMatrix) -> tuple[EpochResult, dict[int, GridBelief]]:
        if matrix.n != self.n:
            raise ValueError(f"epoch has {matrix.n} nodes, filter expects {self.n}")
        p = self.params
        dt = 0.0 if self.last_time is None else max(0.0, matrix.epoch - self.last_time)
        self.last_time = matrix.epoch
        o, a, h = self.frame.nodes
        raw: list[Position2D | None] = [None] * self.n
        available = [False] * self.n
        notes = [""] * self.n

        raw[o] = Position2D(0.0, 0.0)
        available[o] = True

        # Axis node: recursive 1-D histogram filter.
        z01 = matrix.get(o, a)
        prior = None
        if self.axis_bins is not None:
            prior = predict_histogram(self.axis_bins, p, dt)
            if p.axis_mix > 0:
                prior = (1.0 - p.axis_mix) * prior + p.axis_mix / prior.size
        if z01 is not None:
            if self.axis_estimate is None or abs(z01 - self.axis_estimate) <= 3.0 * p.sigma_r:
                self.axis_streak += 1
            else:
                self.axis_streak = 0
            res = histogram_filter_a1(z01, p, prior, floor=p.outlier_floor)
            if res.clamped:
                notes[a] = "clamped"
            self.axis_bins = res.bins
            self.axis_estimate = res.estimate
            available[a] = True
        elif prior is not None:
            self.axis_bins = prior
            self.axis_estimate = float(prior @ np.linspace(0.0, p.d_max, p.h_bins))
            notes[a] = "no-ranges"
        if self.axis_estimate is not None:
            raw[a] = Position2D(self.axis_estimate, 0.0)

        # Half-plane node: grid initialisation, then recursive updates from a0/a1.
        anchors = self._anchor_refs()
        if a in anchors:
            if h not in self.beliefs and self.axis_streak < p.settle_epochs:
                notes[h] = "settling"
            elif h not in self.beliefs:
                try:
                    a1 = anchors[a].position
                    self.beliefs[h] = init_anchor2_grid(
                        Position2D(0.0, 0.0), a1, matrix.get(o, h), matrix.get(a, h), self.spec, p
                    )
                    available[h] = True
                    self.anchor2_streak = 0
                except Exception as exc:  # MissingRange / AllMassZero defer initialisation
                    notes[h] = type(exc).__name__
            else:
                belief, ok, note = self._filter_node(h, matrix, anchors, dt, mask=self.upper)
                available[h], notes[h] = ok, note
                if belief is None:
                    del self.beliefs[h]
                else:
                    self.beliefs[h] = belief
                fitted = note == "" and self.misfits[h] == 0
                self.anchor2_streak = self.anchor2_streak + 1 if fitted else 0
                if self.anchor2_streak >= p.settle_epochs:
                    self.frame_ready = True
        if h in self.beliefs:
            raw[h] = estimate_position(self.beliefs[h], p.r_est)

        # Remaining nodes, only once the frame is complete and has settled.
        if h in self.beliefs and self.frame_ready:
            refs = dict(anchors)
            for j in self.beliefs:
                refs[j] = self._grid_ref(j)
            others = [i for i in range(self.n) if i not in (o, a, h)]
            updated: dict[int, GridBelief] = {}
            reset: list[int] = []
            for i in others:
                belief, ok, note = self._filter_node(i, matrix, refs, dt)
                available[i], notes[i] = ok, note
                if belief is None:
                    if note == "reset":
                        reset.append(i)
                    continue
                raw[i] = estimate_position(belief, p.r_est)
                if i not in self.beliefs and self._count_refs(i, matrix, refs) < MIN_INIT_REFS:
                    notes[i] = "tentative"
                    continue
                updated[i] = belief
                if p.sweep == "gauss-seidel":
                    self.beliefs[i] = belief
                    refs[i] = self._grid_ref(i)
            self.beliefs.update(updated)
            for i in reset:
                self.beliefs.pop(i, None)
        else:
            for i in range(self.n):
                if i not in (o, a, h):
                    notes[i] = "frame-incomplete" if h not in self.beliefs else "settling"

        estimates: list[Position2D | None] = []
        for i, est in enumerate(raw):
            if est is not None and p.smoothing != "none":
                est = self.smoothers[i](est)
            estimates.append(est)
        return EpochResult(matrix.epoch, estimates, available, notes), dict(self.beliefs)


def _restrict(belief: GridBelief, mask: np.ndarray) -> GridBelief:
    w = belief.mass * mask
    if not w.sum() > 0:
        return belief
    return GridBelief.from_weights(belief.spec, w)


def run_pgp(
    dataset: Iterable[DistanceMatrix],
    frame: FrameAssumptions,
    spec: GridSpec,
    params: PgpParams | None = None,
    observer: Observer | None = None,
) -> list[EpochResult]:
    """Run the grid filter over all epochs.

    ``observer(k, beliefs)`` is called after every epoch with the current
    per-node beliefs, e.g. to dump selected epochs.
    """
    params = params or PgpParams()
    results = []
    pgp: PgpFilter | None = None
    for k, matrix in enumerate(dataset):
        if pgp is None:
            pgp = PgpFilter(matrix.n, frame, spec, params)
        result, beliefs = pgp.step(matrix)
        results.append(result)
        if observer is not None:
            observer(k, beliefs)
    if pgp is not None and pgp.fallbacks:
        log.info("PGP kept the prediction in %d node-epochs with vanishing likelihood", pgp.fallbacks)
    if pgp is not None and pgp.resets:
        log.info("PGP re-acquired lost nodes %d times", pgp.resets)
    return results

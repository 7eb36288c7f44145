"""Discrete grid beliefs and the Bayes-filter operations acting on them.

Cells are indexed row-major with rows along y: flat index ``r * cols + c``
has centre ``(x_min + (c + 0.5) * cell_size, y_min + (r + 0.5) * cell_size)``.
Gaussian factors omit their normalising constant everywhere because every
consumer renormalises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .errors import AllMassZero, MissingRange
from .types import Position2D

MASS_TOLERANCE = 1e-9
# Elements per (cells x hypotheses) block when evaluating ring likelihoods.
_CHUNK = 1 << 21


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell_size: float

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid bounds must be ordered")

    @property
    def cols(self) -> int:
        return max(1, int(math.ceil((self.x_max - self.x_min) / self.cell_size - 1e-9)))

    @property
    def rows(self) -> int:
        return max(1, int(math.ceil((self.y_max - self.y_min) / self.cell_size - 1e-9)))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def m_total(self) -> int:
        return self.rows * self.cols

    def xs(self) -> np.ndarray:
        return self.x_min + (np.arange(self.cols) + 0.5) * self.cell_size

    def ys(self) -> np.ndarray:
        return self.y_min + (np.arange(self.rows) + 0.5) * self.cell_size

    def centers(self) -> np.ndarray:
        """(M, 2) read-only array of cell centres in flat-index order."""
        return self._centers

    @cached_property
    def _centers(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs(), self.ys())
        out = np.column_stack([gx.ravel(), gy.ravel()])
        out.setflags(write=False)
        return out

    def center(self, flat_index: int) -> np.ndarray:
        r, c = divmod(int(flat_index), self.cols)
        return np.array([self.x_min + (c + 0.5) * self.cell_size, self.y_min + (r + 0.5) * self.cell_size])

    def index_of(self, x: float, y: float) -> int:
        """Flat index of the cell containing (x, y), clipped to the grid."""
        c = int(np.clip(math.floor((x - self.x_min) / self.cell_size), 0, self.cols - 1))
        r = int(np.clip(math.floor((y - self.y_min) / self.cell_size), 0, self.rows - 1))
        return r * self.cols + c

    @classmethod
    def around(cls, points, margin: float = 5.0, cell_size: float = 0.25) -> GridSpec:
        """Bounding box of ``points`` inflated by ``margin`` on every side."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        lo = pts.min(axis=0) - margin
        hi = pts.max(axis=0) + margin
        return cls(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]), cell_size)


@dataclass(frozen=True)
class GridBelief:
    spec: GridSpec
    mass: np.ndarray

    def __post_init__(self):
        mass = np.array(self.mass, dtype=float).reshape(self.spec.shape)
        if np.isnan(mass).any() or (mass < 0).any():
            raise ValueError("belief mass must be non-negative and NaN-free")
        total = mass.sum()
        if abs(total - 1.0) > MASS_TOLERANCE:
            raise ValueError(f"belief mass sums to {total!r}, expected 1")
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def uniform(cls, spec: GridSpec) -> GridBelief:
        return cls(spec, np.full(spec.shape, 1.0 / spec.m_total))

    @classmethod
    def from_weights(cls, spec: GridSpec, weights) -> GridBelief:
        w = np.asarray(weights, dtype=float).reshape(spec.shape)
        total = w.sum()
        if not total > 0 or not np.isfinite(total):
            raise AllMassZero("weights have no positive finite mass")
        return cls(spec, w / total)

    @property
    def flat(self) -> np.ndarray:
        return self.mass.ravel()

    def argmax(self) -> int:
        return int(np.argmax(self.flat))

    def mean(self) -> np.ndarray:
        return self.flat @ self.spec.centers()

    def trace_covariance(self) -> float:
        """Trace of the belief's positional covariance (m^2)."""
        spec = self.spec
        px = self.mass.sum(axis=0)
        py = self.mass.sum(axis=1)
        xs, ys = spec.xs(), spec.ys()
        mx, my = px @ xs, py @ ys
        return float(px @ (xs - mx) ** 2 + py @ (ys - my) ** 2)


@dataclass(frozen=True)
class PgpParams:
    """Tuning of the grid filter.

    The first nine fields are the filter parameters proper. ``outlier_floor``
    is added to every reference's range likelihood in recursive updates so a
    grossly wrong range flattens out instead of dragging the belief; 0 gives
    pure Gaussian factors. ``axis_mix`` blends that much uniform mass into the
    axis histogram's prediction so a start on an outlier can be overturned.
    A grid node whose ranges stay inconsistent with its belief for
    ``reset_after`` epochs is re-acquired from scratch (0 disables this).
    ``settle_epochs`` holds back the half-plane node until that many axis
    ranges in a row agree with the axis estimate, and the remaining nodes
    until the half-plane node has fitted its ranges as often; 0 starts each
    stage as soon as its ranges exist. The rest select optional behaviours.
    Field names double as configuration file keys.
    """

    tau_percent: float = 0.9
    r_est: float = 0.75
    sigma_r: float = 0.3
    velocity: float = 0.0
    sigma_v: float = 0.1
    k_top: int = 64
    alpha: float = 1.0
    h_bins: int = 0
    d_max: float = 60.0
    outlier_floor: float = 0.01
    axis_mix: float = 1e-3
    reset_after: int = 10
    settle_epochs: int = 3
    mode: str = "hypotheses"
    a1_mode: str = "singleton"
    sweep: str = "jacobi"
    smoothing: str = "none"
    median_window: int = 5

    def __post_init__(self):
        if self.h_bins == 0:
            # Bin centres on multiples of 5 cm over [0, d_max].
            object.__setattr__(self, "h_bins", int(round(self.d_max / 0.05)) + 1)
        if not 0 < self.tau_percent <= 1:
            raise ValueError("tau_percent must be in (0, 1]")
        if not self.sigma_r > 0:
            raise ValueError("sigma_r must be positive")
        if self.sigma_v < 0:
            raise ValueError("sigma_v must be non-negative")
        if not self.r_est > 0:
            raise ValueError("r_est must be positive")
        if self.h_bins < 2:
            raise ValueError("h_bins must be at least 2")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.k_top < 1:
            raise ValueError("k_top must be at least 1")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")
        if self.mode not in ("hypotheses", "parametric"):
            raise ValueError(f"unknown uncertainty mode {self.mode!r}")
        if self.a1_mode not in ("singleton", "histogram"):
            raise ValueError(f"unknown a1_mode {self.a1_mode!r}")
        if self.sweep not in ("jacobi", "gauss-seidel"):
            raise ValueError(f"unknown sweep {self.sweep!r}")
        if self.smoothing not in ("none", "ema", "median-ema"):
            raise ValueError(f"unknown smoothing {self.smoothing!r}")
        if self.reset_after < 0:
            raise ValueError("reset_after must be >= 0")
        if self.settle_epochs < 0:
            raise ValueError("settle_epochs must be >= 0")
        if not 0 <= self.axis_mix < 1:
            raise ValueError("axis_mix must be in [0, 1)")
        if not 0 <= self.outlier_floor < 1:
            raise ValueError("outlier_floor must be in [0, 1)")
        if self.median_window < 1:
            raise ValueError("median_window must be at least 1")


@dataclass(frozen=True)
class HypothesisSet:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 2)
        w = np.array(self.weights, dtype=float).ravel()
        if len(pts) < 1 or len(pts) != len(w):
            raise ValueError("need at least one hypothesis, one weight per point")
        if (w <= 0).any() or abs(w.sum() - 1.0) > MASS_TOLERANCE:
            raise ValueError("hypothesis weights must be positive and sum to 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def singleton(cls, position: Position2D) -> HypothesisSet:
        return cls(np.array([[position.x, position.y]]), np.array([1.0]))

    def __len__(self) -> int:
        return len(self.weights)


class AxisEstimate(NamedTuple):
    estimate: float
    bins: np.ndarray
    centers: np.ndarray
    clamped: bool


def histogram_centers(params: PgpParams) -> np.ndarray:
    return np.linspace(0.0, params.d_max, params.h_bins)


def histogram_filter_a1(
    z01: float | None,
    params: PgpParams,
    prior: np.ndarray | None = None,
    floor: float = 0.0,
) -> AxisEstimate:
    """One histogram-filter step for the axis node's distance from the origin.

    With no ``prior`` the bins are the normalised range likelihood alone. A
    prior is multiplied in, with ``floor`` added to the likelihood; if the
    product vanishes the prior is kept.
    """
    if z01 is None:
        raise MissingRange(0, 1)
    centers = histogram_centers(params)
    clamped = not (0.0 <= z01 <= params.d_max)
    z = min(max(z01, 0.0), params.d_max)
    like = np.exp(-((z - centers) ** 2) / (2.0 * params.sigma_r**2))
    bins = like if prior is None else (like + floor) * prior
    total = bins.sum()
    if not total > 0:
        if prior is None:
            raise AllMassZero("histogram likelihood vanished")
        bins, total = np.asarray(prior, float), float(np.sum(prior))
    bins = bins / total
    return AxisEstimate(float(bins @ centers), bins, centers, clamped)


def predict_histogram(bins: np.ndarray, params: PgpParams, dt: float = 1.0) -> np.ndarray:
    """Blur the axis histogram by the motion model (1-D analogue of ``predict``)."""
    if params.sigma_v == 0 and params.velocity == 0:
        return np.asarray(bins, float)
    spacing = params.d_max / (params.h_bins - 1)
    kernel = _kernel_1d(spacing, params.velocity * dt, params.sigma_v)
    out = np.convolve(bins, kernel, mode="same") if len(kernel) <= len(bins) else np.asarray(bins, float)
    total = out.sum()
    return out / total if total > 0 else np.asarray(bins, float)


def _kernel_1d(spacing: float, shift: float, sigma: float) -> np.ndarray:
    reach = int(math.ceil((abs(shift) + 8.0 * max(sigma, 1e-12)) / spacing))
    d = np.abs(np.arange(-reach, reach + 1) * spacing)
    k = np.exp(-((d - shift) ** 2) / (2.0 * max(sigma, 1e-12) ** 2))
    return k / k.sum()


def init_anchor2_grid(
    a0: Position2D,
    a1: Position2D,
    z02: float | None,
    z12: float | None,
    spec: GridSpec,
    params: PgpParams,
) -> GridBelief:
    if z02 is None:
        raise MissingRange(0, 2)
    if z12 is None:
        raise MissingRange(1, 2)
    centers = spec.centers()
    upper = centers[:, 1] >= 0.0
    if not upper.any():
        raise AllMassZero("no grid cell lies in the upper half-plane")
    g = centers[upper]
    s2 = 2.0 * params.sigma_r**2
    log_l = -((np.linalg.norm(g - a0.as_array(), axis=1) - z02) ** 2) / s2
    log_l -= ((np.linalg.norm(g - a1.as_array(), axis=1) - z12) ** 2) / s2
    w = np.zeros(spec.m_total)
    w[upper] = np.exp(log_l - log_l.max())
    return GridBelief.from_weights(spec, w)


def half_plane_mask(spec: GridSpec) -> np.ndarray:
    return (spec.centers()[:, 1] >= 0.0).reshape(spec.shape)


def top_cells(belief: GridBelief, k: int) -> np.ndarray:
    """Flat indices of the ``k`` most probable cells, ties to lower index."""
    flat = belief.flat
    k = min(k, flat.size)
    if k == flat.size:
        order = np.argsort(-flat, kind="stable")
    else:
        part = np.argpartition(-flat, k - 1)[:k]
        # Repair ties at the cut so lower indices win deterministically.
        cut = flat[part].min()
        above = np.flatnonzero(flat > cut)
        at_cut = np.flatnonzero(flat == cut)[: k - above.size]
        chosen = np.concatenate([above, at_cut])
        order = chosen[np.lexsort((chosen, -flat[chosen]))]
    return order[:k]


def _motion_stencil(spec: GridSpec, params: PgpParams, dt: float) -> tuple[np.ndarray, int]:
    shift = params.velocity * dt
    cell = spec.cell_size
    # A spread far below the cell size is a delta kernel; also avoids 0/0.
    if params.sigma_v <= 1e-12 * cell:
        reach = int(math.ceil(shift / cell))
        off = np.arange(-reach, reach + 1) * cell
        d = np.hypot(*np.meshgrid(off, off))
        k = (np.abs(d - shift) <= cell / 2).astype(float)
    else:
        reach = int(math.ceil((shift + 8.0 * params.sigma_v) / cell))
        off = np.arange(-reach, reach + 1) * cell
        d = np.hypot(*np.meshgrid(off, off))
        k = np.exp(-((d - shift) ** 2) / (2.0 * params.sigma_v**2))
    return k / k.sum(), reach


def propagate_mass(prior: GridBelief, params: PgpParams, dt: float = 1.0) -> np.ndarray:
    """Motion-model mass transfer from the top ``k_top`` cells, unnormalised.

    Each source cell spreads its mass with a transition kernel that sums to
    one on an unbounded grid, so only mass pushed past the border is lost.
    """
    spec = prior.spec
    rows, cols = spec.shape
    stencil, reach = _motion_stencil(spec, params, dt)
    out = np.zeros((rows + 2 * reach, cols + 2 * reach))
    src = top_cells(prior, params.k_top)
    masses = prior.flat[src]
    width = 2 * reach + 1
    for idx, p in zip(src, masses):
        if p <= 0:
            continue
        r, c = divmod(int(idx), cols)
        out[r : r + width, c : c + width] += p * stencil
    return out[reach : reach + rows, reach : reach + cols]


def predict(prior: GridBelief, params: PgpParams, dt: float = 1.0) -> GridBelief:
    moved = propagate_mass(prior, params, dt)
    if not moved.sum() > 0:
        return prior
    return GridBelief.from_weights(prior.spec, moved)


def sample_hypotheses(belief: GridBelief, tau_percent: float) -> HypothesisSet:
    """Smallest set of most probable cells holding at least ``tau_percent`` mass."""
    flat = belief.flat
    positive = np.flatnonzero(flat > 0)
    if tau_percent >= 1.0:
        chosen = positive
    else:
        order = positive[np.lexsort((positive, -flat[positive]))]
        csum = np.cumsum(flat[order])
        count = int(np.searchsorted(csum, tau_percent - 1e-12, side="left")) + 1
        chosen = order[: min(count, order.size)]
    weights = flat[chosen]
    centers = belief.spec.centers()[chosen]
    return HypothesisSet(centers, weights / weights.sum())


def ring_field(cells: np.ndarray, points: np.ndarray, weights: np.ndarray, z: float, sigma: float) -> np.ndarray:
    """Sum over hypotheses of w * exp(-(|g - h| - z)^2 / 2 sigma^2) at each cell."""
    cells = np.asarray(cells, float)
    out = np.empty(len(cells))
    s2 = 2.0 * sigma * sigma
    step = max(1, _CHUNK // max(1, len(points)))
    for start in range(0, len(cells), step):
        g = cells[start : start + step]
        d = np.sqrt(
            (g[:, None, 0] - points[None, :, 0]) ** 2 + (g[:, None, 1] - points[None, :, 1]) ** 2
        )
        out[start : start + step] = np.exp(-((d - z) ** 2) / s2) @ weights
    return out


def likelihood_hypotheses(
    spec: GridSpec,
    refs: Sequence[tuple[HypothesisSet, float]],
    sigma_r: float,
    cells: np.ndarray | None = None,
) -> np.ndarray:
    """Product over references of the hypothesis-weighted ring likelihood.

    Returns an array shaped like the grid, or one value per entry of
    ``cells`` (flat indices) when given.
    """
    centers = spec.centers() if cells is None else spec.centers()[cells]
    field_ = np.ones(len(centers))
    for hyps, z in refs:
        field_ *= ring_field(centers, hyps.points, hyps.weights, z, sigma_r)
    return field_.reshape(spec.shape) if cells is None else field_


def likelihood_parametric(
    spec: GridSpec,
    refs: Sequence[tuple[Position2D, float, float]],
    sigma_r: float,
    cells: np.ndarray | None = None,
) -> np.ndarray:
    """Point-estimate likelihood with ranging sigma inflated by each reference's spread.

    Each reference is ``(position, spread, z)`` where ``spread`` is the square
    root of the reference's covariance trace.
    """
    centers = spec.centers() if cells is None else spec.centers()[cells]
    field_ = np.ones(len(centers))
    for pos, spread, z in refs:
        sigma = sigma_r + spread
        d = np.hypot(centers[:, 0] - pos.x, centers[:, 1] - pos.y)
        field_ *= np.exp(-((d - z) ** 2) / (2.0 * sigma * sigma))
    return field_.reshape(spec.shape) if cells is None else field_


def update(predicted: GridBelief, likelihood_field: np.ndarray) -> GridBelief:
    like = np.asarray(likelihood_field, dtype=float).reshape(predicted.spec.shape)
    if (like < 0).any() or np.isnan(like).any():
        raise ValueError("likelihood field must be non-negative")
    product = predicted.mass * like
    total = product.sum()
    if not total > 0:
        raise AllMassZero("posterior has no mass")
    # Scale by the peak first: a subnormal total would overflow 1/total.
    product = product / product.max()
    return GridBelief(predicted.spec, product / product.sum())


def estimate_position(belief: GridBelief, r_est: float) -> Position2D:
    """Mass-weighted mean of cells strictly closer than ``r_est`` to the MAP cell."""
    spec = belief.spec
    rows, cols = spec.shape
    mle = belief.argmax()
    r0, c0 = divmod(mle, cols)
    reach = int(math.ceil(r_est / spec.cell_size))
    rs = slice(max(0, r0 - reach), min(rows, r0 + reach + 1))
    cs = slice(max(0, c0 - reach), min(cols, c0 + reach + 1))
    block = belief.mass[rs, cs]
    ys = spec.ys()[rs]
    xs = spec.xs()[cs]
    gx, gy = np.meshgrid(xs, ys)
    cx, cy = spec.center(mle)
    inside = np.hypot(gx - cx, gy - cy) < r_est
    w = np.where(inside, block, 0.0)
    total = w.sum()
    if not total > 0:
        return Position2D(float(cx), float(cy))
    return Position2D(float((w * gx).sum() / total), float((w * gy).sum() / total))


def smooth_ema(previous: Position2D | None, current: Position2D, alpha: float) -> Position2D:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    if previous is None or alpha == 1:
        return current
    # Incremental form keeps a constant track exactly fixed.
    return Position2D(
        previous.x + alpha * (current.x - previous.x),
        previous.y + alpha * (current.y - previous.y),
    )


@dataclass
class TrackSmoother:
    """Per-node EMA, optionally preceded by a running median over recent estimates."""

    alpha: float
    median_window: int = 1
    _recent: list = field(default_factory=list)
    _state: Position2D | None = None

    def __call__(self, current: Position2D) -> Position2D:
        if self.median_window > 1:
            self._recent.append((current.x, current.y))
            del self._recent[: -self.median_window]
            med = np.median(np.array(self._recent), axis=0)
            current = Position2D(float(med[0]), float(med[1]))
        self._state = smooth_ema(self._state, current, self.alpha)
        return self._state

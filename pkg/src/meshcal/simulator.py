"""Synthetic fully meshed ranging networks with LOS/NLOS error regimes.

LOS ranges carry zero-mean Gaussian noise. NLOS ranges carry a positive
bias drawn as half-normal plus exponential, and are occasionally replaced by
a uniform outlier between the true distance and ``outlier_max``. Every draw
comes from one seeded generator, so a seed fixes the whole dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import load_dataclass, parse_kv, read_kv
from .errors import ConfigError, LayoutInfeasible
from .types import DistanceMatrix, NetworkTruth, Position2D, VisibilityMatrix


@dataclass(frozen=True)
class RangingModel:
    sigma_los: float = 0.33
    nlos_bias_scale: float = 0.35
    sigma_nlos_base: float = 0.5
    dropout_prob_los: float = 0.01
    dropout_prob_nlos: float = 0.08
    outlier_prob: float = 0.28
    outlier_max: float = 50.0
    seed: int = 0

    def __post_init__(self):
        for name in ("dropout_prob_los", "dropout_prob_nlos", "outlier_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        for name in ("sigma_los", "nlos_bias_scale", "sigma_nlos_base", "outlier_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


Rect = tuple[float, float, float, float]


@dataclass(frozen=True)
class ScenarioSpec:
    """Deployment geometry and recording length.

    ``positions``/``labels`` are used by the ``explicit`` layout;
    ``blocked_pairs`` never produce a range (permanent link loss);
    ``frames`` names frame configurations as (origin, axis, half-plane)
    label triples.
    """

    n_nodes: int = 12
    hall_width: float = 44.0
    hall_height: float = 30.0
    n_epochs: int = 2000
    epoch_rate: float = 10.0
    layout: str = "uniform-random"
    positions: tuple[tuple[float, float], ...] = ()
    labels: tuple[str, ...] = ()
    obstacle_rects: tuple[Rect, ...] = ()
    blocked_pairs: tuple[tuple[str, str], ...] = ()
    frames: tuple[tuple[str, str, str], ...] = ()
    visibility: np.ndarray | None = field(default=None, compare=False)
    name: str = "scenario"
    layout_seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 4:
            raise ValueError("a calibration scenario needs at least 4 nodes")
        if not (self.hall_width > 0 and self.hall_height > 0):
            raise ValueError("hall dimensions must be positive")
        if self.layout not in ("grid", "uniform-random", "explicit"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.layout == "explicit" and len(self.positions) != self.n_nodes:
            raise ValueError("explicit layout needs one position per node")
        if self.labels and len(self.labels) != self.n_nodes:
            raise ValueError("need one label per node")
        if self.n_epochs < 0 or self.epoch_rate <= 0:
            raise ValueError("n_epochs must be >= 0 and epoch_rate > 0")

    def node_labels(self) -> tuple[str, ...]:
        return self.labels or tuple(f"N{i:02d}" for i in range(self.n_nodes))


def segment_hits_rect(p: np.ndarray, q: np.ndarray, rect: Rect) -> bool:
    """Liang-Barsky test of segment p-q against a closed axis-aligned rectangle."""
    x0, y0, x1, y1 = min(rect[0], rect[2]), min(rect[1], rect[3]), max(rect[0], rect[2]), max(rect[1], rect[3])
    d = q - p
    t0, t1 = 0.0, 1.0
    for delta, lo, hi, start in ((d[0], x0, x1, p[0]), (d[1], y0, y1, p[1])):
        if delta == 0.0:
            if start < lo or start > hi:
                return False
            continue
        ta, tb = (lo - start) / delta, (hi - start) / delta
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 > t1:
            return False
    return True


def visibility_from_obstacles(xy: np.ndarray, rects: Sequence[Rect]) -> VisibilityMatrix:
    n = len(xy)
    los = np.ones((n, n), dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            blocked = any(segment_hits_rect(xy[i], xy[j], r) for r in rects)
            los[i, j] = los[j, i] = not blocked
    return VisibilityMatrix(los)


def generate_layout(spec: ScenarioSpec) -> NetworkTruth:
    n, w, h = spec.n_nodes, spec.hall_width, spec.hall_height
    if spec.layout == "explicit":
        xy = np.array(spec.positions, dtype=float)
        outside = (xy[:, 0] < 0) | (xy[:, 0] > w) | (xy[:, 1] < 0) | (xy[:, 1] > h)
        if outside.any():
            bad = ", ".join(spec.node_labels()[i] for i in np.flatnonzero(outside))
            raise LayoutInfeasible(f"nodes outside the {w}x{h} m hall: {bad}")
    elif spec.layout == "grid":
        cols = int(np.ceil(np.sqrt(n * w / h)))
        rows = int(np.ceil(n / cols))
        gx = (np.arange(cols) + 0.5) * w / cols
        gy = (np.arange(rows) + 0.5) * h / rows
        xy = np.array([(x, y) for y in gy for x in gx][:n])
    else:
        rng = np.random.default_rng(spec.layout_seed)
        xy = rng.uniform([0.0, 0.0], [w, h], size=(n, 2))
    if spec.visibility is not None:
        vis = VisibilityMatrix(spec.visibility)
        if vis.n != n:
            raise ValueError("visibility override has the wrong size")
    else:
        vis = visibility_from_obstacles(xy, spec.obstacle_rects)
    positions = [Position2D(float(x), float(y)) for x, y in xy]
    return NetworkTruth(positions, vis, spec.node_labels())


def _draw(d: np.ndarray, los: np.ndarray, model: RangingModel, rng: np.random.Generator, blocked=None) -> np.ndarray:
    """Vectorised range draws; NaN marks a dropout."""
    shape = d.shape
    drop_p = np.where(los, model.dropout_prob_los, model.dropout_prob_nlos)
    dropped = rng.random(shape) < drop_p
    los_noise = rng.normal(0.0, 1.0, shape) * model.sigma_los
    half_normal = np.abs(rng.normal(0.0, 1.0, shape)) * model.sigma_nlos_base
    bias = rng.exponential(1.0, shape) * model.nlos_bias_scale
    outlier = rng.random(shape) < model.outlier_prob
    spread = np.maximum(model.outlier_max - d, 0.0)
    outlier_value = d + rng.random(shape) * spread
    nlos_value = np.where(outlier, outlier_value, d + half_normal + bias)
    z = np.where(los, d + los_noise, nlos_value)
    z = np.maximum(z, 0.0)
    if blocked is not None:
        dropped |= blocked
    return np.where(dropped, np.nan, z)


def sample_range(
    truth: NetworkTruth,
    i: int,
    j: int,
    model: RangingModel,
    rng: np.random.Generator,
) -> float | None:
    if i == j:
        raise ValueError("a node has no range to itself")
    d = np.array([truth.positions[i].distance_to(truth.positions[j])])
    los = np.array([truth.visibility.los[i, j]])
    z = _draw(d, los, model, rng)[0]
    return None if np.isnan(z) else float(z)


def generate_dataset(spec: ScenarioSpec, model: RangingModel) -> tuple[NetworkTruth, list[DistanceMatrix]]:
    """One draw per unordered pair per epoch, mirrored into a symmetric matrix."""
    truth = generate_layout(spec)
    n = truth.n
    iu, ju = np.triu_indices(n, k=1)
    d = truth.distances()[iu, ju]
    los = truth.visibility.los[iu, ju]
    labels = truth.labels
    blocked = np.zeros(len(iu), dtype=bool)
    index = {lbl: k for k, lbl in enumerate(labels)}
    for a, b in spec.blocked_pairs:
        if a not in index or b not in index:
            raise ValueError(f"blocked pair {a}-{b} names unknown nodes")
        i, j = sorted((index[a], index[b]))
        blocked[(iu == i) & (ju == j)] = True

    rng = np.random.default_rng(model.seed)
    k = spec.n_epochs
    z = _draw(np.broadcast_to(d, (k, d.size)), np.broadcast_to(los, (k, d.size)), model, rng,
              np.broadcast_to(blocked, (k, d.size)))
    matrices = []
    full = np.full((n, n), np.nan)
    for e in range(k):
        full[iu, ju] = z[e]
        full[ju, iu] = z[e]
        matrices.append(DistanceMatrix.from_array(e / spec.epoch_rate, full))
    return truth, matrices


# -- scenario and model files ------------------------------------------------

_SCALAR_KEYS = {
    "name": str,
    "n_nodes": int,
    "hall_width": float,
    "hall_height": float,
    "n_epochs": int,
    "epoch_rate": float,
    "layout": str,
    "layout_seed": int,
}


def scenario_from_entries(entries: list[tuple[str, str]], source: str = "<scenario>") -> ScenarioSpec:
    """Build a scenario from config entries.

    Repeatable keys: ``node = LABEL X Y``, ``obstacle = X0 Y0 X1 Y1``,
    ``blocked = LABEL LABEL`` and ``frame = ORIGIN AXIS HALFPLANE``.
    """
    kw: dict = {}
    labels, positions, rects, blocked, frames = [], [], [], [], []
    try:
        for key, value in entries:
            parts = value.split()
            if key in _SCALAR_KEYS:
                kw[key] = _SCALAR_KEYS[key](value)
            elif key == "node":
                labels.append(parts[0])
                positions.append((float(parts[1]), float(parts[2])))
            elif key == "obstacle":
                x0, y0, x1, y1 = map(float, parts)
                rects.append((x0, y0, x1, y1))
            elif key == "blocked":
                a, b = parts
                blocked.append((a, b))
            elif key == "frame":
                a, b, c = parts
                frames.append((a, b, c))
            else:
                raise ConfigError(f"{source}: unknown scenario key {key!r}")
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: malformed entry {key} = {value!r}") from None
    if positions:
        kw.setdefault("layout", "explicit")
        kw.setdefault("n_nodes", len(positions))
        kw["positions"] = tuple(positions)
        kw["labels"] = tuple(labels)
    kw["obstacle_rects"] = tuple(rects)
    kw["blocked_pairs"] = tuple(blocked)
    kw["frames"] = tuple(frames)
    try:
        return ScenarioSpec(**kw)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def canned_scenarios() -> list[str]:
    root = resources.files("meshcal") / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_scenario(name_or_path: str | Path) -> ScenarioSpec:
    """Load a canned scenario by name (e.g. ``torgau-like``) or a scenario file."""
    path = Path(name_or_path)
    if not path.exists() and str(name_or_path) in canned_scenarios():
        text = (resources.files("meshcal") / "scenarios" / f"{name_or_path}.cfg").read_text()
        return scenario_from_entries(parse_kv(text, str(name_or_path)), str(name_or_path))
    return scenario_from_entries(read_kv(path), str(path))


def load_model(path: str | Path | None = None, **overrides) -> RangingModel:
    entries = read_kv(path) if path is not None else []
    return load_dataclass(RangingModel, entries, **overrides)

"""Ranging and positioning metrics, and their CSV/JSON report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .closed_form import FrameAssumptions
from .dataio import transform_ground_truth
from .errors import InsufficientData, NoTruth
from .types import DistanceMatrix, EpochResult, NetworkTruth

SCHEMA_VERSION = "1.0"
# Quantile levels matching one, two and three Gaussian standard deviations.
SIGMA_LEVELS = (68.27, 95.45, 99.73)


@dataclass(frozen=True)
class ClassStats:
    count: int
    share: float
    mean: float
    median: float
    variance: float  # m^2
    q1sigma: float
    q2sigma: float
    q3sigma: float
    p25: float
    p50: float
    p75: float

    @classmethod
    def of(cls, abs_residuals: np.ndarray, total: int) -> ClassStats | None:
        if abs_residuals.size == 0:
            return None
        q = np.percentile(abs_residuals, [*SIGMA_LEVELS, 25, 50, 75])
        return cls(
            count=int(abs_residuals.size),
            share=abs_residuals.size / total,
            mean=float(abs_residuals.mean()),
            median=float(np.median(abs_residuals)),
            variance=float(abs_residuals.var()),
            q1sigma=float(q[0]),
            q2sigma=float(q[1]),
            q3sigma=float(q[2]),
            p25=float(q[3]),
            p50=float(q[4]),
            p75=float(q[5]),
        )


@dataclass(frozen=True)
class RangingStats:
    los: ClassStats | None
    nlos: ClassStats | None
    overall: ClassStats | None

    def rows(self) -> dict[str, ClassStats | None]:
        return {"LOS": self.los, "NLOS": self.nlos, "overall": self.overall}


@dataclass(frozen=True)
class Residuals:
    """Every present measurement as (epoch, i, j, measured, reference, LOS)."""

    epoch: np.ndarray
    i: np.ndarray
    j: np.ndarray
    measured: np.ndarray
    reference: np.ndarray
    los: np.ndarray

    @property
    def signed(self) -> np.ndarray:
        return self.measured - self.reference


def _require_truth(truth: NetworkTruth | None) -> NetworkTruth:
    if truth is None:
        raise NoTruth("ground truth is required for this metric")
    return truth


def residuals(dataset: Sequence[DistanceMatrix], truth: NetworkTruth | None) -> Residuals:
    """Upper-triangle measurements of all epochs against true distances."""
    truth = _require_truth(truth)
    n = truth.n
    iu, ju = np.triu_indices(n, k=1)
    d = truth.distances()[iu, ju]
    los = truth.visibility.los[iu, ju]
    if not dataset:
        empty = np.array([])
        return Residuals(empty, empty.astype(int), empty.astype(int), empty, empty, empty.astype(bool))
    z = np.stack([m.entries[iu, ju] for m in dataset])
    present = np.stack([m.mask[iu, ju] for m in dataset])
    e_idx, p_idx = np.nonzero(present)
    times = np.array([m.epoch for m in dataset])
    return Residuals(times[e_idx], iu[p_idx], ju[p_idx], z[e_idx, p_idx], d[p_idx], los[p_idx])


def ranging_stats(dataset: Sequence[DistanceMatrix], truth: NetworkTruth | None) -> RangingStats:
    res = residuals(dataset, truth)
    err = np.abs(res.signed)
    total = err.size
    return RangingStats(
        los=ClassStats.of(err[res.los], total),
        nlos=ClassStats.of(err[~res.los], total),
        overall=ClassStats.of(err, total),
    )


def pairwise_rmse_matrix(dataset: Sequence[DistanceMatrix], truth: NetworkTruth | None) -> np.ndarray:
    """Per-pair ranging RMSE; NaN marks pairs that were never measured."""
    res = residuals(dataset, truth)
    n = truth.n
    sq = np.zeros((n, n))
    cnt = np.zeros((n, n))
    np.add.at(sq, (res.i, res.j), res.signed**2)
    np.add.at(cnt, (res.i, res.j), 1)
    sq, cnt = sq + sq.T, cnt + cnt.T
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(sq / cnt)
    out[cnt == 0] = np.nan
    return out


@dataclass(frozen=True)
class QQResult:
    reference: np.ndarray
    measured: np.ndarray
    r_squared: float
    degenerate: bool


def qq_correlation(dataset: Sequence[DistanceMatrix], truth: NetworkTruth | None) -> QQResult:
    """Sorted reference vs sorted measured distances and the R^2 of a line fit.

    A constant measured distribution has no variance to explain; R^2 is then
    reported as 0 and the result flagged degenerate.
    """
    res = residuals(dataset, truth)
    if res.measured.size < 2:
        raise InsufficientData("need at least two measurements")
    ref = np.sort(res.reference)
    meas = np.sort(res.measured)
    ss_tot = float(((meas - meas.mean()) ** 2).sum())
    if ss_tot == 0.0 or np.ptp(ref) == 0.0:
        return QQResult(ref, meas, 0.0, True)
    slope, intercept = np.polyfit(ref, meas, 1)
    ss_res = float(((meas - (slope * ref + intercept)) ** 2).sum())
    return QQResult(ref, meas, 1.0 - ss_res / ss_tot, False)


def availability(results: Sequence[EpochResult]) -> np.ndarray:
    if not results:
        raise InsufficientData("no epochs")
    flags = np.array([r.available for r in results], dtype=bool)
    return flags.mean(axis=0)


def position_errors(results: Sequence[EpochResult], reference: np.ndarray) -> np.ndarray:
    """(epochs, nodes) Euclidean errors; NaN where the node was unavailable."""
    out = np.full((len(results), len(reference)), np.nan)
    for k, r in enumerate(results):
        for i, (est, ok) in enumerate(zip(r.estimates, r.available)):
            if ok and est is not None:
                out[k, i] = math.hypot(est.x - reference[i, 0], est.y - reference[i, 1])
    return out


def rmse(errors: np.ndarray, axis=None) -> np.ndarray | float:
    """RMSE over non-NaN entries (NaN where nothing is available)."""
    errors = np.asarray(errors, dtype=float)
    sq = np.where(np.isnan(errors), 0.0, errors**2)
    cnt = (~np.isnan(errors)).sum(axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.sqrt(sq.sum(axis=axis) / cnt)


def ecdf(samples) -> tuple[np.ndarray, np.ndarray]:
    x = np.sort(np.asarray(samples, dtype=float)[~np.isnan(samples)])
    return x, np.arange(1, x.size + 1) / max(x.size, 1)


@dataclass
class RunMetrics:
    """Metrics of one method under one frame configuration."""

    method: str
    configuration: str
    labels: tuple[str, ...]
    frame: tuple[str, str, str]
    node_rmse: np.ndarray
    availability: np.ndarray
    errors: np.ndarray
    all_node_rmse: float

    def ecdf(self) -> tuple[np.ndarray, np.ndarray]:
        return ecdf(self.errors.ravel())


@dataclass
class PositioningReport:
    runs: list[RunMetrics]
    deltas: dict[str, np.ndarray] = field(default_factory=dict)
    spread: dict[str, float] = field(default_factory=dict)
    configurations: tuple[str, ...] = ()

    def run(self, method: str, configuration: str) -> RunMetrics:
        for r in self.runs:
            if r.method == method and r.configuration == configuration:
                return r
        raise KeyError((method, configuration))

    def summary(self) -> dict:
        out = {
            "runs": [
                {
                    "method": r.method,
                    "configuration": r.configuration,
                    "frame": list(r.frame),
                    "all_node_rmse_m": _num(r.all_node_rmse),
                    "node_rmse_m": dict(zip(r.labels, map(_num, r.node_rmse))),
                    "availability": dict(zip(r.labels, map(_num, r.availability))),
                }
                for r in self.runs
            ],
            "configurations": list(self.configurations),
        }
        if self.deltas:
            out["cross_configuration"] = {
                m: {
                    "max_abs_delta_m": _num(self.spread[m]),
                    "delta_m": dict(zip(self.runs[0].labels, map(_num, d))),
                }
                for m, d in self.deltas.items()
            }
            cf = [m for m in self.spread if m == "cf"]
            pgp = [m for m in self.spread if m.startswith("pgp")]
            if cf and pgp:
                out["pgp_spread_smaller_than_cf"] = {
                    m: bool(self.spread[m] < self.spread["cf"]) for m in pgp
                }
        return out


def _num(x) -> float | None:
    x = float(x)
    return None if math.isnan(x) else x


def run_metrics(
    method: str,
    configuration: str,
    results: Sequence[EpochResult],
    truth: NetworkTruth,
    frame: FrameAssumptions,
) -> RunMetrics:
    """Errors against ground truth moved into the run's own frame.

    The origin node is pinned at (0, 0) by construction, so it is left out
    of the pooled all-node RMSE.
    """
    ref = np.array([[p.x, p.y] for p in transform_ground_truth(truth.positions, frame)])
    errs = position_errors(results, ref)
    pooled = np.delete(errs, frame.origin, axis=1)
    return RunMetrics(
        method=method,
        configuration=configuration,
        labels=truth.labels,
        frame=tuple(truth.labels[i] for i in frame.nodes),
        node_rmse=rmse(errs, axis=0),
        availability=availability(results),
        errors=errs,
        all_node_rmse=float(rmse(pooled)),
    )


def positioning_report(
    runs: Mapping[tuple[str, str], Sequence[EpochResult]],
    truth: NetworkTruth | None,
    configurations: Mapping[str, FrameAssumptions],
) -> PositioningReport:
    """Compare methods across frame configurations.

    ``runs`` maps (method, configuration name) to that run's results; all
    runs must cover the same epochs. With two or more configurations the
    per-node RMSE delta between the first two is reported for every method,
    together with its largest magnitude (the method's spread).
    """
    truth = _require_truth(truth)
    lengths = {len(r) for r in runs.values()}
    if len(lengths) > 1:
        raise ValueError(f"result sequences are misaligned: lengths {sorted(lengths)}")
    metrics = [run_metrics(m, c, res, truth, configurations[c]) for (m, c), res in runs.items()]
    report = PositioningReport(metrics, configurations=tuple(configurations))
    names = list(configurations)
    if len(names) >= 2:
        first, second = names[:2]
        for method in dict.fromkeys(m for m, _ in runs):
            try:
                a = report.run(method, first).node_rmse
                b = report.run(method, second).node_rmse
            except KeyError:
                continue
            delta = b - a
            report.deltas[method] = delta
            finite = np.abs(delta[~np.isnan(delta)])
            report.spread[method] = float(finite.max()) if finite.size else math.nan
    return report


# -- report files ---------------------------------------------------------------

def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if isinstance(v, float) and math.isnan(v) else (f"{v:.6g}" if isinstance(v, float) else v) for v in row])
    return path


def write_ranging_reports(out: Path, dataset, truth: NetworkTruth) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    stats = ranging_stats(dataset, truth)
    fields = [f for f in ClassStats.__dataclass_fields__]
    rows = [[name] + ([float(getattr(s, f)) for f in fields] if s else [math.nan] * len(fields))
            for name, s in stats.rows().items()]
    header = ["class", "count", "share", "mean_m", "median_m", "variance_m2", "q1sigma_m", "q2sigma_m",
              "q3sigma_m", "p25_m", "p50_m", "p75_m"]
    _write_csv(out / "ranging_stats.csv", header, rows)

    res = residuals(dataset, truth)
    labels = truth.labels
    _write_csv(
        out / "residuals.csv",
        ["t_s", "node_a", "node_b", "los", "measured_m", "reference_m", "residual_m"],
        ((float(t), labels[i], labels[j], int(l), float(z), float(d), float(z - d))
         for t, i, j, l, z, d in zip(res.epoch, res.i, res.j, res.los, res.measured, res.reference)),
    )
    pr = pairwise_rmse_matrix(dataset, truth)
    _write_csv(out / "pairwise_rmse.csv", ["node"] + [f"{l}_m" for l in labels],
               ([labels[i]] + [float(v) for v in pr[i]] for i in range(len(labels))))
    qq = qq_correlation(dataset, truth)
    step = max(1, qq.reference.size // 2000)
    _write_csv(out / "qq.csv", ["reference_m", "measured_m"],
               zip(map(float, qq.reference[::step]), map(float, qq.measured[::step])))
    return {
        "ranging": {k: (asdict(v) if v else None) for k, v in stats.rows().items()},
        "qq_r_squared": qq.r_squared,
        "qq_degenerate": qq.degenerate,
    }


def write_positioning_reports(out: Path, report: PositioningReport) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    for r in report.runs:
        tag = f"{r.method}_{r.configuration}"
        _write_csv(out / f"node_rmse_{tag}.csv", ["node", "rmse_m", "availability"],
                   ((l, float(e), float(a)) for l, e, a in zip(r.labels, r.node_rmse, r.availability)))
        x, f = r.ecdf()
        _write_csv(out / f"ecdf_{tag}.csv", ["error_m", "cdf"], zip(map(float, x), map(float, f)))
    if report.deltas:
        methods = list(report.deltas)
        labels = report.runs[0].labels
        _write_csv(out / "cross_config_delta.csv", ["node"] + [f"{m}_delta_m" for m in methods],
                   ([labels[i]] + [float(report.deltas[m][i]) for m in methods] for i in range(len(labels))))
    return report.summary()


def write_summary(out: Path, summary: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "summary.json"
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **summary}, indent=2, sort_keys=True))
    return path

"""Command-line pipelines: simulate, calibrate, evaluate and demo.

Stages talk to each other only through files. Every output directory gets a
``manifest.json`` recording the command, its resolved inputs and the seed,
which is enough to regenerate the outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .closed_form import FrameAssumptions, run_cf
from .config import load_dataclass, read_kv
from .dataio import DatasetFile, dataset_from_simulation, parse_dataset, transform_ground_truth, write_dataset
from .errors import ConfigError, DimensionMismatch, InsufficientData, LayoutInfeasible, NoTruth, ParseError
from .evaluation import (
    positioning_report,
    write_positioning_reports,
    write_ranging_reports,
    write_summary,
)
from .grid import GridBelief, GridSpec, PgpParams
from .pgp import run_pgp
from .simulator import canned_scenarios, generate_dataset, load_model, load_scenario
from .types import EpochResult, Position2D

log = logging.getLogger("meshcal")

OUT_ENV = "MESHCAL_OUT"
DEFAULT_OUT = "meshcal-out"
DEFAULT_SCENARIO = "torgau-like"
DATASET_NAME = "dataset.txt"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Resolved inputs of one calibration run."""

    dataset: Path
    frame: tuple[str, str, str]
    method: str = "both"
    mode: str = "hypotheses"
    params_path: Path | None = None
    out: Path = Path(DEFAULT_OUT)
    seed: int | None = None
    scenario: str | None = None
    model_path: Path | None = None

    def __post_init__(self):
        if not self.dataset.exists():
            raise UsageError(f"dataset not found: {self.dataset}")
        if self.params_path is not None and not self.params_path.exists():
            raise UsageError(f"parameter file not found: {self.params_path}")
        if len(set(self.frame)) != 3:
            raise UsageError(f"frame needs three distinct labels, got {','.join(self.frame)}")
        if self.method not in ("cf", "pgp", "both"):
            raise UsageError(f"unknown method {self.method!r}")
        if self.mode not in ("hypotheses", "parametric"):
            raise UsageError(f"unknown mode {self.mode!r}")


def _default_out() -> Path:
    return Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _write_manifest(out: Path, command: str, **fields) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        **{k: (str(v) if isinstance(v, Path) else v) for k, v in fields.items()},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _read_manifest(directory: Path) -> dict:
    path = directory / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"no manifest.json in results directory {directory}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from None


def _parse_frame(text: str) -> tuple[str, str, str]:
    parts = tuple(p.strip() for p in text.split(",") if p.strip())
    if len(parts) != 3:
        raise UsageError(f"--frame expects three comma-separated labels, got {text!r}")
    return parts


# -- simulate -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = load_scenario(args.scenario)
    changes = {}
    if args.epochs is not None:
        changes["n_epochs"] = args.epochs
    if args.nodes is not None and args.nodes != spec.n_nodes:
        if spec.layout == "explicit":
            raise UsageError(
                f"scenario {spec.name!r} places {spec.n_nodes} nodes explicitly; --nodes {args.nodes} conflicts"
            )
        changes["n_nodes"] = args.nodes
    if changes:
        try:
            spec = dataclasses.replace(spec, **changes)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    model = load_model(args.model, seed=args.seed)
    truth, matrices = generate_dataset(spec, model)
    out = args.out or _default_out()
    out.mkdir(parents=True, exist_ok=True)
    path = out / DATASET_NAME
    write_dataset(dataset_from_simulation(truth, matrices), path)
    _write_manifest(
        out,
        "simulate",
        seed=model.seed,
        scenario=args.scenario,
        model=args.model,
        model_parameters=dataclasses.asdict(model),
        n_epochs=spec.n_epochs,
        n_nodes=spec.n_nodes,
        frames=[list(f) for f in spec.frames],
        outputs=[DATASET_NAME],
    )
    _say(args, f"wrote {len(matrices)} epochs of {truth.n} nodes to {path}")
    return EXIT_OK


# -- calibrate ------------------------------------------------------------------

def _grid_for(data: DatasetFile, frame: FrameAssumptions, cell: float, margin: float) -> GridSpec:
    """Grid around the frame-aligned truth, else a square sized by the ranges."""
    if data.ground_truth is not None:
        xy = np.array([[p.x, p.y] for p in transform_ground_truth(data.ground_truth, frame)])
        return GridSpec.around(xy, margin, cell)
    reach = 0.0
    for rec in data.records:
        vals = rec.entries[rec.mask]
        if vals.size:
            reach = max(reach, float(np.median(vals)) * 2.0)
    reach = min(reach or 50.0, 100.0) + margin
    log.warning("no ground truth in dataset; grid spans +-%.1f m around the origin", reach)
    return GridSpec(-reach, reach, -reach, reach, cell)


def _estimate_rows(results: Sequence[EpochResult], labels: Sequence[str]):
    for r in results:
        for lbl, est, ok, note in zip(labels, r.estimates, r.available, r.notes):
            x = "" if est is None else f"{est.x:.6f}"
            y = "" if est is None else f"{est.y:.6f}"
            yield [f"{r.epoch:.4f}", lbl, x, y, int(ok), note]


def write_results(out: Path, tag: str, results: Sequence[EpochResult], labels: Sequence[str]) -> list[str]:
    est_name, av_name = f"estimates_{tag}.csv", f"availability_{tag}.csv"
    with open(out / est_name, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "node", "x_m", "y_m", "available", "note"])
        w.writerows(_estimate_rows(results, labels))
    flags = np.array([r.available for r in results], dtype=bool) if results else np.zeros((0, len(labels)))
    share = flags.mean(axis=0) if len(results) else np.full(len(labels), math.nan)
    with open(out / av_name, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "available_epochs", "epochs", "availability"])
        for i, lbl in enumerate(labels):
            w.writerow([lbl, int(flags[:, i].sum()) if len(results) else 0, len(results), f"{share[i]:.6f}"])
    return [est_name, av_name]


def read_results(path: Path, labels: Sequence[str]) -> list[EpochResult]:
    """Inverse of the estimates CSV written by ``calibrate``."""
    index = {lbl: i for i, lbl in enumerate(labels)}
    n = len(labels)
    epochs: dict[str, list] = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                slot = epochs.setdefault(row["t_s"], [[None] * n, [False] * n, [""] * n])
                i = index[row["node"]]
                if row["x_m"] != "":
                    slot[0][i] = Position2D(float(row["x_m"]), float(row["y_m"]))
                slot[1][i] = row["available"] == "1"
                slot[2][i] = row["note"]
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: malformed estimates file ({exc})") from None
    return [EpochResult(float(t), *slot) for t, slot in epochs.items()]


def _dump_beliefs(out: Path, tag: str, wanted: set[int], labels: Sequence[str]):
    def observer(k: int, beliefs: dict[int, GridBelief]):
        if k not in wanted:
            return
        path = out / f"beliefs_{tag}_epoch{k:05d}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "x_m", "y_m", "mass"])
            for node in sorted(beliefs):
                b = beliefs[node]
                cells = np.flatnonzero(b.flat > 0)
                centers = b.spec.centers()[cells]
                for (x, y), m in zip(centers, b.flat[cells]):
                    w.writerow([labels[node], f"{x:.4f}", f"{y:.4f}", f"{m:.6e}"])

    return observer


def calibrate(config: RunConfig, cell: float, margin: float, dump_epochs: Sequence[int] = (),
              configuration: str | None = None, quiet: bool = False) -> dict:
    data = _load_dataset(config.dataset)
    try:
        frame = data.frame(config.frame)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    params = load_dataclass(
        PgpParams, read_kv(config.params_path) if config.params_path else [], mode=config.mode
    )
    out = config.out
    out.mkdir(parents=True, exist_ok=True)
    outputs: list[str] = []
    methods: dict[str, str] = {}
    if config.method in ("cf", "both"):
        results = run_cf(data.records, frame)
        outputs += write_results(out, "cf", results, data.header)
        methods["cf"] = "estimates_cf.csv"
    grid = None
    if config.method in ("pgp", "both"):
        grid = _grid_for(data, frame, cell, margin)
        tag = f"pgp-{config.mode}"
        observer = _dump_beliefs(out, tag, set(dump_epochs), data.header) if dump_epochs else None
        results = run_pgp(data.records, frame, grid, params, observer)
        outputs += write_results(out, tag, results, data.header)
        methods[tag] = f"estimates_{tag}.csv"
        outputs += [f"beliefs_{tag}_epoch{k:05d}.csv" for k in sorted(set(dump_epochs)) if k < len(data.records)]
    name = configuration or "-".join(config.frame)
    _write_manifest(
        out,
        "calibrate",
        seed=config.seed,
        dataset=config.dataset.resolve(),
        frame=list(config.frame),
        configuration=name,
        method=config.method,
        mode=config.mode,
        params=config.params_path,
        pgp_parameters=dataclasses.asdict(params),
        grid=None if grid is None else dataclasses.asdict(grid),
        methods=methods,
        outputs=outputs,
    )
    return {"configuration": name, "methods": sorted(methods), "epochs": len(data.records)}


def cmd_calibrate(args) -> int:
    config = RunConfig(
        dataset=args.dataset,
        frame=_parse_frame(args.frame),
        method=args.method,
        mode=args.mode,
        params_path=args.params,
        out=args.out or _default_out(),
    )
    info = calibrate(config, args.cell_size, args.margin, args.dump_epochs or (), args.name)
    _say(args, f"calibrated {info['epochs']} epochs ({', '.join(info['methods'])}) into {config.out}")
    return EXIT_OK


# -- evaluate -------------------------------------------------------------------

def evaluate(result_dirs: Sequence[Path], out: Path, dataset: Path | None = None) -> dict:
    if not result_dirs:
        raise UsageError("evaluate needs at least one results directory")
    manifests = [(d, _read_manifest(d)) for d in result_dirs]
    for d, m in manifests:
        if m.get("command") != "calibrate" or not m.get("methods"):
            raise UsageError(f"{d} holds no calibration results")
    dataset = dataset or Path(manifests[0][1]["dataset"])
    data = _load_dataset(dataset)
    truth = data.truth()

    runs: dict[tuple[str, str], list[EpochResult]] = {}
    configurations: dict[str, FrameAssumptions] = {}
    for d, m in manifests:
        name = m["configuration"]
        if name in configurations:
            raise UsageError(f"two results directories share configuration name {name!r}")
        try:
            configurations[name] = data.frame(m["frame"])
        except KeyError as exc:
            raise DataError(exc.args[0]) from None
        for method, fname in m["methods"].items():
            path = d / fname
            if not path.exists():
                raise UsageError(f"results file missing: {path}")
            runs[(method, name)] = read_results(path, data.header)

    summary: dict = {
        "dataset": str(dataset),
        "availability": {
            f"{method}/{conf}": dict(zip(data.header, (float(v) for v in _availability(res, data.n))))
            for (method, conf), res in runs.items()
        },
    }
    if truth is None:
        warnings.warn("dataset has no ground truth; ranging and positioning metrics skipped", stacklevel=2)
        summary["warnings"] = ["no ground truth: ranging and positioning metrics skipped"]
    else:
        summary.update(write_ranging_reports(out, data.records, truth))
        report = positioning_report(runs, truth, configurations)
        summary["positioning"] = write_positioning_reports(out, report)
    write_summary(out, summary)
    _write_manifest(
        out,
        "evaluate",
        seed=manifests[0][1].get("seed"),
        dataset=dataset,
        results=[str(d) for d in result_dirs],
        compare=len(result_dirs) >= 2,
        outputs=sorted(p.name for p in out.iterdir() if p.name != "manifest.json"),
    )
    return summary


def _availability(results: Sequence[EpochResult], n: int) -> np.ndarray:
    if not results:
        return np.full(n, math.nan)
    return np.array([r.available for r in results], dtype=bool).mean(axis=0)


def _print_summary(summary: dict, fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(summary, indent=2, sort_keys=True))
        return
    for name, row in summary.get("ranging", {}).items():
        if row:
            print(f"ranging {name:8s} n={row['count']:<8d} mean={row['mean']:.3f} m  median={row['median']:.3f} m  "
                  f"var={row['variance']:.3f} m^2")
    for run in summary.get("positioning", {}).get("runs", []):
        rmse = run["all_node_rmse_m"]
        shown = "n/a" if rmse is None else f"{rmse:.3f} m"
        print(f"positioning {run['method']:16s} {run['configuration']:20s} all-node RMSE {shown}")
    for method, row in summary.get("positioning", {}).get("cross_configuration", {}).items():
        spread = row["max_abs_delta_m"]
        print(f"cross-configuration {method:16s} max |delta| {'n/a' if spread is None else f'{spread:.3f} m'}")
    for msg in summary.get("warnings", []):
        print(f"warning: {msg}")


def cmd_evaluate(args) -> int:
    out = args.out or _default_out() / "evaluation"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        summary = evaluate(args.results, out, args.dataset)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _print_summary(summary, args.format)
    return EXIT_OK


# -- demo -----------------------------------------------------------------------

def cmd_demo(args) -> int:
    root = args.out or _default_out() / "demo"
    sim_args = argparse.Namespace(
        scenario=DEFAULT_SCENARIO, model=None, seed=args.seed, epochs=args.epochs, nodes=None,
        out=root / "simulation", quiet=True,
    )
    cmd_simulate(sim_args)
    dataset = root / "simulation" / DATASET_NAME
    frames = load_scenario(DEFAULT_SCENARIO).frames
    dirs = []
    for k, frame in enumerate(frames, 1):
        d = root / f"config{k}"
        config = RunConfig(dataset=dataset, frame=tuple(frame), method="both", mode=args.mode, out=d, seed=args.seed)
        calibrate(config, args.cell_size, 5.0, configuration=f"config{k}")
        dirs.append(d)
    summary = evaluate(dirs, root / "evaluation")
    _print_summary(summary, args.format)
    return EXIT_OK


# -- plumbing -------------------------------------------------------------------

def _load_dataset(path: Path) -> DatasetFile:
    try:
        return parse_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {path}") from None
    except ParseError as exc:
        raise DataError(f"{path}: {exc}") from None


def _say(args, text: str) -> None:
    if not getattr(args, "quiet", False):
        print(text)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _epochs(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated epoch indices, got {text!r}") from None
    if any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("epoch indices must be non-negative")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meshcal", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    out_help = f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})"

    s = sub.add_parser("simulate", help="generate a synthetic ranging dataset")
    s.add_argument("--scenario", default=DEFAULT_SCENARIO,
                   help=f"canned scenario name ({', '.join(canned_scenarios())}) or scenario file")
    s.add_argument("--model", type=Path, help="ranging model file (key = value)")
    s.add_argument("--seed", type=int, default=0, help="random seed for the range draws (default 0)")
    s.add_argument("--epochs", type=int, help="override the scenario's epoch count")
    s.add_argument("--nodes", type=int, help="override the node count (random and grid layouts only)")
    s.add_argument("--out", type=Path, help=out_help)
    s.add_argument("-q", "--quiet", action="store_true", help="print nothing on success")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="run CF and/or PGP calibration on a dataset")
    c.add_argument("dataset", type=Path, help="dataset file")
    c.add_argument("--frame", required=True, help="origin,axis,half-plane node labels, e.g. C0DE,4503,6A0D")
    c.add_argument("--method", choices=("cf", "pgp", "both"), default="both", help="methods to run (default both)")
    c.add_argument("--mode", choices=("hypotheses", "parametric"), default="hypotheses",
                   help="PGP uncertainty propagation (default hypotheses)")
    c.add_argument("--params", type=Path, help="PGP parameter file (key = value)")
    c.add_argument("--cell-size", type=float, default=0.25, help="grid cell size in metres (default 0.25)")
    c.add_argument("--margin", type=float, default=5.0, help="grid margin around the truth in metres (default 5)")
    c.add_argument("--dump-epochs", type=_epochs, help="comma-separated epoch indices whose PGP beliefs are dumped")
    c.add_argument("--name", help="configuration name used by evaluate (default: the frame labels)")
    c.add_argument("--out", type=Path, help=out_help)
    c.add_argument("-q", "--quiet", action="store_true", help="print nothing on success")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", help="compute metrics; two or more results directories compare configurations")
    e.add_argument("results", type=Path, nargs="*", help="results directories written by calibrate")
    e.add_argument("--dataset", type=Path, help="dataset file (default: the one named in the first manifest)")
    e.add_argument("--format", choices=("text", "json"), default="text", help="stdout format (default text)")
    e.add_argument("--out", type=Path, help=f"report directory (default: <{OUT_ENV} or ./{DEFAULT_OUT}>/evaluation)")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("demo", help="simulate, calibrate both frame configurations and evaluate")
    d.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    d.add_argument("--epochs", type=int, default=300, help="epochs to simulate (default 300)")
    d.add_argument("--mode", choices=("hypotheses", "parametric"), default="hypotheses", help="PGP mode")
    d.add_argument("--cell-size", type=float, default=0.25, help="grid cell size in metres (default 0.25)")
    d.add_argument("--format", choices=("text", "json"), default="text", help="stdout format (default text)")
    d.add_argument("--out", type=Path, help=f"output root (default: <{OUT_ENV} or ./{DEFAULT_OUT}>/demo)")
    d.set_defaults(func=cmd_demo)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, LayoutInfeasible) as exc:
        print(f"meshcal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, DimensionMismatch, NoTruth, InsufficientData) as exc:
        print(f"meshcal: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort handler maps to exit 3
        log.debug("internal error", exc_info=True)
        print(f"meshcal: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

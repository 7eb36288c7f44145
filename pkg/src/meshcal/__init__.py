"""Self-calibration of fully meshed ranging networks.

Two methods are provided: a closed-form trilateration baseline
(:func:`run_cf`) and a grid-based Bayesian filter with hypothesis-weighted
uncertainty propagation (:func:`run_pgp`), plus a synthetic network
simulator, a plain-text dataset format and an evaluation suite.
"""

from .closed_form import FrameAssumptions, run_cf, run_cf_epoch
from .dataio import DatasetFile, parse_dataset, transform_ground_truth, write_dataset
from .grid import GridBelief, GridSpec, PgpParams
from .pgp import PgpFilter, run_pgp
from .simulator import RangingModel, ScenarioSpec, generate_dataset, load_scenario
from .types import DistanceMatrix, EpochResult, NetworkTruth, Position2D, VisibilityMatrix

__version__ = "0.1.0"

__all__ = [
    "DatasetFile",
    "DistanceMatrix",
    "EpochResult",
    "FrameAssumptions",
    "GridBelief",
    "GridSpec",
    "NetworkTruth",
    "PgpFilter",
    "PgpParams",
    "Position2D",
    "RangingModel",
    "ScenarioSpec",
    "VisibilityMatrix",
    "generate_dataset",
    "load_scenario",
    "parse_dataset",
    "run_cf",
    "run_cf_epoch",
    "run_pgp",
    "transform_ground_truth",
    "write_dataset",
]

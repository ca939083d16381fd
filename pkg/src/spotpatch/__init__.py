"""Bit-masked weight patches with per-layer gates for adapting a frozen
detector to new tasks, with a compact patch file format and footprint
accounting."""
from .data import Dataset, SyntheticTaskSpec, gen_task
from .decathlon import DecathlonResult
from .estimator import GridDetector, PatchedDetector
from .evalmetrics import Box, average_precision, iou, map_at_50
from .exceptions import (ArgumentError, ConfigurationError, DimensionError, FormatError, GraphError,
                         RunError, SpotPatchError)
from .harness import ExperimentConfig, RunReport, run_decathlon
from .losses import LossConfig
from .model import SourceModel
from .patch_format import DeployedPatch, FootprintReport, LayerPatch, deserialize, footprint, serialize
from .patching import PatchMode, PatchTrainState
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "Box", "ConfigurationError", "Dataset", "DecathlonResult", "DeployedPatch",
    "DimensionError", "ExperimentConfig", "FootprintReport", "FormatError", "GraphError", "GridDetector",
    "LayerPatch", "LossConfig", "PatchMode", "PatchTrainState", "PatchedDetector", "RunError",
    "RunReport", "SourceModel", "SpotPatchError", "SyntheticTaskSpec", "Tensor", "average_precision",
    "deserialize", "footprint", "gen_task", "iou", "map_at_50", "no_grad", "run_decathlon", "serialize",
]

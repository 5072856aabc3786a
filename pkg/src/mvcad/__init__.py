"""Multi-view integration of per-frame object detections into globally
consistent 9-DoF CAD model alignments."""

from .geometry import CameraFrame, Pose9DoF
from .datamodel import (
    AlignmentResult,
    CadModel,
    GroundTruthObject,
    Observation,
    SceneInput,
)
from .objective import ObjectiveWeights
from .solver import SolverConfig, SolveReport

__version__ = "0.1.0"

__all__ = [
    "AlignmentResult",
    "CadModel",
    "CameraFrame",
    "GroundTruthObject",
    "Observation",
    "ObjectiveWeights",
    "Pose9DoF",
    "SceneInput",
    "SolveReport",
    "SolverConfig",
    "__version__",
]

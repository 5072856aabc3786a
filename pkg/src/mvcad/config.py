"""Run configuration: one JSON file covering weights, solver, clustering,
tracker, and evaluation settings; CLI flags override file values."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .association import ClusterParams, TrackerParams
from .errors import ParseError, ValidationError
from .evaluation import DEFAULT_SWEEP_GRIDS, AccuracyThresholds
from .objective import ObjectiveWeights
from .solver import SolverConfig
from .synth import STANDARD_CLASS_SYMMETRY


@dataclass(frozen=True)
class RunConfig:
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    solver: SolverConfig = field(default_factory=SolverConfig)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    tracker: TrackerParams = field(default_factory=TrackerParams)
    thresholds: AccuracyThresholds = field(default_factory=AccuracyThresholds)
    symmetry_by_class: dict[str, int] = field(
        default_factory=lambda: dict(STANDARD_CLASS_SYMMETRY))
    sweep_grids: dict[str, tuple[float, ...]] = field(
        default_factory=lambda: {k: tuple(v) for k, v in DEFAULT_SWEEP_GRIDS.items()})
    jobs: int | None = None            # None: one process per available core
    online_chunk: int | None = None
    update_iterations: int | None = None


_SECTIONS = {
    "weights": ObjectiveWeights,
    "solver": SolverConfig,
    "cluster": ClusterParams,
    "tracker": TrackerParams,
    "thresholds": AccuracyThresholds,
}


def _build_section(cls, rec: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(rec) - names
    if unknown:
        raise ValidationError(f"{where}: unknown fields {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in rec.items()}
    return cls(**kwargs)


def config_from_record(rec: dict, where: str = "config") -> RunConfig:
    known = set(_SECTIONS) | {"symmetry_by_class", "sweep_grids", "jobs",
                              "online_chunk", "update_iterations"}
    unknown = set(rec) - known
    if unknown:
        raise ValidationError(f"{where}: unknown fields {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in rec:
            kwargs[name] = _build_section(cls, rec[name], f"{where}.{name}")
    if "symmetry_by_class" in rec:
        kwargs["symmetry_by_class"] = {str(k): int(v)
                                       for k, v in rec["symmetry_by_class"].items()}
    if "sweep_grids" in rec:
        kwargs["sweep_grids"] = {str(k): tuple(float(x) for x in v)
                                 for k, v in rec["sweep_grids"].items()}
    for name in ("jobs", "online_chunk", "update_iterations"):
        if name in rec and rec[name] is not None:
            kwargs[name] = int(rec[name])
    return RunConfig(**kwargs)


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        rec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path.name}:{exc.lineno}: {exc.msg}") from exc
    if not isinstance(rec, dict):
        raise ParseError(f"{path.name}: expected a JSON object")
    return config_from_record(rec, path.name)

"""Online operation: repeated multi-view solves over the video seen so far.

An IncrementalSession absorbs frames and observations in chunks. Each update
rebuilds tracks over the full prefix (the greedy tracker is deterministic
and stable under appended data), re-solves only tracks that received new
observations (warm-started from their cached solution, reduced iteration
budget), re-clusters, and re-solves changed clusters warm-started from the
previous cluster solution. Object ids are inherited between updates by
maximum track overlap, so an object keeps its id as the video grows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .association import (
    ClusterParams,
    TrackerParams,
    _group_alignment,
    build_tracks,
    cluster_alignments,
)
from .datamodel import AlignmentResult, CadModel, CameraFrame, Observation, SceneInput
from .errors import MvcadError, ValidationError
from .objective import ObjectiveWeights, model_solve_inputs
from .retrieval import vote_model
from .solver import SolveReport, SolverConfig, solve_object_variables

logger = logging.getLogger(__name__)


@dataclass
class _GroupState:
    n_observations: int
    alignment: AlignmentResult
    report: SolveReport
    variables: object


class IncrementalSession:
    """Accumulates a scene chunk by chunk and keeps alignments up to date."""

    def __init__(self, cad_db, weights: ObjectiveWeights = ObjectiveWeights(),
                 solver_config: SolverConfig = SolverConfig(),
                 cluster_params: ClusterParams = ClusterParams(),
                 tracker_params: TrackerParams = TrackerParams(),
                 update_iterations: int | None = None):
        self.cad_db = tuple(cad_db)
        self.weights = weights
        self.solver_config = solver_config
        self.cluster_params = cluster_params
        self.tracker_params = tracker_params
        if update_iterations is None:
            update_iterations = max(50, solver_config.max_iterations // 4)
        self.update_config = replace(solver_config, max_iterations=update_iterations)
        self._frames: list[CameraFrame] = []
        self._observations: list[Observation] = []
        self._track_state: dict[int, _GroupState] = {}
        self._cluster_state: dict[int, _GroupState] = {}
        self._cluster_tracks: dict[int, frozenset[int]] = {}
        self._next_object_id = 0

    @property
    def scene(self) -> SceneInput:
        return SceneInput(tuple(self._frames), tuple(self._observations),
                          self.cad_db)

    def _solve_group(self, observations, warm, config):
        model_id = vote_model(observations)
        model = {m.id: m for m in self.cad_db}[model_id]
        vertices, symmetry_order = model_solve_inputs(model)
        scene = self.scene
        pose, report, variables = solve_object_variables(
            scene, observations, self.weights, config, vertices,
            symmetry_order, warm_start=warm)
        return model_id, pose, report, variables

    def update(self, new_frames, new_observations) -> list[AlignmentResult]:
        """Absorb a chunk and return the refreshed alignments.

        New frame indices must exceed all previously seen indices.
        """
        new_frames = sorted(new_frames, key=lambda f: f.frame_index)
        if self._frames and new_frames:
            if new_frames[0].frame_index <= self._frames[-1].frame_index:
                raise ValidationError(
                    "update: new frame indices must extend the prefix")
        self._frames.extend(new_frames)
        self._observations.extend(
            sorted(new_observations, key=lambda o: o.frame_index))
        scene = self.scene

        tracks = build_tracks(scene, self.tracker_params)
        track_by_id = {t.track_id: t for t in tracks}
        for track in tracks:
            cached = self._track_state.get(track.track_id)
            if cached is not None and cached.n_observations == len(track.observations):
                continue
            warm = cached.variables if cached is not None else None
            try:
                model_id, pose, report, variables = self._solve_group(
                    track.observations, warm, self.update_config)
            except MvcadError as exc:
                logger.warning("track %d dropped: %s", track.track_id, exc)
                self._track_state.pop(track.track_id, None)
                continue
            alignment = _group_alignment(track.track_id, model_id, track.class_id,
                                         pose, track.observations, report)
            self._track_state[track.track_id] = _GroupState(
                len(track.observations), alignment, report, variables)

        live = [s.alignment for tid, s in sorted(self._track_state.items())
                if tid in track_by_id]
        if not live:
            return []
        symmetry = {m.id: m.effective_symmetry_order for m in self.cad_db}
        clusters = cluster_alignments(live, self.cluster_params, symmetry)

        # Assign object ids by maximum overlap with the previous clusters.
        new_cluster_tracks = [frozenset(members) for members in clusters]
        assignments: dict[int, int] = {}
        taken: set[int] = set()
        for ci, members in enumerate(new_cluster_tracks):
            best_id, best_overlap = None, 0
            for oid, prev in sorted(self._cluster_tracks.items()):
                if oid in taken:
                    continue
                overlap = len(members & prev)
                if overlap > best_overlap:
                    best_id, best_overlap = oid, overlap
            if best_id is None:
                best_id = self._next_object_id
                self._next_object_id += 1
            taken.add(best_id)
            assignments[ci] = best_id

        cluster_state: dict[int, _GroupState] = {}
        cluster_tracks: dict[int, frozenset[int]] = {}
        for ci, members in enumerate(clusters):
            oid = assignments[ci]
            union = []
            for tid in sorted(members):
                union.extend(track_by_id[tid].observations)
            union.sort(key=lambda o: o.frame_index)
            prev = self._cluster_state.get(oid)
            if (prev is not None and prev.n_observations == len(union)
                    and self._cluster_tracks.get(oid) == frozenset(members)):
                cluster_state[oid] = prev
                cluster_tracks[oid] = frozenset(members)
                continue
            warm = prev.variables if prev is not None else None
            if warm is None:
                # seed from the best member track
                best_tid = min(members,
                               key=lambda tid: (-self._track_state[tid].alignment.score,
                                                tid))
                warm = self._track_state[best_tid].variables
            try:
                model_id, pose, report, variables = self._solve_group(
                    union, warm, self.update_config)
            except MvcadError as exc:
                logger.warning("cluster %d dropped: %s", oid, exc)
                continue
            alignment = _group_alignment(oid, model_id, union[0].class_id, pose,
                                         union, report)
            cluster_state[oid] = _GroupState(len(union), alignment, report,
                                             variables)
            cluster_tracks[oid] = frozenset(members)
        self._cluster_state = cluster_state
        self._cluster_tracks = cluster_tracks
        return [cluster_state[oid].alignment for oid in sorted(cluster_state)]

    @property
    def reports(self) -> dict[int, SolveReport]:
        return {oid: st.report for oid, st in sorted(self._cluster_state.items())}

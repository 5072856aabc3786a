"""Grouping detections into physical objects.

Pipeline: tracking-by-detection over 2D boxes, a per-track solve, greedy
3D clustering of the track alignments (merging fragments of one object),
then a re-solve per cluster over the union of its observations.

The tracker is intentionally simple (greedy IoU against the last box of
each open same-class track); clustering downstream repairs fragmentation.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import AlignmentResult, CadModel, Observation, SceneInput
from .errors import MvcadError, ValidationError
from .geometry import symmetry_min_angle_deg
from .objective import ObjectiveWeights, model_solve_inputs
from .retrieval import vote_model
from .solver import SolveReport, SolverConfig, solve_object

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackerParams:
    iou_threshold: float = 0.3
    max_gap: int = 30           # frames without a match before a track closes
    size_gate: float = 0.6      # min sqrt-area ratio between matched boxes (0 = off)
    min_track_length: int = 3   # shorter tracks are ignored by integration

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValidationError("iou_threshold: must be in (0, 1]")
        if self.max_gap < 0:
            raise ValidationError("max_gap: must be >= 0")
        if not (0.0 <= self.size_gate <= 1.0):
            raise ValidationError("size_gate: must be in [0, 1]")
        if self.min_track_length < 1:
            raise ValidationError("min_track_length: must be >= 1")


@dataclass(frozen=True)
class ClusterParams:
    translation_radius: float = 0.40   # meters
    rotation_radius_deg: float = 40.0
    scale_radius: float = 0.40         # relative, max over axes

    def __post_init__(self):
        for name in ("translation_radius", "rotation_radius_deg", "scale_radius"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name}: must be > 0")


@dataclass
class Track:
    track_id: int
    class_id: str
    observations: list[Observation] = field(default_factory=list)

    @property
    def max_score(self) -> float:
        return max(o.score for o in self.observations)

    @property
    def frame_indices(self) -> list[int]:
        return [o.frame_index for o in self.observations]


def box_iou(a, b) -> float:
    """IoU of two (left, top, right, bottom) boxes."""
    il = max(a[0], b[0])
    it = max(a[1], b[1])
    ir = min(a[2], b[2])
    ib = min(a[3], b[3])
    inter = max(0.0, ir - il) * max(0.0, ib - it)
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


VELOCITY_BASELINE = 5   # boxes back for velocity estimation (averages box noise)
MAX_EXTRAPOLATION = 10  # frames ahead to trust the constant-velocity model


def _predicted_box(track: Track, frame_index: int) -> np.ndarray:
    """Constant-velocity extrapolation of the track's box to frame_index.

    Plain last-box matching swaps identities when two same-class objects
    cross in the image; extrapolating each side by the per-frame velocity
    keeps crossing tracks apart. The velocity is measured over several
    frames so per-frame box noise averages out. Falls back to the last box
    for new tracks, degenerate predictions, or long gaps.
    """
    obs = track.observations
    last = obs[-1].box
    ahead = frame_index - obs[-1].frame_index
    if len(obs) < 2 or ahead > MAX_EXTRAPOLATION:
        return last
    ref = obs[max(0, len(obs) - 1 - VELOCITY_BASELINE)]
    gap = obs[-1].frame_index - ref.frame_index
    pred = last + (last - ref.box) * (ahead / gap)
    if pred[0] < pred[2] and pred[1] < pred[3]:
        return pred
    return last


def _size_compatible(box_a, box_b, gate: float) -> bool:
    """Sqrt-area ratio gate; crossing objects at different depths differ in
    box size even when their boxes overlap."""
    if gate <= 0.0:
        return True
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    ratio = math.sqrt(area_a / area_b) if area_b > 0 else math.inf
    return gate <= ratio <= 1.0 / gate


def build_tracks(scene: SceneInput, params: TrackerParams = TrackerParams()) -> list[Track]:
    """Greedy per-frame matching by box IoU against each open track's
    velocity-predicted box.

    Same-class gate, match threshold params.iou_threshold, tracks close after
    params.max_gap unmatched frames. Every observation lands in exactly one
    track; tracks are class-pure with strictly increasing frame indices.
    """
    by_frame: dict[int, list[Observation]] = {}
    for obs in scene.observations:
        by_frame.setdefault(obs.frame_index, []).append(obs)

    open_tracks: list[Track] = []
    last_matched: dict[int, int] = {}
    all_tracks: list[Track] = []
    next_id = 0
    for fi in sorted(by_frame):
        open_tracks = [t for t in open_tracks
                       if fi - last_matched[t.track_id] <= params.max_gap]
        detections = by_frame[fi]
        # Candidate pairs sorted by IoU descending; ties by (track, detection)
        # order for determinism.
        pairs = []
        for ti, track in enumerate(open_tracks):
            ref_box = _predicted_box(track, fi)
            last_box = track.observations[-1].box
            for di, obs in enumerate(detections):
                if obs.class_id != track.class_id:
                    continue
                if not _size_compatible(obs.box, last_box, params.size_gate):
                    continue
                iou = box_iou(ref_box, obs.box)
                if iou >= params.iou_threshold:
                    pairs.append((-iou, ti, di))
        pairs.sort()
        used_tracks: set[int] = set()
        used_dets: set[int] = set()
        for _, ti, di in pairs:
            if ti in used_tracks or di in used_dets:
                continue
            used_tracks.add(ti)
            used_dets.add(di)
            track = open_tracks[ti]
            track.observations.append(detections[di])
            last_matched[track.track_id] = fi
        for di, obs in enumerate(detections):
            if di in used_dets:
                continue
            track = Track(next_id, obs.class_id, [obs])
            last_matched[next_id] = fi
            next_id += 1
            open_tracks.append(track)
            all_tracks.append(track)
    return all_tracks


# ---------------------------------------------------------------------------
# 3D clustering of alignments
# ---------------------------------------------------------------------------

def _scale_distance(s1: np.ndarray, s2: np.ndarray) -> float:
    return float(np.max(np.abs(s1 - s2) / np.maximum(s1, s2)))


def cluster_alignments(alignments, params: ClusterParams = ClusterParams(),
                       symmetry_by_model: dict[str, int] | None = None) -> list[list[int]]:
    """Greedy seeded clustering of alignments into same-object groups.

    Seed = highest remaining score (ties: lowest object_id); members = same
    class and within the translation / rotation / relative-scale radii of the
    seed. Rotation distance absorbs the seed model's vertical symmetry.
    Returns clusters as lists of object_ids; clusters partition the input.
    """
    remaining = sorted(alignments, key=lambda a: (-a.score, a.object_id))
    symmetry_by_model = symmetry_by_model or {}
    clusters: list[list[int]] = []
    while remaining:
        seed = remaining[0]
        order = symmetry_by_model.get(seed.cad_model_id, 1)
        members = []
        rest = []
        for a in remaining:
            if (a.class_id == seed.class_id
                    and float(np.linalg.norm(a.pose.t - seed.pose.t)) <= params.translation_radius
                    and symmetry_min_angle_deg(a.pose.rotation, seed.pose.rotation,
                                               order) <= params.rotation_radius_deg
                    and _scale_distance(a.pose.s, seed.pose.s) <= params.scale_radius):
                members.append(a.object_id)
            else:
                rest.append(a)
        clusters.append(sorted(members))
        remaining = rest
    return clusters


# ---------------------------------------------------------------------------
# Full integration pipeline
# ---------------------------------------------------------------------------

TRACK_SOLVE_BUDGET = 0.25  # fraction of max_iterations for per-track solves
MAX_MERGE_ROUNDS = 3       # cluster / re-solve / re-cluster fixpoint rounds


def _track_solver_config(config: SolverConfig) -> SolverConfig:
    return replace(config, max_iterations=max(1, int(config.max_iterations
                                                     * TRACK_SOLVE_BUDGET)))


def solve_observation_group(scene: SceneInput, observations, weights,
                            config: SolverConfig, on_iteration=None):
    """Vote a model for the group and solve its pose.

    Returns (cad_model_id, pose, report) or raises MvcadError (NoVotes,
    NoObservations, NonFiniteObjective).
    """
    model_id = vote_model(observations)
    model = scene.models_by_id()[model_id]
    vertices, symmetry_order = model_solve_inputs(model)
    pose, report = solve_object(scene, observations, weights, config, vertices,
                                symmetry_order, on_iteration=on_iteration)
    return model_id, pose, report


def _group_alignment(object_id, model_id, class_id, pose, observations, report):
    return AlignmentResult(
        object_id=object_id,
        cad_model_id=model_id,
        class_id=class_id,
        pose=pose,
        score=max(o.score for o in observations),
        n_supporting_frames=len({o.frame_index for o in observations}),
        final_objective=report.final_objective,
    )


def _solve_group_task(args):
    scene, object_id, observations, weights, config = args
    try:
        model_id, pose, report = solve_observation_group(scene, observations,
                                                         weights, config)
    except MvcadError as exc:
        return object_id, None, None, str(exc)
    alignment = _group_alignment(object_id, model_id, observations[0].class_id,
                                 pose, observations, report)
    return object_id, alignment, report, None


def _solve_groups(scene, groups, weights, config, jobs, on_iteration):
    """Solve observation groups keyed by object id; failures are logged and
    dropped. Deterministic output order by object id."""
    results: dict[int, tuple[AlignmentResult, SolveReport]] = {}
    if jobs > 1 and on_iteration is None and len(groups) > 1:
        tasks = [(scene, oid, obs, weights, config) for oid, obs in groups]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_solve_group_task, tasks))
    else:
        outcomes = []
        for oid, obs in groups:
            try:
                model_id, pose, report = solve_observation_group(
                    scene, obs, weights, config, on_iteration=on_iteration)
            except MvcadError as exc:
                outcomes.append((oid, None, None, str(exc)))
                continue
            alignment = _group_alignment(oid, model_id, obs[0].class_id, pose,
                                         obs, report)
            outcomes.append((oid, alignment, report, None))
    for oid, alignment, report, error in outcomes:
        if error is not None:
            logger.warning("object %s dropped: %s", oid, error)
            continue
        results[oid] = (alignment, report)
    return results


def integrate_scene(scene: SceneInput, weights: ObjectiveWeights = ObjectiveWeights(),
                    solver_config: SolverConfig = SolverConfig(),
                    cluster_params: ClusterParams = ClusterParams(),
                    tracker_params: TrackerParams = TrackerParams(),
                    jobs: int = 1, on_iteration=None):
    """Full pipeline: tracks -> per-track solve -> cluster -> re-solve per
    cluster over the union of member observations.

    Returns (alignments, reports) with one AlignmentResult per cluster,
    object ids in cluster formation order. Failing objects are dropped with
    a logged diagnostic.
    """
    tracks = [t for t in build_tracks(scene, tracker_params)
              if len(t.observations) >= tracker_params.min_track_length]
    if not tracks:
        return [], {}
    track_by_id = {t.track_id: t for t in tracks}

    track_groups = [(t.track_id, list(t.observations)) for t in tracks]
    track_solutions = _solve_groups(scene, track_groups, weights,
                                    _track_solver_config(solver_config), jobs,
                                    on_iteration)
    if not track_solutions:
        return [], {}

    track_alignments = [a for a, _ in track_solutions.values()]
    symmetry_by_model = {m.id: m.effective_symmetry_order for m in scene.cad_db}
    clusters = cluster_alignments(track_alignments, cluster_params, symmetry_by_model)
    members_list = [frozenset(c) for c in clusters]

    def union_observations(members):
        union = []
        for tid in sorted(members):
            union.extend(track_by_id[tid].observations)
        union.sort(key=lambda o: o.frame_index)
        return union

    # Re-solve per cluster, then re-cluster the (more accurate) re-solved
    # poses: fragments whose track-level solves were too far apart to merge
    # usually land together after seeing their union. Iterate to a fixpoint.
    cache: dict[frozenset, tuple] = {}
    solutions: dict[int, tuple] = {}
    for _ in range(MAX_MERGE_ROUNDS):
        todo = [(ci, union_observations(m)) for ci, m in enumerate(members_list)
                if m not in cache]
        solved = _solve_groups(scene, todo, weights, solver_config, jobs,
                               on_iteration)
        for ci, m in enumerate(members_list):
            if m in cache:
                continue
            if ci in solved:
                cache[m] = solved[ci]
        solutions = {}
        for ci, m in enumerate(members_list):
            if m in cache:
                alignment, report = cache[m]
                solutions[ci] = (replace(alignment, object_id=ci), report)
        if len(solutions) <= 1:
            break
        sols = [solutions[k][0] for k in sorted(solutions)]
        regroup = cluster_alignments(sols, cluster_params, symmetry_by_model)
        if all(len(g) == 1 for g in regroup):
            break
        members_list = [frozenset().union(*(members_list[i] for i in group))
                        for group in regroup]

    alignments = [solutions[k][0] for k in sorted(solutions)]
    reports = {k: solutions[k][1] for k in sorted(solutions)}
    return alignments, reports

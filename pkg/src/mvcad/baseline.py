"""Single-frame baselines: per-observation alignments without multi-view.

Two variants, both followed by 3D-cluster deduplication (keeping the
top-scored member of each cluster):
- class_avg: scale and depth taken from per-class statistics.
- scale_pred: scale from the observation's prediction, depth derived by
  minimizing the projected-box error along the viewing ray.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .association import ClusterParams, cluster_alignments
from .datamodel import AlignmentResult, GroundTruthObject, SceneInput
from .errors import (
    AllVerticesBehindCameraError,
    DivergentDepthError,
    ParseError,
    ValidationError,
)
from .geometry import (
    backproject,
    quat_canonical,
    quat_conjugate,
    quat_from_matrix,
    quat_multiply,
    world_to_camera,
    Pose9DoF,
)
from .objective import hull_subsample, projected_vertex_box
from .solver import derive_depth_single_frame

logger = logging.getLogger(__name__)

VARIANTS = ("class_avg", "scale_pred")


@dataclass(frozen=True)
class ClassStats:
    scale: tuple[float, float, float]
    depth: float

    def __post_init__(self):
        if any(v <= 0 for v in self.scale) or self.depth <= 0:
            raise ValidationError("class stats: scale and depth must be > 0")


def compute_class_stats(scene: SceneInput, ground_truth: list[GroundTruthObject]):
    """Per-class mean scale and mean observed camera depth (the synthetic
    stand-in for training-set statistics)."""
    scales: dict[str, list[np.ndarray]] = {}
    depths: dict[str, list[float]] = {}
    frames = scene.frames_by_index()
    for g in ground_truth:
        scales.setdefault(g.class_id, []).append(g.pose.s)
        for f in frames.values():
            z = float(world_to_camera(f, g.pose.t)[2])
            if z > 0.0:
                depths.setdefault(g.class_id, []).append(z)
    stats = {}
    for cls in scales:
        mean_s = np.mean(np.stack(scales[cls]), axis=0)
        mean_d = float(np.mean(depths.get(cls, [1.0])))
        stats[cls] = ClassStats(tuple(float(v) for v in mean_s), mean_d)
    return stats


def save_class_stats(stats: dict[str, ClassStats], path) -> None:
    rec = {cls: {"scale": list(st.scale), "depth": st.depth}
           for cls, st in sorted(stats.items())}
    Path(path).write_text(json.dumps(rec, indent=2) + "\n", encoding="utf-8")


def load_class_stats(path) -> dict[str, ClassStats]:
    path = Path(path)
    try:
        rec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path.name}:{exc.lineno}: {exc.msg}") from exc
    if not isinstance(rec, dict):
        raise ParseError(f"{path.name}: expected a JSON object")
    return {cls: ClassStats(tuple(v["scale"]), v["depth"])
            for cls, v in rec.items()}


def single_frame_alignments(scene: SceneInput, variant: str,
                            class_stats: dict[str, ClassStats] | None = None
                            ) -> list[AlignmentResult]:
    """One alignment per observation (no deduplication). Observations that
    cannot be placed (no vote, missing inputs, divergent depth) are skipped
    with a logged diagnostic."""
    if variant not in VARIANTS:
        raise ValidationError(f"variant {variant!r}: expected one of {VARIANTS}")
    if variant == "class_avg" and class_stats is None:
        raise ValidationError("class_avg variant requires class stats")
    frames = scene.frames_by_index()
    models = scene.models_by_id()
    hulls = {mid: hull_subsample(m.vertices) for mid, m in models.items()}
    out = []
    ordered = sorted(enumerate(scene.observations),
                     key=lambda io: (io[1].frame_index, io[0]))
    for idx, obs in ordered:
        if obs.model_vote is None:
            logger.info("observation %d skipped: no model vote", idx)
            continue
        model_id = obs.model_vote.cad_model_id
        frame = frames[obs.frame_index]
        # world rotation from the camera-space prediction: R = E_R^T R_i
        q_world = quat_canonical(quat_multiply(
            quat_conjugate(quat_from_matrix(frame.E_R)), obs.rotation_pred))
        if variant == "scale_pred":
            if obs.scale_pred is None:
                logger.info("observation %d skipped: no scale prediction", idx)
                continue
            scale = obs.scale_pred
            try:
                beta = derive_depth_single_frame(frame, obs, scale, q_world,
                                                 hulls[model_id])
            except DivergentDepthError as exc:
                logger.info("observation %d skipped: %s", idx, exc)
                continue
        else:
            st = class_stats.get(obs.class_id)
            if st is None:
                logger.info("observation %d skipped: no stats for class %s",
                            idx, obs.class_id)
                continue
            scale = np.asarray(st.scale, dtype=float)
            beta = st.depth
        t = backproject(frame, obs.center2d, beta)
        pose = Pose9DoF(t, q_world, scale)
        try:
            sides, _, _ = projected_vertex_box(frame, pose.t, pose.rotation,
                                               pose.s, hulls[model_id])
            residual = float(np.sum(np.abs(
                sides - np.array([obs.box[0], obs.box[1], obs.box[2], obs.box[3]]))))
        except AllVerticesBehindCameraError:
            logger.info("observation %d skipped: behind camera", idx)
            continue
        out.append(AlignmentResult(
            object_id=idx,
            cad_model_id=model_id,
            class_id=obs.class_id,
            pose=pose,
            score=obs.score,
            n_supporting_frames=1,
            final_objective=residual,
        ))
    return out


def deduplicate_top_scored(alignments, cluster_params: ClusterParams = ClusterParams(),
                           symmetry_by_model: dict[str, int] | None = None
                           ) -> list[AlignmentResult]:
    """Cluster alignments in 3D and keep the top-scored member per cluster."""
    by_id = {a.object_id: a for a in alignments}
    clusters = cluster_alignments(alignments, cluster_params, symmetry_by_model)
    kept = []
    for members in clusters:
        best = min(members, key=lambda oid: (-by_id[oid].score, oid))
        kept.append(by_id[best])
    return sorted(kept, key=lambda a: a.object_id)


def baseline_alignments(scene: SceneInput, variant: str,
                        class_stats: dict[str, ClassStats] | None = None,
                        cluster_params: ClusterParams = ClusterParams()
                        ) -> list[AlignmentResult]:
    """Per-frame single-view alignments, deduplicated per cluster."""
    per_frame = single_frame_alignments(scene, variant, class_stats)
    symmetry = {m.id: m.effective_symmetry_order for m in scene.cad_db}
    return deduplicate_top_scored(per_frame, cluster_params, symmetry)

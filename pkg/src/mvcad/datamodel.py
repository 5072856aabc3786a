"""Observation, CAD-model, scene, and alignment types plus JSONL file I/O.

A scene is a directory of JSON Lines files: ``frames.jsonl``,
``observations.jsonl``, ``models.jsonl``, and optional ``ground_truth.jsonl``.
Every file starts with a self-describing header record; each following line
is one record. Units: meters, degrees, pixels; quaternions are scalar-first
(w, x, y, z) with w >= 0; pixel origin is the top-left corner. Floats
round-trip bit-exactly through JSON (shortest repr). Records with unknown
top-level fields load with a warning, not an error.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DanglingReferenceError,
    ParseError,
    UnknownFieldWarning,
    ValidationError,
)
from .geometry import (
    CameraFrame,
    Pose9DoF,
    as_finite_array,
    quat_canonical,
    quat_to_matrix,
)

FORMAT_VERSION = 1
UNITS = {
    "length": "m",
    "angle": "deg",
    "image": "px",
    "pixel_origin": "top-left corner; centers at half-integer coordinates",
    "quaternion": "scalar-first (w,x,y,z), w >= 0",
}

FRAMES_FILE = "frames.jsonl"
OBSERVATIONS_FILE = "observations.jsonl"
MODELS_FILE = "models.jsonl"
GROUND_TRUTH_FILE = "ground_truth.jsonl"


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelVote:
    """A per-frame shape vote: nearest CAD model id plus optional embedding."""

    cad_model_id: str
    embedding: np.ndarray | None = None

    def __post_init__(self):
        if not self.cad_model_id:
            raise ValidationError("model_vote.cad_model_id: empty")
        if self.embedding is not None:
            emb = np.array(self.embedding, dtype=float)
            if emb.ndim != 1 or not np.all(np.isfinite(emb)):
                raise ValidationError("model_vote.embedding: expected a finite 1-D vector")
            emb.setflags(write=False)
            object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True, eq=False)
class Observation:
    """One detection in one frame.

    `box` is the amodal 2D box (left, top, right, bottom) in pixels; it may
    extend outside the image. `rotation_pred` maps canonical CAD space to the
    camera view space of this frame.
    """

    frame_index: int
    class_id: str
    score: float
    box: np.ndarray
    center2d: np.ndarray
    rotation_pred: np.ndarray
    scale_pred: np.ndarray | None = None
    model_vote: ModelVote | None = None
    track_id: int | None = None

    def __post_init__(self):
        if not isinstance(self.frame_index, (int, np.integer)) or self.frame_index < 0:
            raise ValidationError("frame_index: expected a nonnegative integer")
        if not self.class_id:
            raise ValidationError("class_id: empty")
        score = float(self.score)
        if not (0.0 <= score <= 1.0):
            raise ValidationError(f"score: {score} outside [0, 1]")
        box = as_finite_array(self.box, (4,), "box")
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValidationError("box: requires left < right and top < bottom")
        center2d = as_finite_array(self.center2d, (2,), "center2d")
        q = np.array(self.rotation_pred, dtype=float)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise ValidationError("rotation_pred: expected a finite quaternion (w,x,y,z)")
        n = float(np.linalg.norm(q))
        if abs(n - 1.0) > 1e-6:
            raise ValidationError(f"rotation_pred: quaternion norm {n} not within 1e-6 of 1")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        q = quat_canonical(q)
        q.setflags(write=False)
        scale_pred = self.scale_pred
        if scale_pred is not None:
            scale_pred = as_finite_array(scale_pred, (3,), "scale_pred")
            if np.any(scale_pred <= 0.0):
                raise ValidationError("scale_pred: components must be > 0")
        if self.track_id is not None and not isinstance(self.track_id, (int, np.integer)):
            raise ValidationError("track_id: expected an integer or null")
        object.__setattr__(self, "frame_index", int(self.frame_index))
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "center2d", center2d)
        object.__setattr__(self, "rotation_pred", q)
        object.__setattr__(self, "scale_pred", scale_pred)
        if self.track_id is not None:
            object.__setattr__(self, "track_id", int(self.track_id))

    @property
    def rotation_pred_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation_pred)


@dataclass(frozen=True, eq=False)
class CadModel:
    """A canonical-space CAD model: origin-centered, max axis extent 1.

    Vertical symmetry is a rotation about canonical z; `symmetry_order` >= 2
    iff `is_vertically_symmetric` (orders >= CONTINUOUS_SYMMETRY_ORDER mean
    continuous symmetry).
    """

    id: str
    class_id: str
    vertices: np.ndarray
    is_vertically_symmetric: bool = False
    symmetry_order: int = 1
    embedding: np.ndarray | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("id: empty")
        if not self.class_id:
            raise ValidationError("class_id: empty")
        verts = np.array(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 3 or verts.shape[0] < 4:
            raise ValidationError("vertices: expected an (N>=4, 3) array")
        if not np.all(np.isfinite(verts)):
            raise ValidationError("vertices: non-finite value")
        lo, hi = verts.min(axis=0), verts.max(axis=0)
        center = 0.5 * (lo + hi)
        if np.max(np.abs(center)) > 1e-6:
            raise ValidationError(f"vertices: bounding-box center {center} not at origin")
        max_extent = float(np.max(hi - lo))
        if abs(max_extent - 1.0) > 1e-6:
            raise ValidationError(f"vertices: max axis extent {max_extent} != 1.0")
        order = self.symmetry_order
        if not isinstance(order, (int, np.integer)) or order < 1:
            raise ValidationError("symmetry_order: expected an integer >= 1")
        if bool(self.is_vertically_symmetric) != (order >= 2):
            raise ValidationError(
                "symmetry_order: must be >= 2 exactly when is_vertically_symmetric")
        if self.embedding is not None:
            emb = np.array(self.embedding, dtype=float)
            if emb.ndim != 1 or not np.all(np.isfinite(emb)):
                raise ValidationError("embedding: expected a finite 1-D vector")
            emb.setflags(write=False)
            object.__setattr__(self, "embedding", emb)
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "is_vertically_symmetric", bool(self.is_vertically_symmetric))
        object.__setattr__(self, "symmetry_order", int(order))

    @property
    def effective_symmetry_order(self) -> int:
        return self.symmetry_order if self.is_vertically_symmetric else 1


@dataclass(frozen=True, eq=False)
class GroundTruthObject:
    class_id: str
    cad_model_id: str
    pose: Pose9DoF

    def __post_init__(self):
        if not self.class_id:
            raise ValidationError("class_id: empty")
        if not self.cad_model_id:
            raise ValidationError("cad_model_id: empty")
        if not isinstance(self.pose, Pose9DoF):
            raise ValidationError("pose: expected a Pose9DoF")


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    """One integrated object: selected CAD model plus solved 9-DoF pose."""

    object_id: int
    cad_model_id: str
    class_id: str
    pose: Pose9DoF
    score: float
    n_supporting_frames: int
    final_objective: float

    def __post_init__(self):
        if not isinstance(self.object_id, (int, np.integer)):
            raise ValidationError("object_id: expected an integer")
        if not self.cad_model_id:
            raise ValidationError("cad_model_id: empty")
        if not self.class_id:
            raise ValidationError("class_id: empty")
        if not isinstance(self.pose, Pose9DoF):
            raise ValidationError("pose: expected a Pose9DoF")
        score = float(self.score)
        if not math.isfinite(score):
            raise ValidationError("score: non-finite")
        n = self.n_supporting_frames
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise ValidationError("n_supporting_frames: expected an integer >= 1")
        fo = float(self.final_objective)
        if not math.isfinite(fo):
            raise ValidationError("final_objective: non-finite")
        object.__setattr__(self, "object_id", int(self.object_id))
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "n_supporting_frames", int(n))
        object.__setattr__(self, "final_objective", fo)


@dataclass(frozen=True, eq=False)
class SceneInput:
    """Frames, observations, and the CAD database, cross-validated."""

    frames: tuple[CameraFrame, ...]
    observations: tuple[Observation, ...]
    cad_db: tuple[CadModel, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        observations = tuple(self.observations)
        cad_db = tuple(self.cad_db)
        frame_indices = [f.frame_index for f in frames]
        if len(set(frame_indices)) != len(frame_indices):
            raise ValidationError("frames: duplicate frame_index")
        model_ids = [m.id for m in cad_db]
        if len(set(model_ids)) != len(model_ids):
            raise ValidationError("models: duplicate id")
        known_frames = set(frame_indices)
        known_models = set(model_ids)
        emb_dim = None
        for i, obs in enumerate(observations):
            if obs.frame_index not in known_frames:
                raise DanglingReferenceError(
                    f"observations[{i}]: frame_index {obs.frame_index} not in frames")
            if obs.model_vote is not None:
                if obs.model_vote.cad_model_id not in known_models:
                    raise DanglingReferenceError(
                        f"observations[{i}]: model id "
                        f"{obs.model_vote.cad_model_id!r} not in models")
                emb = obs.model_vote.embedding
                if emb is not None and emb.size > 0:
                    if emb_dim is None:
                        emb_dim = emb.size
                    elif emb.size != emb_dim:
                        raise ValidationError(
                            f"observations[{i}]: embedding length {emb.size} != {emb_dim}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "observations", observations)
        object.__setattr__(self, "cad_db", cad_db)

    def frames_by_index(self) -> dict[int, CameraFrame]:
        return {f.frame_index: f for f in self.frames}

    def models_by_id(self) -> dict[str, CadModel]:
        return {m.id: m for m in self.cad_db}


# ---------------------------------------------------------------------------
# Record conversion
# ---------------------------------------------------------------------------

def _floats(arr) -> list[float]:
    return [float(v) for v in np.asarray(arr).ravel()]


def _matrix(arr) -> list[list[float]]:
    return [[float(v) for v in row] for row in np.asarray(arr)]


def _check_fields(rec: dict, known: set[str], required: set[str], where: str) -> None:
    missing = required - set(rec)
    if missing:
        raise ParseError(f"{where}: missing fields {sorted(missing)}")
    unknown = set(rec) - known
    if unknown:
        warnings.warn(f"{where}: ignoring unknown fields {sorted(unknown)}",
                      UnknownFieldWarning, stacklevel=2)


def frame_to_record(f: CameraFrame) -> dict:
    return {
        "frame_index": f.frame_index,
        "K": _matrix(f.K),
        "E_R": _matrix(f.E_R),
        "e_t": _floats(f.e_t),
        "width": f.width,
        "height": f.height,
    }


def frame_from_record(rec: dict, where: str) -> CameraFrame:
    known = {"frame_index", "K", "E_R", "e_t", "width", "height"}
    _check_fields(rec, known, known, where)
    return CameraFrame(rec["frame_index"], rec["K"], rec["E_R"], rec["e_t"],
                       rec["width"], rec["height"])


def observation_to_record(o: Observation) -> dict:
    vote = None
    if o.model_vote is not None:
        emb = o.model_vote.embedding
        vote = {"cad_model_id": o.model_vote.cad_model_id,
                "embedding": _floats(emb) if emb is not None else None}
    return {
        "frame_index": o.frame_index,
        "class_id": o.class_id,
        "score": o.score,
        "box": _floats(o.box),
        "center2d": _floats(o.center2d),
        "rotation_pred": _floats(o.rotation_pred),
        "scale_pred": _floats(o.scale_pred) if o.scale_pred is not None else None,
        "model_vote": vote,
        "track_id": o.track_id,
    }


def observation_from_record(rec: dict, where: str) -> Observation:
    known = {"frame_index", "class_id", "score", "box", "center2d",
             "rotation_pred", "scale_pred", "model_vote", "track_id"}
    required = {"frame_index", "class_id", "score", "box", "center2d", "rotation_pred"}
    _check_fields(rec, known, required, where)
    vote = rec.get("model_vote")
    if vote is not None:
        vote = ModelVote(vote.get("cad_model_id", ""), vote.get("embedding"))
    return Observation(
        frame_index=rec["frame_index"],
        class_id=rec["class_id"],
        score=rec["score"],
        box=rec["box"],
        center2d=rec["center2d"],
        rotation_pred=rec["rotation_pred"],
        scale_pred=rec.get("scale_pred"),
        model_vote=vote,
        track_id=rec.get("track_id"),
    )


def model_to_record(m: CadModel) -> dict:
    rec = {
        "id": m.id,
        "class_id": m.class_id,
        "vertices": _matrix(m.vertices),
        "is_vertically_symmetric": m.is_vertically_symmetric,
        "symmetry_order": m.symmetry_order,
    }
    if m.embedding is not None:
        rec["embedding"] = _floats(m.embedding)
    return rec


def model_from_record(rec: dict, where: str) -> CadModel:
    known = {"id", "class_id", "vertices", "is_vertically_symmetric",
             "symmetry_order", "embedding"}
    required = {"id", "class_id", "vertices", "is_vertically_symmetric", "symmetry_order"}
    _check_fields(rec, known, required, where)
    return CadModel(rec["id"], rec["class_id"], rec["vertices"],
                    rec["is_vertically_symmetric"], rec["symmetry_order"],
                    rec.get("embedding"))


def pose_to_record(p: Pose9DoF) -> dict:
    return {"t": _floats(p.t), "rotation": _floats(p.rotation), "s": _floats(p.s)}


def pose_from_record(rec: dict, where: str) -> Pose9DoF:
    known = {"t", "rotation", "s"}
    _check_fields(rec, known, known, where)
    return Pose9DoF(rec["t"], rec["rotation"], rec["s"])


def ground_truth_to_record(g: GroundTruthObject) -> dict:
    return {"class_id": g.class_id, "cad_model_id": g.cad_model_id,
            "pose": pose_to_record(g.pose)}


def ground_truth_from_record(rec: dict, where: str) -> GroundTruthObject:
    known = {"class_id", "cad_model_id", "pose"}
    _check_fields(rec, known, known, where)
    return GroundTruthObject(rec["class_id"], rec["cad_model_id"],
                             pose_from_record(rec["pose"], where))


def alignment_to_record(a: AlignmentResult) -> dict:
    return {
        "object_id": a.object_id,
        "cad_model_id": a.cad_model_id,
        "class_id": a.class_id,
        "pose": pose_to_record(a.pose),
        "score": a.score,
        "n_supporting_frames": a.n_supporting_frames,
        "final_objective": a.final_objective,
    }


def alignment_from_record(rec: dict, where: str) -> AlignmentResult:
    known = {"object_id", "cad_model_id", "class_id", "pose", "score",
             "n_supporting_frames", "final_objective"}
    _check_fields(rec, known, known, where)
    return AlignmentResult(rec["object_id"], rec["cad_model_id"], rec["class_id"],
                           pose_from_record(rec["pose"], where), rec["score"],
                           rec["n_supporting_frames"], rec["final_objective"])


# ---------------------------------------------------------------------------
# JSONL plumbing
# ---------------------------------------------------------------------------

def _dump_record(rec: dict, where: str) -> str:
    try:
        return json.dumps(rec, allow_nan=False)
    except ValueError as exc:
        raise ValidationError(f"{where}: non-finite value in record") from exc


def write_jsonl(path: Path, kind: str, records: list[dict]) -> None:
    header = {"kind": kind, "version": FORMAT_VERSION, "units": UNITS}
    lines = [json.dumps(header)]
    for i, rec in enumerate(records):
        lines.append(_dump_record(rec, f"{path.name} record {i}"))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_jsonl(path: Path, kind: str) -> list[tuple[str, dict]]:
    """Parse a JSONL file, returning (location, record) pairs (header checked)."""
    if not path.exists():
        raise OSError(f"{path}: file not found")
    records = []
    header_seen = False
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path.name}:{lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise ParseError(f"{path.name}:{lineno}: expected a JSON object")
            if not header_seen:
                if rec.get("kind") != kind:
                    raise ParseError(
                        f"{path.name}:1: header kind {rec.get('kind')!r} != {kind!r}")
                if rec.get("version") != FORMAT_VERSION:
                    raise ParseError(
                        f"{path.name}:1: unsupported version {rec.get('version')!r}")
                header_seen = True
                continue
            records.append((f"{path.name}:{lineno}", rec))
    if not header_seen:
        raise ParseError(f"{path.name}: missing header line")
    return records


def _load_records(path: Path, kind: str, from_record):
    out = []
    for where, rec in read_jsonl(path, kind):
        try:
            out.append(from_record(rec, where))
        except (ValidationError, DanglingReferenceError) as exc:
            raise type(exc)(f"{where}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# Scene / alignment I/O
# ---------------------------------------------------------------------------

def save_scene(scene: SceneInput, path,
               ground_truth: list[GroundTruthObject] | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_jsonl(path / FRAMES_FILE, "frames",
                [frame_to_record(f) for f in scene.frames])
    write_jsonl(path / OBSERVATIONS_FILE, "observations",
                [observation_to_record(o) for o in scene.observations])
    write_jsonl(path / MODELS_FILE, "models",
                [model_to_record(m) for m in scene.cad_db])
    if ground_truth is not None:
        write_jsonl(path / GROUND_TRUTH_FILE, "ground_truth",
                    [ground_truth_to_record(g) for g in ground_truth])


def load_scene(path) -> SceneInput:
    path = Path(path)
    frames = _load_records(path / FRAMES_FILE, "frames", frame_from_record)
    observations = _load_records(path / OBSERVATIONS_FILE, "observations",
                                 observation_from_record)
    models = _load_records(path / MODELS_FILE, "models", model_from_record)
    return SceneInput(tuple(frames), tuple(observations), tuple(models))


def load_ground_truth(path) -> list[GroundTruthObject]:
    path = Path(path)
    if path.is_dir():
        path = path / GROUND_TRUTH_FILE
    return _load_records(path, "ground_truth", ground_truth_from_record)


def save_ground_truth(ground_truth: list[GroundTruthObject], path) -> None:
    write_jsonl(Path(path), "ground_truth",
                [ground_truth_to_record(g) for g in ground_truth])


def save_alignments(results: list[AlignmentResult], path) -> None:
    write_jsonl(Path(path), "alignments",
                [alignment_to_record(a) for a in results])


def load_alignments(path) -> list[AlignmentResult]:
    return _load_records(Path(path), "alignments", alignment_from_record)


# ---------------------------------------------------------------------------
# Mesh export
# ---------------------------------------------------------------------------

def export_scene_mesh(results: list[AlignmentResult], cad_db: list[CadModel],
                      path) -> None:
    """Write posed model vertices as a Wavefront OBJ point set (one object
    per alignment; models carry no faces, so only `v` records are emitted)."""
    models = {m.id: m for m in cad_db}
    lines = ["# mvcad scene export", "# units: meters"]
    for a in results:
        model = models.get(a.cad_model_id)
        if model is None:
            raise DanglingReferenceError(
                f"alignment {a.object_id}: model id {a.cad_model_id!r} not in models")
        lines.append(f"o object_{a.object_id}_{a.cad_model_id}")
        world = a.pose.t + (a.pose.s * model.vertices) @ quat_to_matrix(a.pose.rotation).T
        for v in world:
            lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

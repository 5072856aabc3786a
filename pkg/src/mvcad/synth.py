"""Deterministic synthetic scenes: ground-truth objects, camera trajectories,
exact rendered observations, and parameterized detector noise.

Observations are rendered with the same projection code the objective uses,
so noiseless scenes evaluate to exactly zero residual at ground truth.
Generation is reproducible from the spec seed (numpy PCG64 via
``np.random.default_rng``); the rng draw order is fixed (objects placed
first, then frames outer loop / objects inner loop).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import (
    CadModel,
    GroundTruthObject,
    ModelVote,
    Observation,
    SceneInput,
)
from .errors import InfeasibleSpecError, ValidationError
from .geometry import (
    CONTINUOUS_SYMMETRY_ORDER,
    CameraFrame,
    Pose9DoF,
    project,
    quat_canonical,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_multiply,
    quat_rot_z,
    world_to_camera,
)
from .objective import BOX_MIN_DEPTH, hull_subsample, projected_vertex_box
from .errors import AllVerticesBehindCameraError


# ---------------------------------------------------------------------------
# Primitive templates (canonical space: origin-centered, max extent 1, z up)
# ---------------------------------------------------------------------------

def box_vertices(extents) -> np.ndarray:
    ex, ey, ez = extents
    hx, hy, hz = ex / 2.0, ey / 2.0, ez / 2.0
    return np.array([[sx * hx, sy * hy, sz * hz]
                     for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])


def cylinder_vertices(n_sides: int = 16, height: float = 1.0) -> np.ndarray:
    ang = 2.0 * math.pi * np.arange(n_sides) / n_sides
    ring = np.stack([0.5 * np.cos(ang), 0.5 * np.sin(ang)], axis=1)
    top = np.column_stack([ring, np.full(n_sides, height / 2.0)])
    bottom = np.column_stack([ring, np.full(n_sides, -height / 2.0)])
    return np.vstack([top, bottom])


def lshape_vertices(depth: float = 0.5) -> np.ndarray:
    """L-shaped prism: unit-square cross-section with one quadrant removed."""
    profile = np.array([(-0.5, -0.5), (0.5, -0.5), (0.5, 0.0),
                        (0.0, 0.0), (0.0, 0.5), (-0.5, 0.5)])
    hz = depth / 2.0
    layers = [np.column_stack([profile, np.full(len(profile), z)])
              for z in (-hz, hz)]
    return np.vstack(layers)


def _template_embedding(model_id: str, dim: int = 8) -> np.ndarray:
    """Deterministic pseudo-embedding derived from the model id."""
    digest = hashlib.sha256(model_id.encode("utf-8")).digest()
    raw = np.frombuffer(digest[: dim * 2], dtype=np.uint16).astype(float)
    vec = raw / 65535.0 - 0.5
    return vec / np.linalg.norm(vec)


def _make_model(mid, class_id, verts, order) -> CadModel:
    return CadModel(mid, class_id, verts, is_vertically_symmetric=order >= 2,
                    symmetry_order=order, embedding=_template_embedding(mid))


def standard_cad_db() -> tuple[CadModel, ...]:
    """Built-in model database: two variants per class, four classes."""
    return (
        _make_model("box_a", "box", box_vertices((1.0, 0.7, 0.5)), 2),
        _make_model("box_b", "box", box_vertices((1.0, 0.55, 0.62)), 2),
        _make_model("crate_a", "crate", box_vertices((1.0, 1.0, 0.58)), 4),
        _make_model("crate_b", "crate", box_vertices((1.0, 1.0, 0.82)), 4),
        _make_model("cylinder_a", "cylinder", cylinder_vertices(16, 1.0),
                    CONTINUOUS_SYMMETRY_ORDER),
        _make_model("cylinder_b", "cylinder", cylinder_vertices(16, 0.55),
                    CONTINUOUS_SYMMETRY_ORDER),
        _make_model("lshape_a", "lshape", lshape_vertices(0.5), 1),
        _make_model("lshape_b", "lshape", lshape_vertices(0.72), 1),
    )


STANDARD_CLASS_SYMMETRY = {
    "box": 2,
    "crate": 4,
    "cylinder": CONTINUOUS_SYMMETRY_ORDER,
    "lshape": 1,
}


# ---------------------------------------------------------------------------
# Spec dataclasses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraSpec:
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class TrajectorySpec:
    """Camera path: orbit around a target, straight line, or waypoints."""

    kind: str = "orbit"
    n_frames: int = 8
    target: tuple[float, float, float] = (0.0, 0.0, 0.5)
    radius: float = 3.4
    height: float = 1.8
    arc_deg: float = 240.0
    start_deg: float = 0.0
    start: tuple[float, float, float] = (-2.0, -3.0, 1.5)
    end: tuple[float, float, float] = (2.0, -3.0, 1.5)
    waypoints: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in ("orbit", "line", "waypoints"):
            raise ValidationError(f"trajectory kind {self.kind!r} unknown")
        if self.n_frames < 1:
            raise ValidationError("n_frames: must be >= 1")
        if self.kind == "waypoints" and len(self.waypoints) != self.n_frames:
            raise ValidationError("waypoints: length must equal n_frames")


@dataclass(frozen=True)
class PoseRanges:
    t_min: tuple[float, float, float] = (-1.1, -1.1, 0.25)
    t_max: tuple[float, float, float] = (1.1, 1.1, 0.85)
    yaw_deg: tuple[float, float] = (0.0, 360.0)
    tilt_max_deg: float = 0.0
    s_min: float = 0.6
    s_max: float = 1.6
    min_separation: float = 0.8

    def __post_init__(self):
        lo = np.asarray(self.t_min, float)
        hi = np.asarray(self.t_max, float)
        if np.any(hi < lo):
            raise ValidationError("pose ranges: t_max must be >= t_min")
        if not (0.0 < self.s_min <= self.s_max):
            raise ValidationError("pose ranges: need 0 < s_min <= s_max")
        if self.min_separation < 0:
            raise ValidationError("min_separation: must be >= 0")


@dataclass(frozen=True)
class VisibilityRule:
    min_vertices_in_image: int = 1
    min_observations_per_object: int = 1


@dataclass(frozen=True)
class NoiseSpec:
    center_sigma: float = 0.0        # px
    rotation_sigma_deg: float = 0.0  # half-normal angle, uniform axis
    box_sigma: float = 0.0           # px per side, independent
    scale_sigma: float = 0.0         # relative, per axis
    dropout_rate: float = 0.0        # probability an observation is dropped
    vote_error_rate: float = 0.0     # probability of voting a wrong model
    score_model: str = "z_penalty"   # score = max(0.05, 1 - 0.1 * sum |z|)

    def __post_init__(self):
        for name in ("center_sigma", "rotation_sigma_deg", "box_sigma", "scale_sigma"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name}: must be >= 0")
        for name in ("dropout_rate", "vote_error_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name}: must be in [0, 1]")
        if self.score_model != "z_penalty":
            raise ValidationError(f"score_model {self.score_model!r} unknown")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_objects: int = 3
    cad_db: tuple[CadModel, ...] | str = "standard"
    pose_ranges: PoseRanges = field(default_factory=PoseRanges)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    camera: CameraSpec = field(default_factory=CameraSpec)
    visibility: VisibilityRule = field(default_factory=VisibilityRule)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.n_objects < 1:
            raise ValidationError("n_objects: must be >= 1")

    def resolve_cad_db(self) -> tuple[CadModel, ...]:
        if isinstance(self.cad_db, str):
            if self.cad_db != "standard":
                raise ValidationError(f"cad_db {self.cad_db!r} unknown")
            return standard_cad_db()
        return tuple(self.cad_db)


# ---------------------------------------------------------------------------
# Camera trajectory
# ---------------------------------------------------------------------------

def look_at_extrinsics(position, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation and translation for a camera at `position`
    looking at `target` (+x right, +y down, +z forward)."""
    position = np.asarray(position, float)
    target = np.asarray(target, float)
    forward = target - position
    n = np.linalg.norm(forward)
    if n == 0.0:
        raise InfeasibleSpecError("camera position equals its look-at target")
    forward = forward / n
    up = np.asarray(up, float)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    E_R = np.stack([right, down, forward])
    return E_R, -E_R @ position


def build_frames(trajectory: TrajectorySpec, camera: CameraSpec) -> list[CameraFrame]:
    positions = []
    if trajectory.kind == "orbit":
        if trajectory.n_frames == 1:
            angles = [math.radians(trajectory.start_deg)]
        else:
            angles = [math.radians(trajectory.start_deg + trajectory.arc_deg * k
                                   / (trajectory.n_frames - 1))
                      for k in range(trajectory.n_frames)]
        positions = [np.array([trajectory.radius * math.cos(a),
                               trajectory.radius * math.sin(a),
                               trajectory.height]) for a in angles]
    elif trajectory.kind == "line":
        start = np.asarray(trajectory.start, float)
        end = np.asarray(trajectory.end, float)
        if trajectory.n_frames == 1:
            positions = [start]
        else:
            positions = [start + (end - start) * k / (trajectory.n_frames - 1)
                         for k in range(trajectory.n_frames)]
    else:
        positions = [np.asarray(w, float) for w in trajectory.waypoints]
    frames = []
    for i, pos in enumerate(positions):
        E_R, e_t = look_at_extrinsics(pos, trajectory.target)
        frames.append(CameraFrame(i, camera.K(), E_R, e_t,
                                  camera.width, camera.height))
    return frames


# ---------------------------------------------------------------------------
# Observation rendering
# ---------------------------------------------------------------------------

def _visible(frame: CameraFrame, pose: Pose9DoF, hull: np.ndarray,
             rule: VisibilityRule) -> bool:
    cam = world_to_camera(frame, pose.t + (pose.s * hull) @ pose.rotation_matrix.T)
    z = cam[:, 2]
    ok = z > BOX_MIN_DEPTH
    if not np.any(ok):
        return False
    u = frame.fx * cam[ok, 0] / z[ok] + frame.cx
    v = frame.fy * cam[ok, 1] / z[ok] + frame.cy
    inside = (u >= 0) & (u <= frame.width) & (v >= 0) & (v <= frame.height)
    return int(np.sum(inside)) >= rule.min_vertices_in_image


def _fix_box_order(box: np.ndarray) -> np.ndarray:
    """Keep left < right and top < bottom after per-side noise (min 1 px)."""
    left, top, right, bottom = box
    if left >= right:
        mid = 0.5 * (left + right)
        left, right = mid - 0.5, mid + 0.5
    if top >= bottom:
        mid = 0.5 * (top + bottom)
        top, bottom = mid - 0.5, mid + 0.5
    return np.array([left, top, right, bottom])


def render_scene(frames, ground_truth, cad_db, noise: NoiseSpec = NoiseSpec(),
                 rng=0, visibility: VisibilityRule = VisibilityRule()) -> SceneInput:
    """Emit observations of the given ground-truth objects from each frame.

    Noiseless fields: center = projection of t, rotation = E_R * R_gt,
    box = exact amodal box of the projected vertices, scale = s_gt,
    vote = the true model. track_id records the ground-truth object index.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    cad_db = tuple(cad_db)
    models = {m.id: m for m in cad_db}
    hulls = {m.id: hull_subsample(m.vertices) for m in cad_db}
    observations = []
    counts = [0] * len(ground_truth)
    for frame in frames:
        q_cam = quat_from_matrix(frame.E_R)
        for oi, gt in enumerate(ground_truth):
            model = models[gt.cad_model_id]
            pose = gt.pose
            if not _visible(frame, pose, hulls[model.id], visibility):
                continue
            p_cam = world_to_camera(frame, pose.t)
            if p_cam[2] <= BOX_MIN_DEPTH:
                continue
            try:
                sides, _, _ = projected_vertex_box(frame, pose.t, pose.rotation,
                                                   pose.s, model.vertices)
            except AllVerticesBehindCameraError:
                continue
            center = project(frame, p_cam)
            box = sides.copy()  # (left, top, right, bottom)
            q_obs = quat_canonical(quat_multiply(q_cam, pose.rotation))
            scale = pose.s.copy()
            vote_id = model.id

            if noise.dropout_rate > 0.0 and rng.uniform() < noise.dropout_rate:
                continue
            z_total = 0.0
            if noise.center_sigma > 0.0:
                n2 = rng.standard_normal(2)
                center = center + noise.center_sigma * n2
                z_total += float(np.sum(np.abs(n2)))
            if noise.rotation_sigma_deg > 0.0:
                axis = rng.standard_normal(3)
                while np.linalg.norm(axis) == 0.0:
                    axis = rng.standard_normal(3)
                n1 = abs(float(rng.standard_normal()))
                angle = math.radians(noise.rotation_sigma_deg) * n1
                q_obs = quat_canonical(
                    quat_multiply(quat_from_axis_angle(axis, angle), q_obs))
                z_total += n1
            if noise.box_sigma > 0.0:
                n4 = rng.standard_normal(4)
                box = _fix_box_order(box + noise.box_sigma * n4)
                z_total += float(np.sum(np.abs(n4)))
            if noise.scale_sigma > 0.0:
                n3 = rng.standard_normal(3)
                scale = np.maximum(scale * (1.0 + noise.scale_sigma * n3), 0.01)
                z_total += float(np.sum(np.abs(n3)))
            if noise.vote_error_rate > 0.0 and len(cad_db) > 1:
                if rng.uniform() < noise.vote_error_rate:
                    others = [m.id for m in cad_db if m.id != model.id]
                    vote_id = others[int(rng.integers(len(others)))]
            score = min(1.0, max(0.05, 1.0 - 0.1 * z_total))

            observations.append(Observation(
                frame_index=frame.frame_index,
                class_id=model.class_id,
                score=score,
                box=box,
                center2d=center,
                rotation_pred=q_obs,
                scale_pred=scale,
                model_vote=ModelVote(vote_id),
                track_id=oi,
            ))
            counts[oi] += 1
    for oi, c in enumerate(counts):
        if c < visibility.min_observations_per_object:
            raise InfeasibleSpecError(
                f"object {oi} has {c} observations "
                f"(< {visibility.min_observations_per_object})")
    return SceneInput(tuple(frames), tuple(observations), cad_db)


def _sample_placements(spec: SynthSpec, rng: np.random.Generator,
                       cad_db) -> list[GroundTruthObject]:
    ranges = spec.pose_ranges
    t_min = np.asarray(ranges.t_min, float)
    t_max = np.asarray(ranges.t_max, float)
    placements: list[GroundTruthObject] = []
    for _ in range(spec.n_objects):
        model = cad_db[int(rng.integers(len(cad_db)))]
        t = None
        for _ in range(5000):
            candidate = rng.uniform(t_min, t_max)
            if all(np.linalg.norm(candidate - g.pose.t) >= ranges.min_separation
                   for g in placements):
                t = candidate
                break
        if t is None:
            raise InfeasibleSpecError(
                "could not place objects with the requested min_separation")
        yaw = math.radians(rng.uniform(*ranges.yaw_deg))
        q = quat_rot_z(yaw)
        if ranges.tilt_max_deg > 0.0:
            phi = rng.uniform(0.0, 2.0 * math.pi)
            tilt = math.radians(rng.uniform(0.0, ranges.tilt_max_deg))
            q = quat_multiply(
                quat_from_axis_angle((math.cos(phi), math.sin(phi), 0.0), tilt), q)
        s = rng.uniform(ranges.s_min, ranges.s_max, 3)
        if model.effective_symmetry_order >= 3:
            s[1] = s[0]  # anisotropic x/y would break the claimed symmetry
        placements.append(GroundTruthObject(model.class_id, model.id,
                                            Pose9DoF(t, quat_canonical(q), s)))
    return placements


def generate(spec: SynthSpec):
    """Build a (SceneInput, ground truth) pair, reproducible from spec.seed."""
    rng = np.random.default_rng(spec.seed)
    cad_db = spec.resolve_cad_db()
    ground_truth = _sample_placements(spec, rng, cad_db)
    frames = build_frames(spec.trajectory, spec.camera)
    scene = render_scene(frames, ground_truth, cad_db, spec.noise, rng,
                         spec.visibility)
    return scene, ground_truth


# ---------------------------------------------------------------------------
# Spec (de)serialization: SynthSpec as a JSON config file
# ---------------------------------------------------------------------------

def _sub_record(cls, rec: dict, where: str, tuple_fields=(), nested_tuples=()):
    import dataclasses

    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(rec) - names
    if unknown:
        raise ValidationError(f"{where}: unknown fields {sorted(unknown)}")
    kwargs = {}
    for key, value in rec.items():
        if key in nested_tuples:
            kwargs[key] = tuple(tuple(v) for v in value)
        elif key in tuple_fields and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def spec_to_record(spec: SynthSpec) -> dict:
    from dataclasses import asdict

    from .datamodel import model_to_record

    rec = {
        "seed": spec.seed,
        "n_objects": spec.n_objects,
        "cad_db": (spec.cad_db if isinstance(spec.cad_db, str)
                   else [model_to_record(m) for m in spec.cad_db]),
        "pose_ranges": asdict(spec.pose_ranges),
        "trajectory": asdict(spec.trajectory),
        "camera": asdict(spec.camera),
        "visibility": asdict(spec.visibility),
        "noise": asdict(spec.noise),
    }
    return rec


def spec_from_record(rec: dict, where: str = "synth spec") -> SynthSpec:
    from .datamodel import model_from_record

    known = {"seed", "n_objects", "cad_db", "pose_ranges", "trajectory",
             "camera", "visibility", "noise"}
    unknown = set(rec) - known
    if unknown:
        raise ValidationError(f"{where}: unknown fields {sorted(unknown)}")
    cad_db = rec.get("cad_db", "standard")
    if not isinstance(cad_db, str):
        cad_db = tuple(model_from_record(m, f"{where}.cad_db[{i}]")
                       for i, m in enumerate(cad_db))
    return SynthSpec(
        seed=rec.get("seed", 0),
        n_objects=rec.get("n_objects", 3),
        cad_db=cad_db,
        pose_ranges=_sub_record(PoseRanges, rec.get("pose_ranges", {}),
                                f"{where}.pose_ranges",
                                tuple_fields=("t_min", "t_max", "yaw_deg")),
        trajectory=_sub_record(TrajectorySpec, rec.get("trajectory", {}),
                               f"{where}.trajectory",
                               tuple_fields=("target", "start", "end"),
                               nested_tuples=("waypoints",)),
        camera=_sub_record(CameraSpec, rec.get("camera", {}), f"{where}.camera"),
        visibility=_sub_record(VisibilityRule, rec.get("visibility", {}),
                               f"{where}.visibility"),
        noise=_sub_record(NoiseSpec, rec.get("noise", {}), f"{where}.noise"),
    )


def load_synth_spec(path) -> SynthSpec:
    import json
    from pathlib import Path

    from .errors import ParseError

    path = Path(path)
    try:
        rec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path.name}:{exc.lineno}: {exc.msg}") from exc
    if not isinstance(rec, dict):
        raise ParseError(f"{path.name}: expected a JSON object")
    return spec_from_record(rec, path.name)


def save_synth_spec(spec: SynthSpec, path) -> None:
    import json
    from pathlib import Path

    Path(path).write_text(json.dumps(spec_to_record(spec), indent=2) + "\n",
                          encoding="utf-8")


def ambiguity_pair(spec: SynthSpec):
    """Two single-frame scenes with identical observations whose ground
    truths differ by doubling scale and depth along the viewing ray.

    Returns ((scene_a, gt_a), (scene_b, gt_b)); observation records are
    identical component for component.
    """
    if spec.trajectory.n_frames != 1:
        raise InfeasibleSpecError("ambiguity_pair needs a single-frame spec")
    base = replace(spec, noise=NoiseSpec())
    scene_a, gt_a = generate(base)
    frame = scene_a.frames[0]
    origin = frame.camera_center()
    gt_b = []
    for g in gt_a:
        offset = g.pose.t - origin
        if float(np.linalg.norm(offset)) == 0.0:
            raise InfeasibleSpecError("object center coincides with the camera")
        doubled = Pose9DoF(origin + 2.0 * offset, g.pose.rotation, 2.0 * g.pose.s)
        gt_b.append(GroundTruthObject(g.class_id, g.cad_model_id, doubled))
    scene_b = SceneInput(scene_a.frames, scene_a.observations, scene_a.cad_db)
    return (scene_a, gt_a), (scene_b, gt_b)

"""Per-frame objective terms, their analytic gradients, and the weighted total.

Terms (all per frame i, summed over frames):
- center:       L1 distance between the auxiliary image point kappa and the
                predicted 2D center.
- translation:  L1 distance between the world point constructed from
                (kappa, beta) and the object center t.
- rotation:     Frobenius distance between the predicted camera-space
                rotation and E_R * R, minimized over the object's vertical
                symmetry orbit.
- scale_box:    L1 distance between the four sides of the projected-vertex
                box and the predicted amodal box.
- scale_rec:    L1 distance between the object scale s and the per-frame
                scale prediction.

Gradients are subgradients at L1 kinks (0 at exact zero residual) and follow
the achieving branch at min/max switches. Quaternion gradients are taken with
respect to the raw 4 components; the solver projects back onto the unit
sphere after each step.

`total_objective` is the readable reference path; `StackedObjective`
evaluates the identical sum vectorized over frames and is what the solver
calls. Equality of the two is covered by tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import CadModel, Observation, SceneInput
from .errors import (
    AllVerticesBehindCameraError,
    MissingScalePredictionError,
    ValidationError,
)
from .geometry import (
    CONTINUOUS_SYMMETRY_ORDER,
    CameraFrame,
    Pose9DoF,
    as_finite_array,
    best_symmetry_angle,
    quat_to_matrix,
    quat_to_matrix_jacobian,
    rot_z,
)

# Vertices at or behind this camera depth do not constrain the projected box.
BOX_MIN_DEPTH = 0.1
# Below this many usable vertices the box is considered undefined.
MIN_BOX_VERTICES = 3
# Models above this vertex count are reduced to their convex hull (the
# projected box depends only on hull vertices).
MAX_BOX_VERTICES = 512


@dataclass(frozen=True)
class ObjectiveWeights:
    """Coefficients of the weighted total objective.

    Defaults are the published configuration (a_t=20, a_kappa=3, a_R=0.1,
    a_s_box=3); a_s_rec has no published value and defaults to the other
    scale weight.
    """

    a_t: float = 20.0
    a_kappa: float = 3.0
    a_R: float = 0.1
    a_s_box: float = 3.0
    a_s_rec: float = 3.0

    def __post_init__(self):
        for name in ("a_t", "a_kappa", "a_R", "a_s_box", "a_s_rec"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValidationError(f"{name}: must be finite and >= 0")

    def require_solvable(self) -> None:
        """The solver needs at least one center-constraining weight."""
        if self.a_t <= 0.0 and self.a_kappa <= 0.0:
            raise ValidationError("weights: at least one of a_t, a_kappa must be > 0")


@dataclass(frozen=True, eq=False)
class AuxPerFrame:
    """Auxiliary variables for one frame: image-space center and depth.

    The depth hard constraint (beta > 0.1 m) is enforced by the solver's
    projection step, not here.
    """

    kappa: np.ndarray
    beta: float

    def __post_init__(self):
        kappa = as_finite_array(self.kappa, (2,), "kappa")
        beta = float(self.beta)
        if not math.isfinite(beta):
            raise ValidationError("beta: non-finite")
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True, eq=False)
class ObjectVariables:
    """Everything optimized for one object: pose plus per-frame auxiliaries."""

    pose: Pose9DoF
    aux: dict[int, AuxPerFrame] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Variable layout: [t(3), q(4), s(3), kappa(2F), beta(F)]
# ---------------------------------------------------------------------------

class VariableLayout:
    """Flat packing of ObjectVariables; frames sorted by frame index."""

    T = slice(0, 3)
    Q = slice(3, 7)
    S = slice(7, 10)
    POSE_SIZE = 10

    def __init__(self, frame_indices):
        self.frame_indices = tuple(sorted(set(int(i) for i in frame_indices)))
        self._pos = {fi: k for k, fi in enumerate(self.frame_indices)}

    @classmethod
    def for_observations(cls, observations) -> "VariableLayout":
        return cls(obs.frame_index for obs in observations)

    @property
    def n_frames(self) -> int:
        return len(self.frame_indices)

    @property
    def size(self) -> int:
        return self.POSE_SIZE + 3 * self.n_frames

    def frame_pos(self, frame_index: int) -> int:
        return self._pos[frame_index]

    def kappa_block(self, x: np.ndarray) -> np.ndarray:
        F = self.n_frames
        return x[self.POSE_SIZE:self.POSE_SIZE + 2 * F].reshape(F, 2)

    def beta_block(self, x: np.ndarray) -> np.ndarray:
        F = self.n_frames
        return x[self.POSE_SIZE + 2 * F:self.POSE_SIZE + 3 * F]

    def pack(self, variables: ObjectVariables) -> np.ndarray:
        x = np.zeros(self.size)
        x[self.T] = variables.pose.t
        x[self.Q] = variables.pose.rotation
        x[self.S] = variables.pose.s
        kappas = self.kappa_block(x)
        betas = self.beta_block(x)
        for fi in self.frame_indices:
            if fi not in variables.aux:
                raise ValidationError(f"aux: missing frame {fi}")
            k = self._pos[fi]
            kappas[k] = variables.aux[fi].kappa
            betas[k] = variables.aux[fi].beta
        return x

    def unpack(self, x: np.ndarray) -> ObjectVariables:
        pose = Pose9DoF(x[self.T], x[self.Q], x[self.S])
        kappas = self.kappa_block(x)
        betas = self.beta_block(x)
        aux = {fi: AuxPerFrame(kappas[k], float(betas[k]))
               for fi, k in zip(self.frame_indices, range(self.n_frames))}
        return ObjectVariables(pose, aux)


# ---------------------------------------------------------------------------
# Individual terms (reference implementations, one frame at a time)
# ---------------------------------------------------------------------------

def center_term(obs: Observation, aux: AuxPerFrame):
    """L1 distance between kappa and the predicted 2D center."""
    r = aux.kappa - obs.center2d
    return float(np.sum(np.abs(r))), {"kappa": np.sign(r)}


def _world_ray_basis(frame: CameraFrame) -> np.ndarray:
    """Columns a1, a2, a3 of E_R^T K^-1: the constructed center is
    camera_center + beta * (kappa_x a1 + kappa_y a2 + a3)."""
    K_inv = np.array([
        [1.0 / frame.fx, 0.0, -frame.cx / frame.fx],
        [0.0, 1.0 / frame.fy, -frame.cy / frame.fy],
        [0.0, 0.0, 1.0],
    ])
    return frame.E_R.T @ K_inv


def translation_term(frame: CameraFrame, aux: AuxPerFrame, t):
    """L1 distance between the world point built from (kappa, beta) and t."""
    t = np.asarray(t, dtype=float)
    A = _world_ray_basis(frame)
    d = A[:, 0] * aux.kappa[0] + A[:, 1] * aux.kappa[1] + A[:, 2]
    X = aux.beta * d + frame.camera_center()
    r = X - t
    sgn = np.sign(r)
    grads = {
        "t": -sgn,
        "kappa": np.array([aux.beta * float(sgn @ A[:, 0]),
                           aux.beta * float(sgn @ A[:, 1])]),
        "beta": float(sgn @ d),
    }
    return float(np.sum(np.abs(r))), grads


def _rotation_term_raw(E_R: np.ndarray, R_obs: np.ndarray, q: np.ndarray,
                       symmetry_order: int):
    R = quat_to_matrix(q)
    B = E_R @ R
    if symmetry_order > 1:
        theta = best_symmetry_angle(B.T @ R_obs, symmetry_order)
        C = rot_z(theta)
    else:
        C = np.eye(3)
    D = R_obs - B @ C
    val = float(np.linalg.norm(D))
    if val == 0.0:
        return val, np.zeros(4)
    G = E_R.T @ D @ C.T
    J = quat_to_matrix_jacobian(q)
    return val, -np.einsum("jab,ab->j", J, G) / val


def rotation_term(frame: CameraFrame, obs: Observation, rotation,
                  symmetry_order: int = 1):
    """Frobenius distance between the predicted camera-space rotation and
    E_R * R, minimized over the vertical symmetry orbit."""
    q = np.asarray(rotation, dtype=float)
    val, g = _rotation_term_raw(frame.E_R, obs.rotation_pred_matrix, q,
                                symmetry_order)
    return val, {"q": g}


def hull_subsample(vertices, max_vertices: int = MAX_BOX_VERTICES) -> np.ndarray:
    """Reduce dense models to their convex hull (box extremes are unchanged)."""
    verts = np.asarray(vertices, dtype=float)
    if len(verts) <= max_vertices:
        return verts
    from scipy.spatial import ConvexHull

    keep = np.array(sorted(set(ConvexHull(verts).vertices.tolist())))
    return verts[keep]


def projected_vertex_box(frame: CameraFrame, t, q, s, vertices,
                         min_depth: float = BOX_MIN_DEPTH):
    """Project posed vertices and take the axis-aligned pixel box.

    Vertices at camera depth <= min_depth are excluded; fewer than
    MIN_BOX_VERTICES remaining raises AllVerticesBehindCameraError. The box
    is amodal (never clipped to image bounds). Returns (sides, arg_indices,
    cam_points) with sides ordered (left, top, right, bottom) and
    arg_indices the extremal vertex index per side.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    verts = np.asarray(vertices, dtype=float)
    R = quat_to_matrix(q)
    world = t + (s * verts) @ R.T
    cam = world @ frame.E_R.T + frame.e_t
    z = cam[:, 2]
    valid = z > min_depth
    if int(valid.sum()) < MIN_BOX_VERTICES:
        raise AllVerticesBehindCameraError(
            f"frame {frame.frame_index}: {int(valid.sum())} vertices in front "
            f"of the {min_depth} m plane")
    with np.errstate(divide="ignore", invalid="ignore"):
        u = frame.fx * cam[:, 0] / z + frame.cx
        v = frame.fy * cam[:, 1] / z + frame.cy
    u_lo = np.where(valid, u, np.inf)
    u_hi = np.where(valid, u, -np.inf)
    v_lo = np.where(valid, v, np.inf)
    v_hi = np.where(valid, v, -np.inf)
    args = np.array([np.argmin(u_lo), np.argmin(v_lo),
                     np.argmax(u_hi), np.argmax(v_hi)])
    sides = np.array([u_lo[args[0]], v_lo[args[1]], u_hi[args[2]], v_hi[args[3]]])
    return sides, args, cam


def _box_term_raw(frame: CameraFrame, box_target: np.ndarray, t, q, s, vertices):
    """Box term value and gradients w.r.t. (t, raw q, s)."""
    t = np.asarray(t, dtype=float)
    q = np.asarray(q, dtype=float)
    s = np.asarray(s, dtype=float)
    verts = np.asarray(vertices, dtype=float)
    sides, args, cam = projected_vertex_box(frame, t, q, s, verts)
    # sides/box_target order: (left, top, right, bottom)
    target = np.array([box_target[0], box_target[1], box_target[2], box_target[3]])
    resid = sides - target
    value = float(np.sum(np.abs(resid)))
    sgn = np.sign(resid)

    R = quat_to_matrix(q)
    J = quat_to_matrix_jacobian(q)
    ER_R = frame.E_R @ R
    g_t = np.zeros(3)
    g_q = np.zeros(4)
    g_s = np.zeros(3)
    for side in range(4):
        if sgn[side] == 0.0:
            continue
        k = args[side]
        p = cam[k]
        vk = verts[k]
        svk = s * vk
        zk = p[2]
        if side in (0, 2):  # left/right: u coordinate
            dc_dp = np.array([frame.fx / zk, 0.0, -frame.fx * p[0] / zk ** 2])
        else:  # top/bottom: v coordinate
            dc_dp = np.array([0.0, frame.fy / zk, -frame.fy * p[1] / zk ** 2])
        g_t += sgn[side] * (dc_dp @ frame.E_R)
        g_s += sgn[side] * ((dc_dp @ ER_R) * vk)
        g_q += sgn[side] * np.einsum("a,jab,b->j", dc_dp @ frame.E_R, J, svk)
    return value, g_t, g_q, g_s


def scale_box_term(frame: CameraFrame, obs: Observation, pose: Pose9DoF, vertices):
    """L1 distance between the projected-vertex box sides and the amodal box."""
    value, g_t, g_q, g_s = _box_term_raw(frame, obs.box, pose.t, pose.rotation,
                                         pose.s, vertices)
    return value, {"t": g_t, "q": g_q, "s": g_s}


def scale_rec_term(obs: Observation, s):
    """L1 distance between the object scale and the per-frame prediction."""
    if obs.scale_pred is None:
        raise MissingScalePredictionError(
            f"frame {obs.frame_index}: observation has no scale prediction")
    s = np.asarray(s, dtype=float)
    r = s - obs.scale_pred
    return float(np.sum(np.abs(r))), {"s": np.sign(r)}


# ---------------------------------------------------------------------------
# Weighted total (reference path)
# ---------------------------------------------------------------------------

def total_objective(scene: SceneInput, observations, variables: ObjectVariables,
                    weights: ObjectiveWeights, vertices, symmetry_order: int = 1):
    """Weighted sum of all terms over the object's observations.

    Returns (value, gradient) with the gradient packed per VariableLayout.
    Zero-weight terms are skipped entirely. Frames whose projected box is
    undefined contribute every term except the box term.
    """
    layout = VariableLayout.for_observations(observations)
    frames = scene.frames_by_index()
    x_grad = np.zeros(layout.size)
    kappas_g = layout.kappa_block(x_grad)
    betas_g = layout.beta_block(x_grad)
    value = 0.0
    t = variables.pose.t
    q = variables.pose.rotation
    s = variables.pose.s
    for obs in observations:
        if obs.frame_index not in variables.aux:
            raise ValidationError(f"aux: missing frame {obs.frame_index}")
        aux = variables.aux[obs.frame_index]
        frame = frames[obs.frame_index]
        k = layout.frame_pos(obs.frame_index)
        if weights.a_kappa > 0.0:
            v, g = center_term(obs, aux)
            value += weights.a_kappa * v
            kappas_g[k] += weights.a_kappa * g["kappa"]
        if weights.a_t > 0.0:
            v, g = translation_term(frame, aux, t)
            value += weights.a_t * v
            x_grad[layout.T] += weights.a_t * g["t"]
            kappas_g[k] += weights.a_t * g["kappa"]
            betas_g[k] += weights.a_t * g["beta"]
        if weights.a_R > 0.0:
            v, g = rotation_term(frame, obs, q, symmetry_order)
            value += weights.a_R * v
            x_grad[layout.Q] += weights.a_R * g["q"]
        if weights.a_s_box > 0.0:
            try:
                v, g_t, g_q, g_s = _box_term_raw(frame, obs.box, t, q, s, vertices)
            except AllVerticesBehindCameraError:
                pass
            else:
                value += weights.a_s_box * v
                x_grad[layout.T] += weights.a_s_box * g_t
                x_grad[layout.Q] += weights.a_s_box * g_q
                x_grad[layout.S] += weights.a_s_box * g_s
        if weights.a_s_rec > 0.0:
            v, g = scale_rec_term(obs, s)
            value += weights.a_s_rec * v
            x_grad[layout.S] += weights.a_s_rec * g["s"]
    return value, x_grad


# ---------------------------------------------------------------------------
# Vectorized evaluator (what the solver calls)
# ---------------------------------------------------------------------------

def _abs_and_sign(r: np.ndarray, eps: float):
    """|r| and its (sub)gradient; pseudo-Huber smoothed when eps > 0.

    The smoothed form sqrt(r^2 + eps^2) - eps is exact at r = 0, within eps
    of |r| everywhere, and has gradient r / sqrt(r^2 + eps^2).
    """
    if eps == 0.0:
        return np.abs(r), np.sign(r)
    root = np.sqrt(r * r + eps * eps)
    return root - eps, r / root


class StackedObjective:
    """Same sum as total_objective, evaluated over stacked frame arrays.

    With smoothing > 0 every L1 component and the per-frame Frobenius norm
    are pseudo-Huber smoothed (solver-internal: keeps near-zero residuals
    from dominating the shared line-search step). smoothing = 0 reproduces
    total_objective exactly.
    """

    def __init__(self, frames_by_index, observations, weights: ObjectiveWeights,
                 vertices, symmetry_order: int = 1, smoothing: float = 0.0):
        observations = list(observations)
        if not observations:
            raise ValidationError("observations: empty")
        self.weights = weights
        self.smoothing = float(smoothing)
        self.symmetry_order = int(symmetry_order)
        self.layout = VariableLayout.for_observations(observations)
        self.verts = np.asarray(vertices, dtype=float)
        if weights.a_s_rec > 0.0:
            for obs in observations:
                if obs.scale_pred is None:
                    raise MissingScalePredictionError(
                        f"frame {obs.frame_index}: observation has no scale "
                        "prediction but a_s_rec > 0")

        N = len(observations)
        self.n_observations = N
        self.obs_pos = np.array([self.layout.frame_pos(o.frame_index)
                                 for o in observations])
        frames = [frames_by_index[o.frame_index] for o in observations]
        self.E_R = np.stack([f.E_R for f in frames])
        self.e_t = np.stack([f.e_t for f in frames])
        self.cam_center = np.stack([f.camera_center() for f in frames])
        self.A = np.stack([_world_ray_basis(f) for f in frames])
        self.fx = np.array([f.fx for f in frames])
        self.fy = np.array([f.fy for f in frames])
        self.cx = np.array([f.cx for f in frames])
        self.cy = np.array([f.cy for f in frames])
        self.c_hat = np.stack([o.center2d for o in observations])
        self.box_target = np.stack(
            [np.array([o.box[0], o.box[1], o.box[2], o.box[3]]) for o in observations])
        self.R_obs = np.stack([o.rotation_pred_matrix for o in observations])
        if weights.a_s_rec > 0.0:
            self.s_pred = np.stack([o.scale_pred for o in observations])
        else:
            self.s_pred = None
        if self.symmetry_order > 1 and self.symmetry_order < CONTINUOUS_SYMMETRY_ORDER:
            self._sym_angles = 2.0 * math.pi * np.arange(self.symmetry_order) / self.symmetry_order
        else:
            self._sym_angles = None

    # -- pieces ------------------------------------------------------------

    def _gather_aux(self, x):
        kappas = self.layout.kappa_block(x)[self.obs_pos]
        betas = self.layout.beta_block(x)[self.obs_pos]
        return kappas, betas

    def _constructed_centers(self, kappas, betas):
        d = (self.A[:, :, 0] * kappas[:, 0:1] + self.A[:, :, 1] * kappas[:, 1:2]
             + self.A[:, :, 2])
        return betas[:, None] * d + self.cam_center, d

    def _symmetry_C(self, B):
        """Per-frame symmetry rotation minimizing the Frobenius distance."""
        M = np.einsum("nba,nbc->nac", B, self.R_obs)
        a = M[:, 0, 0] + M[:, 1, 1]
        b = M[:, 1, 0] - M[:, 0, 1]
        if self._sym_angles is not None:
            traces = a[:, None] * np.cos(self._sym_angles) + b[:, None] * np.sin(self._sym_angles)
            theta = self._sym_angles[np.argmax(traces, axis=1)]
        else:
            theta = np.where((a == 0.0) & (b == 0.0), 0.0, np.arctan2(b, a))
        c, s_ = np.cos(theta), np.sin(theta)
        C = np.zeros((len(theta), 3, 3))
        C[:, 0, 0] = c
        C[:, 0, 1] = -s_
        C[:, 1, 0] = s_
        C[:, 1, 1] = c
        C[:, 2, 2] = 1.0
        return C

    def _box_geometry(self, t, R, s):
        world = t + (s * self.verts) @ R.T
        cam = np.einsum("nab,vb->nva", self.E_R, world) + self.e_t[:, None, :]
        z = cam[..., 2]
        valid = z > BOX_MIN_DEPTH
        ok = valid.sum(axis=1) >= MIN_BOX_VERTICES
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx[:, None] * cam[..., 0] / z + self.cx[:, None]
            v = self.fy[:, None] * cam[..., 1] / z + self.cy[:, None]
        u_lo = np.where(valid, u, np.inf)
        v_lo = np.where(valid, v, np.inf)
        u_hi = np.where(valid, u, -np.inf)
        v_hi = np.where(valid, v, -np.inf)
        args = np.stack([np.argmin(u_lo, axis=1), np.argmin(v_lo, axis=1),
                         np.argmax(u_hi, axis=1), np.argmax(v_hi, axis=1)], axis=1)
        n = np.arange(len(args))
        sides = np.stack([u_lo[n, args[:, 0]], v_lo[n, args[:, 1]],
                          u_hi[n, args[:, 2]], v_hi[n, args[:, 3]]], axis=1)
        return sides, args, cam, ok

    # -- evaluation ---------------------------------------------------------

    def term_values(self, x) -> dict[str, float]:
        """Unweighted per-term totals at x (diagnostics for reports)."""
        w = self.weights
        t, q, s = x[self.layout.T], x[self.layout.Q], x[self.layout.S]
        kappas, betas = self._gather_aux(x)
        out = {}
        out["center"] = float(np.sum(np.abs(kappas - self.c_hat)))
        X, _ = self._constructed_centers(kappas, betas)
        out["translation"] = float(np.sum(np.abs(X - t)))
        R = quat_to_matrix(q)
        B = np.einsum("nab,bc->nac", self.E_R, R)
        C = self._symmetry_C(B) if self.symmetry_order > 1 else None
        D = self.R_obs - (B if C is None else np.einsum("nab,nbc->nac", B, C))
        out["rotation"] = float(np.sum(np.linalg.norm(D, axis=(1, 2))))
        sides, _, _, ok = self._box_geometry(t, R, s)
        resid = np.where(ok[:, None], sides - self.box_target, 0.0)
        out["scale_box"] = float(np.sum(np.abs(resid)))
        out["box_frames_skipped"] = float(np.sum(~ok))
        if self.s_pred is not None:
            out["scale_rec"] = float(np.sum(np.abs(s - self.s_pred)))
        else:
            out["scale_rec"] = 0.0
        return out

    def value(self, x) -> float:
        return self._evaluate(x, need_grad=False)[0]

    def value_and_grad(self, x):
        return self._evaluate(x, need_grad=True)

    def _evaluate(self, x, need_grad: bool):
        w = self.weights
        eps = self.smoothing
        layout = self.layout
        t, q, s = x[layout.T], x[layout.Q], x[layout.S]
        kappas, betas = self._gather_aux(x)
        value = 0.0
        grad = np.zeros(layout.size) if need_grad else None
        if need_grad:
            kappas_g = layout.kappa_block(grad)
            betas_g = layout.beta_block(grad)

        if w.a_kappa > 0.0:
            av, sg = _abs_and_sign(kappas - self.c_hat, eps)
            value += w.a_kappa * float(np.sum(av))
            if need_grad:
                np.add.at(kappas_g, self.obs_pos, w.a_kappa * sg)

        if w.a_t > 0.0:
            X, d = self._constructed_centers(kappas, betas)
            av, sgn = _abs_and_sign(X - t, eps)
            value += w.a_t * float(np.sum(av))
            if need_grad:
                grad[layout.T] += -w.a_t * sgn.sum(axis=0)
                g_beta = w.a_t * np.einsum("na,na->n", sgn, d)
                g_kx = w.a_t * betas * np.einsum("na,na->n", sgn, self.A[:, :, 0])
                g_ky = w.a_t * betas * np.einsum("na,na->n", sgn, self.A[:, :, 1])
                np.add.at(betas_g, self.obs_pos, g_beta)
                np.add.at(kappas_g, self.obs_pos, np.stack([g_kx, g_ky], axis=1))

        R = quat_to_matrix(q) if (w.a_R > 0.0 or w.a_s_box > 0.0) else None
        J = quat_to_matrix_jacobian(q) if need_grad and R is not None else None

        if w.a_R > 0.0:
            B = np.einsum("nab,bc->nac", self.E_R, R)
            if self.symmetry_order > 1:
                C = self._symmetry_C(B)
                BC = np.einsum("nab,nbc->nac", B, C)
            else:
                C = None
                BC = B
            D = self.R_obs - BC
            norms = np.linalg.norm(D, axis=(1, 2))
            if eps > 0.0:
                roots = np.sqrt(norms * norms + eps * eps)
                value += w.a_R * float(np.sum(roots - eps))
            else:
                roots = norms
                value += w.a_R * float(np.sum(norms))
            if need_grad:
                nz = roots > 0.0
                if np.any(nz):
                    ED = np.einsum("nba,nbc->nac", self.E_R[nz], D[nz])
                    if C is not None:
                        G = np.einsum("nab,ncb->nac", ED, C[nz])
                    else:
                        G = ED
                    contrib = -np.einsum("jab,nab->nj", J, G) / roots[nz][:, None]
                    grad[layout.Q] += w.a_R * contrib.sum(axis=0)

        if w.a_s_box > 0.0:
            sides, args, cam, ok = self._box_geometry(t, R, s)
            resid = sides - self.box_target
            resid = np.where(ok[:, None], resid, 0.0)
            av, sgn = _abs_and_sign(resid, eps)
            value += w.a_s_box * float(np.sum(np.where(ok[:, None], av, 0.0)))
            if need_grad and np.any(ok):
                ER_R = np.einsum("nab,bc->nac", self.E_R, R)
                n_idx = np.arange(self.n_observations)
                sv = s * self.verts
                for side in range(4):
                    act = ok & (sgn[:, side] != 0.0)
                    if not np.any(act):
                        continue
                    k = args[act, side]
                    p = cam[n_idx[act], k]
                    vk = self.verts[k]
                    svk = sv[k]
                    z = p[:, 2]
                    dc_dp = np.zeros((len(z), 3))
                    if side in (0, 2):
                        dc_dp[:, 0] = self.fx[act] / z
                        dc_dp[:, 2] = -self.fx[act] * p[:, 0] / z ** 2
                    else:
                        dc_dp[:, 1] = self.fy[act] / z
                        dc_dp[:, 2] = -self.fy[act] * p[:, 1] / z ** 2
                    wgt = w.a_s_box * sgn[act, side]
                    dw = np.einsum("na,nab->nb", dc_dp, self.E_R[act])
                    grad[layout.T] += np.einsum("n,nb->b", wgt, dw)
                    ds = np.einsum("na,nac->nc", dc_dp, ER_R[act]) * vk
                    grad[layout.S] += np.einsum("n,nc->c", wgt, ds)
                    dq = np.einsum("nb,jbc,nc->nj", dw, J, svk)
                    grad[layout.Q] += np.einsum("n,nj->j", wgt, dq)

        if w.a_s_rec > 0.0 and self.s_pred is not None:
            av, sg = _abs_and_sign(s - self.s_pred, eps)
            value += w.a_s_rec * float(np.sum(av))
            if need_grad:
                grad[layout.S] += w.a_s_rec * sg.sum(axis=0)

        return value, grad


def model_solve_inputs(model: CadModel):
    """Hull-reduced vertices and effective symmetry order for solving."""
    return hull_subsample(model.vertices), model.effective_symmetry_order

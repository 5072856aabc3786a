"""Constrained first-order minimization of the multi-view objective.

Block-cyclic projected gradient descent with backtracking line search.
Each iteration cycles over the variable blocks (t, quaternion, log-scale,
kappa, beta); for each block it takes a step along that block's
(sub)gradient, halving the block's step scale until the objective strictly
decreases, then projects back onto the feasible set (unit quaternion,
per-frame depth >= beta_min). Scale is optimized in log space, which keeps
all scale components positive.

Per-block line searches matter here: the blocks mix units (meters for t and
beta, pixels for kappa, unitless quaternion and log-scale) and the L1 terms
give each block a gradient magnitude set by its weight and frame count, not
by its distance from the optimum. A single shared step scale lets nearly
converged blocks veto the large steps that far-from-converged blocks still
need, which stalls the solve; separate per-block scales (each growing after
accepted steps and shrinking otherwise) self-anneal independently. Block
gradients are additionally scaled by their initial RMS so the configured
rates act in each block's natural units, and the L1 kinks are pseudo-Huber
smoothed inside the solver so settled residuals release the line search.

Accepted steps are strictly decreasing in objective value by construction.
Variables are packed per objective.VariableLayout; the solver state carries
log-scale in the S slot and converts before evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import Observation, SceneInput
from .errors import (
    AllVerticesBehindCameraError,
    DivergentDepthError,
    NoObservationsError,
    NonFiniteObjectiveError,
    ValidationError,
)
from .geometry import (
    CameraFrame,
    Pose9DoF,
    backproject,
    camera_ray_direction,
    quat_from_matrix,
    quat_identity,
)
from .objective import (
    AuxPerFrame,
    ObjectiveWeights,
    ObjectVariables,
    StackedObjective,
    VariableLayout,
    projected_vertex_box,
)

LOG_SCALE_LIMIT = 7.0  # |log s| clamp, keeps scale within ~[1e-3, 1e3]


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 2000
    learning_rate: float = 1.0        # initial global step scale
    lr_decay: float = 1.0             # per-iteration multiplier on the step cap
    convergence_tol: float = 1e-7     # min objective decrease over the window
    convergence_rel_tol: float = 1e-5  # ... or this fraction of the current value
    convergence_window: int = 10
    beta_min: float = 0.1             # hard constraint on per-frame depth (m)
    lr_translation: float = 1e-2      # block rate for t and beta (meters)
    lr_rotation: float = 1e-3         # block rate for the quaternion
    lr_scale: float = 1e-2            # block rate for log-scale
    kappa_pixel_scale: float = 100.0  # px per meter: kappa rate = lr_translation * this
    smoothing: float = 1e-6           # pseudo-Huber width inside the solver
    max_frames: int = 40              # observations per object (uniform subsample)
    max_halvings: int = 40
    step_growth: float = 2.0
    max_step_scale: float = 1e4
    init: str = "informed"  # "informed" or "published", see _initial_state
    init_beta: float = 1.0
    init_t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    init_s: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValidationError("max_iterations: must be >= 0")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate: must be > 0")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValidationError("lr_decay: must be in (0, 1]")
        if self.beta_min <= 0:
            raise ValidationError("beta_min: must be > 0")
        for name in ("lr_translation", "lr_rotation", "lr_scale"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name}: must be > 0")
        if self.max_frames < 1:
            raise ValidationError("max_frames: must be >= 1")
        if self.smoothing < 0:
            raise ValidationError("smoothing: must be >= 0")
        if self.init not in ("informed", "published"):
            raise ValidationError("init: expected informed or published")


@dataclass(frozen=True)
class SolveReport:
    iterations_used: int
    final_objective: float
    per_term_residuals: dict[str, float] = field(default_factory=dict)
    converged: bool = False
    ill_conditioned: bool = False
    n_observations_used: int = 0


def report_to_record(r: SolveReport) -> dict:
    return {
        "iterations_used": r.iterations_used,
        "final_objective": r.final_objective,
        "per_term_residuals": dict(r.per_term_residuals),
        "converged": r.converged,
        "ill_conditioned": r.ill_conditioned,
        "n_observations_used": r.n_observations_used,
    }


def subsample_observations(observations, max_frames: int):
    """At most max_frames observations, uniformly spaced over the track."""
    obs = sorted(observations, key=lambda o: o.frame_index)
    if len(obs) <= max_frames:
        return obs
    idx = np.unique(np.round(np.linspace(0, len(obs) - 1, max_frames)).astype(int))
    return [obs[i] for i in idx]


def _block_slices(layout: VariableLayout):
    """(name, index array) per variable block, in cycle order."""
    F = layout.n_frames
    pose = layout.POSE_SIZE
    return (
        ("kappa", np.arange(pose, pose + 2 * F)),
        ("beta", np.arange(pose + 2 * F, pose + 3 * F)),
        ("t", np.arange(0, 3)),
        ("q", np.arange(3, 7)),
        ("s", np.arange(7, 10)),
    )


def _block_rates(layout: VariableLayout, g0: np.ndarray,
                 config: SolverConfig) -> dict[str, float]:
    """Per-block step scaling calibrated from the initial gradient.

    Each block's configured rate (in its natural units) is divided by the
    block's initial RMS gradient, so a unit step scale moves the block by
    roughly its rate regardless of frame count, weights, or pixel/meter
    unit mixing. A floor relative to the strongest block bounds the scaling
    of blocks that start with a near-zero gradient.
    """
    base = {
        "t": config.lr_translation,
        "q": config.lr_rotation,
        "s": config.lr_scale,
        "kappa": config.lr_translation * config.kappa_pixel_scale,
        "beta": config.lr_translation,
    }
    rms = {}
    for name, idx in _block_slices(layout):
        v = g0[idx]
        rms[name] = float(np.sqrt(np.mean(v * v))) if v.size else 0.0
    floor = 1e-3 * max(rms.values()) + 1e-12
    return {name: base[name] / max(rms[name], floor) for name in base}


def _project_state(z: np.ndarray, layout: VariableLayout, beta_min: float) -> np.ndarray:
    """Quaternion renormalization, depth clamping, log-scale clipping."""
    z = z.copy()
    q = z[layout.Q]
    n = float(np.linalg.norm(q))
    if n == 0.0 or not math.isfinite(n):
        raise NonFiniteObjectiveError("quaternion collapsed to zero norm")
    z[layout.Q] = q / n
    np.clip(z[layout.S], -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT, out=z[layout.S])
    betas = layout.beta_block(z)
    np.maximum(betas, beta_min, out=betas)
    return z


def _z_to_x(z: np.ndarray, layout: VariableLayout) -> np.ndarray:
    x = z.copy()
    x[layout.S] = np.exp(z[layout.S])
    return x


def _chordal_mean_rotation(frames_by_index, observations) -> np.ndarray:
    """Orthogonal projection of the mean per-frame world-rotation estimate
    (E_R^T R_i) onto SO(3)."""
    M = np.zeros((3, 3))
    for obs in observations:
        frame = frames_by_index[obs.frame_index]
        M += frame.E_R.T @ obs.rotation_pred_matrix
    U, _, Vt = np.linalg.svd(M)
    R = U @ np.diag([1.0, 1.0, float(np.linalg.det(U @ Vt))]) @ Vt
    return quat_from_matrix(R)


def _initial_state(layout: VariableLayout, frames_by_index, observations,
                   config: SolverConfig, vertices,
                   warm_start: ObjectVariables | None) -> np.ndarray:
    """Starting point of the solve.

    "published": t = 0, s = 1, identity rotation, kappa at the image center,
    beta = 1 m. "informed" (default): rotation at the chordal mean of the
    per-frame world-rotation estimates, kappa at the predicted centers, beta
    from a per-frame box-fit depth search, t at the median of the resulting
    backprojected centers, s at the mean scale prediction. The published
    init lets the pixel-scale box term drag the rotation into box-consistent
    local minima while translation and depth are still far off; the informed
    init starts inside the correct basin using only the observations.
    A warm start overrides either; its pose seeds aux values for new frames.
    """
    z = np.zeros(layout.size)
    kappas = layout.kappa_block(z)
    betas = layout.beta_block(z)

    if warm_start is not None:
        pose = warm_start.pose
        z[layout.T] = pose.t
        z[layout.Q] = pose.rotation
        z[layout.S] = np.log(pose.s)
        for k, fi in enumerate(layout.frame_indices):
            frame = frames_by_index[fi]
            aux = warm_start.aux.get(fi)
            if aux is not None:
                kappas[k] = aux.kappa
                betas[k] = max(aux.beta, config.beta_min)
                continue
            # Seed new frames from the warm pose when it sits in front of
            # the camera; fall back to the cold default otherwise.
            p_cam = frame.e_t + frame.E_R @ z[layout.T]
            if p_cam[2] > config.beta_min:
                kappas[k] = [frame.fx * p_cam[0] / p_cam[2] + frame.cx,
                             frame.fy * p_cam[1] / p_cam[2] + frame.cy]
                betas[k] = p_cam[2]
            else:
                kappas[k] = [frame.width / 2.0, frame.height / 2.0]
                betas[k] = config.init_beta
        return z

    if config.init == "published":
        z[layout.T] = config.init_t
        z[layout.Q] = quat_identity()
        z[layout.S] = np.log(np.asarray(config.init_s, dtype=float))
        for k, fi in enumerate(layout.frame_indices):
            frame = frames_by_index[fi]
            kappas[k] = [frame.width / 2.0, frame.height / 2.0]
            betas[k] = config.init_beta
        return z

    q0 = _chordal_mean_rotation(frames_by_index, observations)
    z[layout.Q] = q0
    preds = [o.scale_pred for o in observations if o.scale_pred is not None]
    s0 = (np.mean(np.stack(preds), axis=0) if preds
          else np.asarray(config.init_s, dtype=float))
    z[layout.S] = np.log(s0)

    first_obs: dict[int, Observation] = {}
    for obs in observations:
        first_obs.setdefault(obs.frame_index, obs)
    centers3d = []
    for k, fi in enumerate(layout.frame_indices):
        frame = frames_by_index[fi]
        obs = first_obs[fi]
        kappas[k] = obs.center2d
        scale = obs.scale_pred if obs.scale_pred is not None else s0
        try:
            beta = derive_depth_single_frame(frame, obs, scale, q0, vertices,
                                             beta_min=config.beta_min,
                                             grid_size=48, tol=1e-4)
        except DivergentDepthError:
            beta = config.init_beta
        betas[k] = beta
        centers3d.append(backproject(frame, obs.center2d, beta))
    z[layout.T] = np.median(np.stack(centers3d), axis=0)
    return z


def _ill_conditioned(frames, t: np.ndarray, tol: float = 0.01) -> bool:
    """True when all camera centers lie within tol of a line through t."""
    centers = np.unique(np.stack([f.camera_center() for f in frames]), axis=0)
    rel = centers - t
    if len(rel) <= 1:
        return True
    _, _, vt = np.linalg.svd(rel, full_matrices=False)
    axis = vt[0]
    resid = rel - np.outer(rel @ axis, axis)
    return bool(np.max(np.linalg.norm(resid, axis=1)) <= tol)


def solve_object_variables(scene: SceneInput, observations,
                           weights: ObjectiveWeights, config: SolverConfig,
                           vertices, symmetry_order: int = 1,
                           warm_start: ObjectVariables | None = None,
                           on_iteration=None):
    """solve_object, additionally returning the final ObjectVariables
    (pose plus per-frame auxiliaries) for warm starting."""
    observations = list(observations)
    if not observations:
        raise NoObservationsError("no observations for this object")
    weights.require_solvable()
    obs_used = subsample_observations(observations, config.max_frames)
    frames_by_index = scene.frames_by_index()
    fun = StackedObjective(frames_by_index, obs_used, weights, vertices,
                           symmetry_order, smoothing=config.smoothing)
    layout = fun.layout

    z = _project_state(
        _initial_state(layout, frames_by_index, obs_used, config, vertices,
                       warm_start),
        layout, config.beta_min)
    x = _z_to_x(z, layout)
    f, g = fun.value_and_grad(x)
    if not math.isfinite(f):
        raise NonFiniteObjectiveError(f"objective {f} at initialization")

    def chain(g_x):
        # chain rule for log-scale: dL/du = dL/ds * s
        g_z = g_x.copy()
        g_z[layout.S] *= x[layout.S]
        return g_z

    g = chain(g)
    if not np.all(np.isfinite(g)):
        raise NonFiniteObjectiveError("non-finite gradient at initialization")
    blocks = _block_slices(layout)
    rates = _block_rates(layout, g, config)
    alphas = {name: config.learning_rate for name, _ in blocks}
    alpha_cap = config.max_step_scale
    history = [f]
    iterations_used = 0
    converged = False

    for it in range(1, config.max_iterations + 1):
        alpha_cap *= config.lr_decay
        any_accepted = False
        for bi, (name, idx) in enumerate(blocks):
            if bi > 0:
                _, g = fun.value_and_grad(x)
                g = chain(g)
                if not np.all(np.isfinite(g)):
                    raise NonFiniteObjectiveError("non-finite gradient")
            d = rates[name] * g[idx]
            if not np.any(d):
                continue
            a = min(alphas[name], alpha_cap)
            accepted = False
            for _ in range(config.max_halvings + 1):
                z_try = z.copy()
                z_try[idx] -= a * d
                z_try = _project_state(z_try, layout, config.beta_min)
                x_try = _z_to_x(z_try, layout)
                f_try = fun.value(x_try)
                if math.isfinite(f_try) and f_try < f:
                    accepted = True
                    break
                a *= 0.5
            if accepted:
                z, x, f = z_try, x_try, f_try
                alphas[name] = min(a * config.step_growth, alpha_cap)
                any_accepted = True
            else:
                alphas[name] = max(a, 1e-12)
        iterations_used = it
        if on_iteration is not None:
            on_iteration(it, x, layout, f)
        history.append(f)
        if not any_accepted:
            converged = True
            break
        if len(history) > config.convergence_window:
            window_tol = max(config.convergence_tol, config.convergence_rel_tol * f)
            if history[-1 - config.convergence_window] - f < window_tol:
                converged = True
                break
        _, g = fun.value_and_grad(x)
        g = chain(g)

    variables = layout.unpack(x)
    terms = fun.term_values(x)
    final_objective = (weights.a_kappa * terms["center"]
                       + weights.a_t * terms["translation"]
                       + weights.a_R * terms["rotation"]
                       + weights.a_s_box * terms["scale_box"]
                       + weights.a_s_rec * terms["scale_rec"])
    report = SolveReport(
        iterations_used=iterations_used,
        final_objective=final_objective,
        per_term_residuals=terms,
        converged=converged,
        ill_conditioned=_ill_conditioned(
            [frames_by_index[fi] for fi in layout.frame_indices], x[layout.T]),
        n_observations_used=len(obs_used),
    )
    return variables.pose, report, variables


def solve_object(scene: SceneInput, observations, weights: ObjectiveWeights,
                 config: SolverConfig, vertices, symmetry_order: int = 1,
                 warm_start: ObjectVariables | None = None, on_iteration=None):
    """Minimize the weighted objective for one object.

    Returns (Pose9DoF, SolveReport). `on_iteration(iteration, x, layout,
    objective)` is called after every accepted step with the projected state
    (scale already exponentiated), for instrumentation.
    """
    pose, report, _ = solve_object_variables(
        scene, observations, weights, config, vertices, symmetry_order,
        warm_start, on_iteration)
    return pose, report


# ---------------------------------------------------------------------------
# Single-frame depth derivation
# ---------------------------------------------------------------------------

def derive_depth_single_frame(frame: CameraFrame, obs: Observation, scale,
                              rotation, vertices, beta_min: float = 0.1,
                              beta_max: float = 100.0, grid_size: int = 128,
                              tol: float = 1e-8) -> float:
    """Depth along the ray through the predicted 2D center minimizing the
    projected-box distance to the predicted amodal box.

    `rotation` is the world rotation of the object (quaternion). Raises
    DivergentDepthError when no interior depth beats both interval ends.
    """
    scale = np.asarray(scale, dtype=float)
    rotation = np.asarray(rotation, dtype=float)
    origin = frame.camera_center()
    direction = camera_ray_direction(frame, obs.center2d)
    target = np.array([obs.box[0], obs.box[1], obs.box[2], obs.box[3]])

    def cost(beta: float) -> float:
        t = origin + beta * direction
        try:
            sides, _, _ = projected_vertex_box(frame, t, rotation, scale, vertices)
        except AllVerticesBehindCameraError:
            return math.inf
        return float(np.sum(np.abs(sides - target)))

    grid = np.geomspace(beta_min, beta_max, grid_size)
    values = np.array([cost(b) for b in grid])
    i = int(np.argmin(values))
    if i == 0 or i == len(grid) - 1 or not (values[i] < values[0]
                                            and values[i] < values[-1]):
        raise DivergentDepthError(
            "no interior depth improves on the interval ends")

    # Golden-section refinement inside the bracketing cells.
    lo, hi = grid[i - 1], grid[i + 1]
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    b1 = hi - inv_phi * (hi - lo)
    b2 = lo + inv_phi * (hi - lo)
    f1, f2 = cost(b1), cost(b2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, b2, f2 = b2, b1, f1
            b1 = hi - inv_phi * (hi - lo)
            f1 = cost(b1)
        else:
            lo, b1, f1 = b1, b2, f2
            b2 = lo + inv_phi * (hi - lo)
            f2 = cost(b2)
    return max(0.5 * (lo + hi), beta_min)

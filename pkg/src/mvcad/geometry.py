"""Camera models, similarity transforms, quaternion algebra, and projection.

Conventions:
- Vectors are plain numpy arrays: 2-vectors in pixels, 3-vectors in meters.
- Quaternions are scalar-first ``(w, x, y, z)``, unit norm, stored with
  ``w >= 0`` (sign-canonical, removes the double cover).
- Pixel (0, 0) is the top-left corner of the top-left pixel; pixel centers
  sit at half-integer coordinates.
- The canonical model frame has +z as the object's up axis; vertical
  symmetry means rotation about canonical z.
- Scaling acts on canonical axes before rotation: ``p = t + R (s * v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepthError, ValidationError

# Symmetry orders at or above this value are treated as continuous rotation
# about the canonical up axis (e.g. round tables, cylinders).
CONTINUOUS_SYMMETRY_ORDER = 360


def as_finite_array(value, shape: tuple[int, ...], name: str) -> np.ndarray:
    """Copy to a float array of the given shape, rejecting non-finite values."""
    arr = np.array(value, dtype=float)
    if arr.shape != shape:
        raise ValidationError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite value")
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if n == 0.0 or not math.isfinite(n):
        raise ValidationError("quaternion: zero or non-finite norm")
    return q / n


def quat_canonical(q) -> np.ndarray:
    """Flip sign so w > 0 (or the first nonzero component if w == 0)."""
    q = np.asarray(q, dtype=float)
    for c in q:
        if c != 0.0:
            return -q if c < 0.0 else q.copy()
    raise ValidationError("quaternion: all components zero")


def quat_multiply(q1, q2) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conjugate(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([w, -x, -y, -z])


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = float(np.linalg.norm(axis))
    if n == 0.0:
        raise ValidationError("axis: zero vector")
    half = 0.5 * angle_rad
    return np.concatenate([[math.cos(half)], math.sin(half) * axis / n])


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (formula assumes |q| = 1)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R) -> np.ndarray:
    """Sign-canonical unit quaternion of an orthonormal matrix."""
    R = np.asarray(R, dtype=float)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / math.sqrt(trace + 1.0)
        q = np.array([0.25 / s,
                      (R[2, 1] - R[1, 2]) * s,
                      (R[0, 2] - R[2, 0]) * s,
                      (R[1, 0] - R[0, 1]) * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_canonical(quat_normalize(q))


def quat_to_matrix_jacobian(q) -> np.ndarray:
    """d(quat_to_matrix)/dq as a (4, 3, 3) stack, raw components (no
    normalization chain; the solver projects onto the sphere separately)."""
    w, x, y, z = q
    dw = 2.0 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=float)
    dx = 2.0 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=float)
    dy = 2.0 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=float)
    dz = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=float)
    return np.stack([dw, dx, dy, dz])


def geodesic_angle_deg(q1, q2) -> float:
    """Geodesic rotation angle between two unit quaternions, in [0, 180]."""
    d = abs(float(np.dot(np.asarray(q1, float), np.asarray(q2, float))))
    return math.degrees(2.0 * math.acos(min(1.0, d)))


def rot_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_rot_z(angle_rad: float) -> np.ndarray:
    return np.array([math.cos(0.5 * angle_rad), 0.0, 0.0, math.sin(0.5 * angle_rad)])


# ---------------------------------------------------------------------------
# Vertical symmetry about canonical z
# ---------------------------------------------------------------------------

def best_symmetry_angle(M: np.ndarray, order: int) -> float:
    """Angle theta of the symmetry orbit maximizing tr(Rz(theta)^T M).

    Shared by the rotation objective (Frobenius distance) and rotation-error
    metrics: for rotations A and B, both reduce to maximizing
    tr(Rz^T B^T A) over the orbit with M = B^T A.
    """
    a = M[0, 0] + M[1, 1]
    b = M[1, 0] - M[0, 1]
    if order >= CONTINUOUS_SYMMETRY_ORDER:
        if a == 0.0 and b == 0.0:
            return 0.0
        return math.atan2(b, a)
    angles = 2.0 * math.pi * np.arange(order) / order
    traces = a * np.cos(angles) + b * np.sin(angles)
    return float(angles[int(np.argmax(traces))])


def symmetry_min_angle_deg(q_a, q_b, order: int = 1) -> float:
    """Min geodesic angle between A and B composed with any canonical
    symmetry rotation Rz(2*pi*k/order) (continuous for large orders)."""
    if order <= 1:
        return geodesic_angle_deg(q_a, q_b)
    M = quat_to_matrix(q_b).T @ quat_to_matrix(q_a)
    theta = best_symmetry_angle(M, order)
    a = M[0, 0] + M[1, 1]
    b = M[1, 0] - M[0, 1]
    trace = math.cos(theta) * a + math.sin(theta) * b + M[2, 2]
    cos_angle = max(-1.0, min(1.0, 0.5 * (trace - 1.0)))
    return math.degrees(math.acos(cos_angle))


# ---------------------------------------------------------------------------
# Pose and camera types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose9DoF:
    """Canonical CAD space -> world: translation, rotation, anisotropic scale."""

    t: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z), w >= 0
    s: np.ndarray

    def __post_init__(self):
        t = as_finite_array(self.t, (3,), "t")
        q = np.array(self.rotation, dtype=float)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise ValidationError("rotation: expected a finite quaternion (w,x,y,z)")
        n = float(np.linalg.norm(q))
        if abs(n - 1.0) > 1e-6:
            raise ValidationError(f"rotation: quaternion norm {n} not within 1e-6 of 1")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        q = quat_canonical(q)
        q.setflags(write=False)
        s = as_finite_array(self.s, (3,), "s")
        if np.any(s <= 0.0):
            raise ValidationError("s: scale components must be > 0")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "s", s)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @staticmethod
    def identity() -> "Pose9DoF":
        return Pose9DoF(np.zeros(3), quat_identity(), np.ones(3))


@dataclass(frozen=True, eq=False)
class CameraFrame:
    """Per-frame intrinsics K (zero skew) and extrinsics [E_R | e_t]."""

    frame_index: int
    K: np.ndarray
    E_R: np.ndarray
    e_t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if not isinstance(self.frame_index, (int, np.integer)) or self.frame_index < 0:
            raise ValidationError("frame_index: expected a nonnegative integer")
        K = as_finite_array(self.K, (3, 3), "K")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValidationError("K: focal lengths must be positive")
        lower = [K[1, 0], K[2, 0], K[2, 1]]
        if any(v != 0.0 for v in lower):
            raise ValidationError("K: must be upper-triangular")
        if K[0, 1] != 0.0:
            raise ValidationError("K: nonzero skew is not supported")
        if abs(K[2, 2] - 1.0) > 1e-9:
            raise ValidationError("K: K[2,2] must be 1")
        E_R = as_finite_array(self.E_R, (3, 3), "E_R")
        if np.linalg.norm(E_R.T @ E_R - np.eye(3)) >= 1e-6:
            raise ValidationError("E_R: not orthonormal within 1e-6")
        e_t = as_finite_array(self.e_t, (3,), "e_t")
        if not (isinstance(self.width, (int, np.integer)) and self.width > 0
                and isinstance(self.height, (int, np.integer)) and self.height > 0):
            raise ValidationError("image size: width and height must be positive integers")
        object.__setattr__(self, "frame_index", int(self.frame_index))
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "E_R", E_R)
        object.__setattr__(self, "e_t", e_t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    def camera_center(self) -> np.ndarray:
        """World-space position of the camera (where depth is zero)."""
        return -self.E_R.T @ self.e_t


# ---------------------------------------------------------------------------
# Transform pipeline
# ---------------------------------------------------------------------------

def object_to_world(pose: Pose9DoF, v) -> np.ndarray:
    """Apply p = t + R (s * v); v may be a single vector or an (N, 3) array."""
    v = np.asarray(v, dtype=float)
    return pose.t + (pose.s * v) @ quat_to_matrix(pose.rotation).T


def world_to_camera(frame: CameraFrame, p_world) -> np.ndarray:
    """Camera-view coordinates e_t + E_R p (meters, z is depth)."""
    p_world = np.asarray(p_world, dtype=float)
    return frame.e_t + p_world @ frame.E_R.T


def project(frame: CameraFrame, p_camera) -> np.ndarray:
    """Perspective projection of a camera-space point to pixels."""
    p = np.asarray(p_camera, dtype=float)
    z = float(p[2])
    if z <= 0.0:
        raise NonPositiveDepthError(f"point at camera depth {z} <= 0")
    return np.array([frame.fx * p[0] / z + frame.cx,
                     frame.fy * p[1] / z + frame.cy])


def backproject(frame: CameraFrame, pixel, depth: float) -> np.ndarray:
    """World point projecting to `pixel` at camera depth `depth`.

    Exact right-inverse of project(world_to_camera(.)) at fixed depth.
    """
    if depth <= 0.0:
        raise NonPositiveDepthError(f"depth {depth} <= 0")
    pixel = np.asarray(pixel, dtype=float)
    x = (pixel[0] - frame.cx) / frame.fx
    y = (pixel[1] - frame.cy) / frame.fy
    p_camera = depth * np.array([x, y, 1.0])
    return frame.E_R.T @ (p_camera - frame.e_t)


def camera_ray_direction(frame: CameraFrame, pixel) -> np.ndarray:
    """World-space ray direction with unit camera depth through `pixel`."""
    pixel = np.asarray(pixel, dtype=float)
    d = np.array([(pixel[0] - frame.cx) / frame.fx,
                  (pixel[1] - frame.cy) / frame.fy,
                  1.0])
    return frame.E_R.T @ d

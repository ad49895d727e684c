"""Closed-form eyeball model.

Coordinate system
-----------------
  +x  right   (image columns)
  +y  down    (image rows)
  +z  away from the camera; a gaze vector pointing back at the camera has z < 0

Gaze is parameterised by pitch ``theta`` and yaw ``phi`` (radians).  The unit
gaze vector is ``(sin(phi)cos(theta), sin(theta), -cos(theta)cos(phi))`` and a
weak-perspective projection maps any point on the eyeball sphere to the image
by dropping z (pixel units absorb the scale).

Landmark ordering (fixed serialization contract)
------------------------------------------------
  0      iris center
  1      eyeball center
  2..9   iris rim, counter-clockwise on screen starting from the rightmost point
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

N_LANDMARKS = 10
N_RIM = 8
ARCSIN_CLAMP = 1.0 - 1e-7
DEFAULT_IRIS_ANGULAR_RADIUS = 0.35


class GeometryDomainError(ValueError):
    """Input outside the domain of a geometric operation."""


@dataclass(frozen=True)
class GazeAngles:
    theta: float
    phi: float

    def __post_init__(self):
        half_pi = math.pi / 2
        if not (-half_pi < self.theta < half_pi and -half_pi < self.phi < half_pi):
            raise GeometryDomainError(
                f"gaze angles must lie in (-pi/2, pi/2), got ({self.theta}, {self.phi})")

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.phi])


@dataclass(frozen=True)
class EyeballState:
    center_x: float
    center_y: float
    radius: float
    iris_angular_radius: float = DEFAULT_IRIS_ANGULAR_RADIUS

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryDomainError(f"eyeball radius must be positive, got {self.radius}")
        if not 0 < self.iris_angular_radius < math.pi / 2:
            raise GeometryDomainError(
                f"iris angular radius must lie in (0, pi/2), got {self.iris_angular_radius}")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.center_x, self.center_y])


def angles_to_vector(angles) -> np.ndarray:
    """Convert ``(..., 2)`` pitch/yaw arrays (or a GazeAngles) to unit vectors ``(..., 3)``."""
    if isinstance(angles, GazeAngles):
        angles = angles.as_array()
    angles = np.asarray(angles, dtype=np.float64)
    theta, phi = angles[..., 0], angles[..., 1]
    ct = np.cos(theta)
    return np.stack([np.sin(phi) * ct, np.sin(theta), -ct * np.cos(phi)], axis=-1)


def vector_to_angles(vec, atol: float = 1e-6) -> np.ndarray:
    """Inverse of :func:`angles_to_vector` for unit vectors with z < 0."""
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec, axis=-1)
    if np.any(np.abs(norm - 1.0) > atol):
        raise GeometryDomainError("gaze vector must have unit length")
    if np.any(vec[..., 2] >= 0):
        raise GeometryDomainError("gaze vector must point toward the camera (z < 0)")
    theta = np.arcsin(np.clip(vec[..., 1], -1.0, 1.0))
    phi = np.arctan2(vec[..., 0], -vec[..., 2])
    return np.stack([theta, phi], axis=-1)


def _rim_basis(gaze_vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # u: image x-axis projected onto the iris plane; v = g x u points up on screen.
    u = -gaze_vec[..., :1] * gaze_vec
    u[..., 0] += 1.0
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    v = np.cross(gaze_vec, u)
    return u, v


def project_landmarks_batch(centers, radii, angles, iris_angular_radius=DEFAULT_IRIS_ANGULAR_RADIUS) -> np.ndarray:
    """Vectorised :func:`project_landmarks` over ``n`` eyeballs.

    Parameters
    ----------
    centers : (n, 2) eyeball centers in pixels
    radii : (n,) eyeball radii
    angles : (n, 2) pitch/yaw in radians
    iris_angular_radius : scalar or (n,)

    Returns
    -------
    ndarray of shape (n, 10, 2)
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1, 1)
    psi = np.broadcast_to(np.asarray(iris_angular_radius, dtype=np.float64), (len(centers),))[:, None]
    g = angles_to_vector(np.asarray(angles, dtype=np.float64).reshape(-1, 2))
    u, v = _rim_basis(g)
    pts = np.empty((len(centers), N_LANDMARKS, 2))
    pts[:, 0] = centers + radii * g[:, :2]
    pts[:, 1] = centers
    for k in range(N_RIM):
        a = k * math.pi / 4
        p = np.cos(psi) * g + np.sin(psi) * (math.cos(a) * u + math.sin(a) * v)
        pts[:, 2 + k] = centers + radii * p[:, :2]
    return pts


def project_landmarks(eye: EyeballState, gaze: GazeAngles) -> np.ndarray:
    """Project the 10 eye landmarks for a given eyeball and gaze.

    Returns
    -------
    ndarray of shape (10, 2)
        Pixel coordinates in the ordering documented at module level.
    """
    return project_landmarks_batch(eye.center[None], [eye.radius], gaze.as_array()[None],
                                   eye.iris_angular_radius)[0]


def _recon_terms(iris, eyeball, radius):
    iris = np.asarray(iris, dtype=np.float64)
    eyeball = np.asarray(eyeball, dtype=np.float64)
    radius = np.asarray(radius, dtype=np.float64)
    if np.any(radius <= 0):
        raise GeometryDomainError("eyeball radius must be positive")
    dx = iris[..., 0] - eyeball[..., 0]
    dy = iris[..., 1] - eyeball[..., 1]
    a_raw = dy / radius
    a = np.clip(a_raw, -ARCSIN_CLAMP, ARCSIN_CLAMP)
    theta = np.arcsin(a)
    ct = np.cos(theta)
    b_raw = dx / (radius * ct)
    b = np.clip(b_raw, -ARCSIN_CLAMP, ARCSIN_CLAMP)
    phi = np.arcsin(b)
    return dx, dy, radius, a_raw, a, theta, ct, b_raw, b, phi


def reconstruct_gaze_with_flags(iris, eyeball, radius) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised gaze reconstruction that also reports clamped (degenerate) inputs.

    ``iris`` and ``eyeball`` are ``(..., 2)`` pixel arrays and ``radius`` broadcasts
    against their leading shape.  Returns ``(angles (..., 2), degenerate (...))``.
    """
    *_, a_raw, a, theta, _, b_raw, b, phi = _recon_terms(iris, eyeball, radius)
    degenerate = (np.abs(a_raw) > ARCSIN_CLAMP) | (np.abs(b_raw) > ARCSIN_CLAMP)
    return np.stack([theta, phi], axis=-1), degenerate


def reconstruct_gaze(iris, eyeball, radius) -> np.ndarray:
    """Recover (theta, phi) from iris center, eyeball center and radius.

    theta = arcsin(dy / R), phi = arcsin(dx / (R cos(theta))), with both arcsin
    arguments clamped to +-(1 - 1e-7).
    """
    return reconstruct_gaze_with_flags(iris, eyeball, radius)[0]


def recon_jacobian(iris, eyeball, radius) -> np.ndarray:
    """Partials of (theta, phi) w.r.t. (x_ic, y_ic, x_ec, y_ec, R).

    Returns an array of shape ``(..., 2, 5)``.  Entries whose arcsin argument sits
    on the clamp boundary are zero.
    """
    dx, dy, R, a_raw, a, theta, ct, b_raw, b, phi = _recon_terms(iris, eyeball, radius)
    R = np.broadcast_to(R, dx.shape)
    live_t = np.abs(a_raw) <= ARCSIN_CLAMP
    live_p = np.abs(b_raw) <= ARCSIN_CLAMP

    dtheta_da = np.where(live_t, 1.0 / np.sqrt(1.0 - a * a), 0.0)
    # a = dy / R
    t_yic = dtheta_da / R
    t_R = -dtheta_da * dy / (R * R)

    dphi_db = np.where(live_p, 1.0 / np.sqrt(1.0 - b * b), 0.0)
    # b = dx / (R cos theta); theta itself depends on y_ic, y_ec, R
    db_dx = 1.0 / (R * ct)
    db_dtheta = dx * np.sin(theta) / (R * ct * ct)
    db_dR = -dx / (R * R * ct) + db_dtheta * t_R

    jac = np.zeros(dx.shape + (2, 5))
    jac[..., 0, 1] = t_yic
    jac[..., 0, 3] = -t_yic
    jac[..., 0, 4] = t_R
    jac[..., 1, 0] = dphi_db * db_dx
    jac[..., 1, 2] = -dphi_db * db_dx
    jac[..., 1, 1] = dphi_db * db_dtheta * t_yic
    jac[..., 1, 3] = -dphi_db * db_dtheta * t_yic
    jac[..., 1, 4] = dphi_db * db_dR
    return jac


def normalization_rotation(eye_center_3d) -> np.ndarray:
    """Rotation taking the camera frame to one whose +z axis passes through the eye center."""
    c = np.asarray(eye_center_3d, dtype=np.float64)
    n = np.linalg.norm(c)
    if n == 0:
        raise GeometryDomainError("eye center must be a non-zero vector")
    forward = c / n
    down = np.cross(forward, [1.0, 0.0, 0.0])
    if np.linalg.norm(down) < 1e-12:
        # eye center on the camera x-axis
        down = np.cross(forward, [0.0, 0.0, 1.0])
        down = -down if down[1] < 0 else down
    down /= np.linalg.norm(down)
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    return np.stack([right, down, forward])


def normalize_gaze(rotation: np.ndarray, angles) -> np.ndarray:
    """Express gaze angles in the normalised camera frame given by ``rotation``."""
    vec = angles_to_vector(angles) @ np.asarray(rotation).T
    return vector_to_angles(vec)


def angular_error(a, b) -> np.ndarray:
    """Angle in degrees between gaze directions ``a`` and ``b`` (``(..., 2)`` or GazeAngles)."""
    dot = np.sum(angles_to_vector(a) * angles_to_vector(b), axis=-1)
    return np.degrees(np.arccos(np.clip(dot, -1.0, 1.0)))

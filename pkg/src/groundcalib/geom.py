"""Frames, camera model, triangulation and plane fitting.

Conventions used throughout the package:

* ``RigidTransform(R, t)`` maps points ``x -> R @ x + t``. A transform named
  ``T_ab`` (read "a from b") maps coordinates expressed in frame b to frame a.
* Camera frame: z along the optical axis, x right, y down.
* Ground frame: x forward, y left, z up, origin on the road below the vehicle.
* The ground normal inside a camera frame is the *upward* unit normal, so road
  points satisfy ``n @ X = -h`` with camera height ``h > 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    CollinearPoints,
    DegenerateRays,
    InsufficientPoints,
    NegativeDepth,
    NonPositiveDepth,
)

# ---------------------------------------------------------------------------
# SO(3) helpers
# ---------------------------------------------------------------------------


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(w):
    """Rodrigues formula; second-order Taylor expansion below 1e-8 rad."""
    w = np.asarray(w, dtype=float)
    theta = math.sqrt(float(w @ w))
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * (W @ W)
    return np.eye(3) + (math.sin(theta) / theta) * W + ((1.0 - math.cos(theta)) / theta**2) * (W @ W)


def so3_log(R):
    R = np.asarray(R, dtype=float)
    cos_t = min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0))
    theta = math.acos(cos_t)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * vee
    if math.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        i = int(np.argmax(axis))
        axis = B[:, i] / math.sqrt(B[i, i])
        if vee @ axis < 0:
            axis = -axis
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * math.sin(theta)) * vee


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, radians."""
    return float(np.linalg.norm(so3_log(R)))


def orthonormalize(R):
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_from_matrix(R):
    """(roll, pitch, yaw) with ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    R = np.asarray(R, dtype=float)
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def matrix_from_euler(angles):
    roll, pitch, yaw = (float(a) for a in angles)
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


# Camera-to-ground rotation of a level, forward-looking camera:
# camera z -> ground x, camera x -> ground -y, camera y -> ground -z.
R_CANON = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def mounting_angles(R_gc):
    """Roll/pitch/yaw of a camera-to-ground rotation relative to ``R_CANON``.

    Positive pitch tilts the optical axis towards the road.
    """
    return euler_from_matrix(np.asarray(R_gc) @ R_CANON.T)


def rotation_from_mounting(angles):
    return matrix_from_euler(angles) @ R_CANON


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def is_valid(self, tol=1e-9):
        R = self.rotation
        return bool(np.allclose(R @ R.T, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol)

    def allclose(self, other, atol=1e-12):
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __matmul__(self, other):
        return compose(self, other)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    Rt = a.rotation.T
    return RigidTransform(Rt, -Rt @ a.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def in_bounds(self, uv):
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] <= self.width - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= self.height - 1)


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float
    track_id: int = -1

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError("pixel coordinates must be finite")

    @property
    def uv(self):
        return np.array([self.u, self.v])

    def homogeneous(self):
        return np.array([self.u, self.v, 1.0])


@dataclass(frozen=True, eq=False)
class GroundPoint3D:
    position: np.ndarray
    reprojection_error: float = 0.0
    track_id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "position", np.array(self.position, dtype=float).reshape(3))


@dataclass(frozen=True, eq=False)
class GroundPlaneEstimate:
    normal: np.ndarray
    height: float
    inlier_count: int = 0

    def __post_init__(self):
        n = np.array(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be non-zero")
        object.__setattr__(self, "normal", n / norm)
        if not self.height > 0:
            raise ValueError("plane height must be positive")


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------


def project(point, intrinsics: CameraIntrinsics, track_id: int = -1) -> PixelPoint:
    x, y, z = (float(c) for c in np.asarray(point, dtype=float).reshape(3))
    if z <= 1e-12:
        raise NonPositiveDepth(f"point depth {z} is not positive")
    return PixelPoint(intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy, track_id)


def project_points(points, intrinsics: CameraIntrinsics):
    """Vectorised projection of an (N, 3) array; no depth check."""
    P = np.asarray(points, dtype=float)
    z = P[..., 2]
    u = intrinsics.fx * P[..., 0] / z + intrinsics.cx
    v = intrinsics.fy * P[..., 1] / z + intrinsics.cy
    return np.stack([u, v], axis=-1)


def backproject(pixel, intrinsics: CameraIntrinsics):
    """Ray on the z = 1 plane."""
    if isinstance(pixel, PixelPoint):
        u, v = pixel.u, pixel.v
    else:
        u, v = (float(c) for c in pixel)
    return np.array([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0])


def backproject_points(uv, intrinsics: CameraIntrinsics):
    uv = np.asarray(uv, dtype=float)
    out = np.ones(uv.shape[:-1] + (3,))
    out[..., 0] = (uv[..., 0] - intrinsics.cx) / intrinsics.fx
    out[..., 1] = (uv[..., 1] - intrinsics.cy) / intrinsics.fy
    return out


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------


def triangulate_rays(rays_k, rays_k1, T_k1_k: RigidTransform):
    """Midpoint triangulation of ray bundles; returns points in frame k.

    ``T_k1_k`` transports frame-k coordinates into frame k+1. Also returns the
    normalised squared sine between the rays so callers can test degeneracy.
    """
    a = np.asarray(rays_k, dtype=float)
    R, t = T_k1_k.rotation, T_k1_k.translation
    c2 = -R.T @ t
    b = np.asarray(rays_k1, dtype=float) @ R  # rows of R^T @ ray
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    ab = np.einsum("ij,ij->i", a, b)
    ac = a @ c2
    bc = b @ c2
    denom = aa * bb - ab * ab
    sin2 = denom / (aa * bb)
    safe = np.where(denom > 0, denom, 1.0)
    s1 = (ac * bb - ab * bc) / safe
    s2 = (ab * ac - aa * bc) / safe
    X = 0.5 * (s1[:, None] * a + c2 + s2[:, None] * b)
    return X, sin2


def triangulate(p_k: PixelPoint, p_k1: PixelPoint, relative_pose: RigidTransform, intrinsics: CameraIntrinsics) -> GroundPoint3D:
    """Triangulate one match; ``relative_pose`` maps frame-k points into frame k+1."""
    if np.linalg.norm(relative_pose.translation) == 0.0:
        raise DegenerateRays("relative pose has zero baseline")
    r1 = backproject(p_k, intrinsics)[None, :]
    r2 = backproject(p_k1, intrinsics)[None, :]
    X, sin2 = triangulate_rays(r1, r2, relative_pose)
    if not sin2[0] > 1e-24:
        raise DegenerateRays("rays are parallel")
    X = X[0]
    X1 = relative_pose.rotation @ X + relative_pose.translation
    if X[2] <= 0 or X1[2] <= 0:
        raise NegativeDepth("triangulated point lies behind a camera")
    e0 = np.linalg.norm(project_points(X, intrinsics) - p_k.uv)
    e1 = np.linalg.norm(project_points(X1, intrinsics) - p_k1.uv)
    return GroundPoint3D(X, float(max(e0, e1)), p_k.track_id)


def reprojection_errors(X, uv_k, uv_k1, T_k1_k: RigidTransform, intrinsics):
    """Per-point max of the two view reprojection errors."""
    X1 = T_k1_k.apply(X)
    e0 = np.linalg.norm(project_points(X, intrinsics) - uv_k, axis=1)
    e1 = np.linalg.norm(project_points(X1, intrinsics) - uv_k1, axis=1)
    return np.maximum(e0, e1), X[:, 2], X1[:, 2]


# ---------------------------------------------------------------------------
# Plane fitting
# ---------------------------------------------------------------------------


def fit_plane(points: Sequence[GroundPoint3D] | np.ndarray) -> GroundPlaneEstimate:
    """Total-least-squares plane with the camera origin on the positive side."""
    if isinstance(points, np.ndarray):
        P = np.asarray(points, dtype=float).reshape(-1, 3)
    else:
        P = np.array([p.position for p in points], dtype=float).reshape(-1, 3)
    if len(P) < 3:
        raise InsufficientPoints(f"need at least 3 points, got {len(P)}")
    c = P.mean(axis=0)
    D = P - c
    S = D.T @ D
    w, V = np.linalg.eigh(S)
    if w[1] - w[0] <= 1e-12 * max(w[2], 1.0):
        raise CollinearPoints("points are collinear")
    n = V[:, 0]
    h = -float(n @ c)
    if h < 0:
        n, h = -n, -h
    if h == 0.0:
        raise CollinearPoints("plane passes through the camera centre")
    return GroundPlaneEstimate(n, h, len(P))

"""Calibration assembly: rotation from (normal, heading), averaging, z-test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from ..errors import DegenerateGeometry, RankDeficientSum
from ..geom import mounting_angles, orthonormalize, rot_z

VARIANCE_FLOOR = 1e-12


def build_rotation(g_star, t_star):
    """Camera-to-ground rotation from the up normal and the heading direction.

    Rows are the ground axes expressed in the camera frame: x along the
    heading, z along the normal orthogonalised against it, y = z x x.
    """
    g = np.asarray(g_star, dtype=float).reshape(3)
    t = np.asarray(t_star, dtype=float).reshape(3)
    nt = np.linalg.norm(t)
    if nt <= 1e-9:
        raise DegenerateGeometry("heading vector is too short")
    ng = np.linalg.norm(g)
    if ng == 0:
        raise DegenerateGeometry("zero normal")
    nx = t / nt
    cosang = abs(float(nx @ g)) / ng
    if math.sqrt(max(0.0, 1.0 - cosang * cosang)) <= math.sin(1e-6):
        raise DegenerateGeometry("normal is parallel to the heading")
    nz = g - (g @ nx) * nx
    nz /= np.linalg.norm(nz)
    ny = np.cross(nz, nx)
    return np.vstack([nx, ny, nz])


def heading_yaw(displacement_ground):
    """Yaw of a ground-frame displacement about the ground z axis."""
    d = np.asarray(displacement_ground, dtype=float)
    return math.atan2(d[1], d[0])


def rotation_with_heading(g_star, t_star, expected_displacement=None):
    """:func:`build_rotation` corrected for a known heading offset.

    ``expected_displacement`` is the camera displacement predicted by the
    odometry in the ground frame. On curves it is not parallel to the ground
    x axis, so the triad is yawed back by its angle.
    """
    R = build_rotation(g_star, t_star)
    if expected_displacement is None:
        return R
    return rot_z(heading_yaw(expected_displacement)) @ R


def average_rotations(rotations: Sequence) -> np.ndarray:
    """Chordal L2 mean via SVD of the sum, projected onto SO(3)."""
    Rs = [np.asarray(R, dtype=float) for R in rotations]
    if not Rs:
        raise ValueError("need at least one rotation")
    M = np.sum(Rs, axis=0)
    U, S, Vt = np.linalg.svd(M)
    if S[1] <= 1e-12 * len(Rs):
        raise RankDeficientSum("sum of rotations has rank < 2")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return orthonormalize(U @ D @ Vt)


def average_translations(translations: Sequence) -> np.ndarray:
    T = np.asarray(translations, dtype=float).reshape(-1, 3)
    if len(T) == 0:
        raise ValueError("need at least one translation")
    return T.mean(axis=0)


def xi_from(rotation, translation):
    return np.concatenate([mounting_angles(rotation), np.asarray(translation, dtype=float).reshape(3)])


@dataclass(eq=False)
class CalibrationResult:
    rotation: np.ndarray  # camera-to-ground
    translation: np.ndarray  # camera centre in the ground frame
    xi: np.ndarray
    sample_count: int
    reported: bool = False
    timestamp: float = float("nan")

    @classmethod
    def from_pose(cls, rotation, translation, sample_count, reported=False, timestamp=float("nan")):
        R = np.asarray(rotation, dtype=float)
        t = np.asarray(translation, dtype=float).reshape(3)
        return cls(R, t, xi_from(R, t), sample_count, reported, timestamp)


@dataclass(eq=False)
class ZTestResult:
    z: np.ndarray
    report: bool
    critical: float
    n: int


def critical_value(alpha):
    return float(ndtri(1.0 - alpha / 2.0))


def z_test(xi_samples, xi_d, alpha) -> ZTestResult:
    """Componentwise two-sided test of ``mean(xi) == xi_d``.

    Reports when no component rejects at level ``alpha``.
    """
    X = np.asarray(xi_samples, dtype=float)
    X = X.reshape(len(X), -1)
    if len(X) < 2:
        raise ValueError("z_test needs at least 2 samples")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    N = len(X)
    var = np.var(X, axis=0, ddof=1)
    se = np.sqrt(np.maximum(var / N, VARIANCE_FLOOR))
    z = (X.mean(axis=0) - np.asarray(xi_d, dtype=float)) / se
    c = critical_value(alpha)
    return ZTestResult(z, bool(np.all(np.abs(z) < c)), c, N)

"""Coarse-to-fine road feature extraction between two keyframes.

Stages: horizon gating, odometry-driven prediction, grid thinning, an
epipolar quality check on the relative pose, then geometric verification of
individual matches against the expected road normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import epipolar
from .errors import (
    CameraFacingSky,
    CollinearTriple,
    DecompositionFailed,
    InsufficientMatches,
    NoGroundSeed,
    PointBehindCamera,
    RankDeficient,
    RayParallelToGround,
)
from .geom import (
    CameraIntrinsics,
    GroundPlaneEstimate,
    PixelPoint,
    RigidTransform,
    backproject,
    backproject_points,
    euler_from_matrix,
    project_points,
    reprojection_errors,
    triangulate_rays,
)
from .odometry import FrameTag, RelativeMotion

HORIZON_ZERO_TOL = 1e-10


@dataclass(frozen=True)
class Thresholds:
    dtheta_max: float = math.radians(1.0)
    eps_g: float = 0.95
    eps_l: float = 0.2
    eps_s: float = 0.99
    eps_h: float = 0.05
    # "heading": translation gate checks alignment with the odometry heading
    # inside the road plane; "literal": the unmodified |t_hat . n_g| >= eps_g test.
    gate_mode: str = "heading"

    def __post_init__(self):
        if not (self.dtheta_max > 0 and self.eps_g > 0 and self.eps_l > 0 and self.eps_s > 0 and self.eps_h > 0):
            raise ValueError("thresholds must be positive")
        if not (self.eps_g <= 1 and self.eps_s <= 1):
            raise ValueError("eps_g and eps_s must lie in (0, 1]")
        if self.gate_mode not in ("heading", "literal"):
            raise ValueError("gate_mode must be 'heading' or 'literal'")


class Label(str, Enum):
    UNVERIFIED = "unverified"
    GROUND = "ground"
    NON_GROUND = "non_ground"


@dataclass(frozen=True)
class FeatureMatch:
    p_k: PixelPoint
    p_k1: PixelPoint
    predicted_p_k1: Optional[PixelPoint] = None
    label: Label = Label.UNVERIFIED
    score: float = 0.0

    def __post_init__(self):
        ids = {self.p_k.track_id, self.p_k1.track_id}
        if self.predicted_p_k1 is not None:
            ids.add(self.predicted_p_k1.track_id)
        if len(ids) != 1:
            raise ValueError("match points must share one track_id")

    @property
    def track_id(self):
        return self.p_k.track_id


def match_arrays(matches: Sequence[FeatureMatch]):
    uv_k = np.array([[m.p_k.u, m.p_k.v] for m in matches], dtype=float).reshape(-1, 2)
    uv_k1 = np.array([[m.p_k1.u, m.p_k1.v] for m in matches], dtype=float).reshape(-1, 2)
    return uv_k, uv_k1


# ---------------------------------------------------------------------------
# Horizon
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HorizonLine:
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).reshape(3)
        n = math.hypot(c[0], c[1])
        if n == 0:
            raise ValueError("degenerate line")
        object.__setattr__(self, "coefficients", c / n)

    def evaluate(self, uv):
        uv = np.asarray(uv, dtype=float)
        a, b, c = self.coefficients
        return a * uv[..., 0] + b * uv[..., 1] + c


def horizon_points(rotation_g_to_c, intrinsics: CameraIntrinsics):
    """The two image points spanning the horizon, by sign pattern of r31, r32."""
    r = np.asarray(rotation_g_to_c, dtype=float)
    K = intrinsics.K
    r31, r32 = r[2, 0], r[2, 1]
    z31 = abs(r31) < HORIZON_ZERO_TOL
    z32 = abs(r32) < HORIZON_ZERO_TOL
    if z31 and z32:
        raise CameraFacingSky("optical axis cannot see the road")
    if not z31 and not z32:
        p1 = K @ np.array([r[0, 0] / r31, r[1, 0] / r31, 1.0])
        p2 = K @ np.array([r[0, 1] / r32, r[1, 1] / r32, 1.0])
    elif z31:
        p1 = K @ np.array([r[0, 1] / r32, r[1, 1] / r32, 1.0])
        p2 = K @ np.array([(r[0, 0] + r[0, 1]) / r32, (r[1, 0] + r[1, 1]) / r32, 1.0])
    else:
        p1 = K @ np.array([r[0, 0] / r31, r[1, 0] / r31, 1.0])
        p2 = K @ np.array([(r[0, 0] + r[0, 1]) / r31, (r[1, 0] + r[1, 1]) / r31, 1.0])
    return p1, p2


def horizon_line(rotation_g_to_c, intrinsics: CameraIntrinsics, height: float = 1.5) -> HorizonLine:
    """Horizon of the road plane, oriented positive on the road side.

    The sign is fixed with a road point 10 m ahead of the camera; when that
    point is behind the camera the projected downward normal is used instead.
    """
    r = np.asarray(rotation_g_to_c, dtype=float)
    p1, p2 = horizon_points(r, intrinsics)
    line = np.cross(p1, p2)
    if math.hypot(line[0], line[1]) < 1e-300:
        raise CameraFacingSky("horizon points coincide")
    ahead = r @ np.array([10.0, 0.0, -height])
    if ahead[2] > 1e-9:
        s = line @ (intrinsics.K @ (ahead / ahead[2]))
    else:
        # the road side is where n_up . ray < 0; the line is K^-T(-n_up) up to scale
        s = line @ np.linalg.inv(intrinsics.K).T @ (-r[:, 2])
    if s < 0:
        line = -line
    return HorizonLine(line)


def is_below_horizon(line: HorizonLine, pixel: PixelPoint) -> bool:
    return bool(line.evaluate(pixel.uv) > 0)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def predict_points(uv_k, motion: RelativeMotion, normal_hat, height, intrinsics: CameraIntrinsics):
    """Vectorised prediction; returns (uv, valid) with invalid rows NaN."""
    rays = backproject_points(uv_k, intrinsics)
    n = np.asarray(normal_hat, dtype=float)
    n = n / np.linalg.norm(n)
    dots = rays @ n
    valid = np.abs(dots) > 1e-9
    depth_scale = np.where(valid, height / np.where(valid, np.abs(dots), 1.0), np.nan)
    P = rays * depth_scale[:, None]
    P1 = (P - motion.translation) @ motion.rotation.T
    valid &= P1[:, 2] > 1e-12
    uv = project_points(P1, intrinsics)
    uv[~valid] = np.nan
    return uv, valid


def predict_feature(p_k: PixelPoint, motion: RelativeMotion, normal_hat, height: float, intrinsics: CameraIntrinsics) -> PixelPoint:
    """Where a road feature seen at ``p_k`` should appear in the next keyframe."""
    if not height > 0:
        raise ValueError("height must be positive")
    ray = backproject(p_k, intrinsics)
    n = np.asarray(normal_hat, dtype=float)
    n = n / np.linalg.norm(n)
    d = float(ray @ n)
    if abs(d) <= 1e-9:
        raise RayParallelToGround("viewing ray is parallel to the road")
    P = ray * (height / abs(d))
    P1 = motion.rotation @ (P - motion.translation)
    if P1[2] <= 1e-12:
        raise PointBehindCamera("predicted point is behind the next camera")
    uv = project_points(P1, intrinsics)
    return PixelPoint(float(uv[0]), float(uv[1]), p_k.track_id)


# ---------------------------------------------------------------------------
# Grid selection
# ---------------------------------------------------------------------------


def grid_select(matches: Sequence[FeatureMatch], grid_cols: int, grid_rows: int, per_cell: int, image_size) -> list:
    """Keep at most ``per_cell`` best-scoring matches per grid cell of image k."""
    if grid_cols < 1 or grid_rows < 1:
        raise ValueError("grid dimensions must be >= 1")
    w, h = image_size
    cells = {}
    for m in matches:
        cx = min(grid_cols - 1, max(0, int(m.p_k.u * grid_cols / w)))
        cy = min(grid_rows - 1, max(0, int(m.p_k.v * grid_rows / h)))
        cells.setdefault((cx, cy), []).append(m)
    keep = set()
    for members in cells.values():
        members.sort(key=lambda m: (-m.score, m.track_id))
        keep.update(id(m) for m in members[:per_cell])
    return [m for m in matches if id(m) in keep]


# ---------------------------------------------------------------------------
# Epipolar quality check
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class EpipolarResult:
    pose: RelativeMotion
    F: np.ndarray
    inliers: list
    accepted: bool
    rotation_ok: bool = True
    translation_ok: bool = True
    gate_value: float = float("nan")


def translation_gate(t_unit, odometry_motion: RelativeMotion, normal_hat, mode="heading"):
    """Value compared against eps_g; see ``Thresholds.gate_mode``."""
    n = np.asarray(normal_hat, dtype=float)
    n = n / np.linalg.norm(n)
    if mode == "literal":
        return abs(float(t_unit @ n))
    d = odometry_motion.translation - (odometry_motion.translation @ n) * n
    nd = np.linalg.norm(d)
    if nd == 0:
        return 0.0
    return float(t_unit @ (d / nd))


def epipolar_pose_check(
    matches: Sequence[FeatureMatch],
    odometry_motion: RelativeMotion,
    normal_hat,
    thresholds: Thresholds,
    intrinsics: CameraIntrinsics,
    rng=None,
    ransac_iterations: int = 100,
    inlier_threshold: float = 1.5,
    min_parallax: float = 1e-4,
) -> EpipolarResult:
    """Estimate the inter-keyframe pose from matches and gate it.

    RANSAC over the normalised 8-point solver picks a consensus set (the
    odometry-induced F competes as a hypothesis, since road-dominated scenes
    make 8-point samples degenerate). The pose is then refined on the
    essential manifold from the odometry prior and from every
    cheirality-consistent decomposition of the RANSAC estimate. The accepted
    translation is rescaled to the odometry baseline.
    """
    matches = list(matches)
    if len(matches) < 8:
        raise InsufficientMatches(f"need at least 8 matches, got {len(matches)}")
    rng = np.random.default_rng(0) if rng is None else rng
    K = intrinsics.K
    uv_k, uv_k1 = match_arrays(matches)
    rays_k = backproject_points(uv_k, intrinsics)
    rays_k1 = backproject_points(uv_k1, intrinsics)

    T_odo = odometry_motion.as_transform()
    if np.linalg.norm(T_odo.translation) > 0:
        F_odo = epipolar.fundamental_from_pose(T_odo, K)
        inl_odo = np.abs(epipolar.sampson_distance(F_odo, uv_k, uv_k1)) < inlier_threshold
    else:
        F_odo, inl_odo = None, np.zeros(len(matches), dtype=bool)
    F_r, inl_r = epipolar.ransac_fundamental(uv_k, uv_k1, inlier_threshold, ransac_iterations, rng)
    consensus = inl_r if inl_r.sum() > inl_odo.sum() else inl_odo
    if consensus.sum() < 8:
        consensus = np.ones(len(matches), dtype=bool)
    ck, ck1 = uv_k[consensus], uv_k1[consensus]
    rk, rk1 = rays_k[consensus], rays_k1[consensus]

    # zero-baseline motion: rotation-compensated rays coincide
    R_guess = odometry_motion.rotation
    cosang = np.einsum("ij,ij->i", rk @ R_guess.T, rk1) / (np.linalg.norm(rk, axis=1) * np.linalg.norm(rk1, axis=1))
    parallax = np.arccos(np.clip(cosang, -1.0, 1.0))
    if np.median(parallax) < min_parallax:
        raise DecompositionFailed("no parallax between keyframes")

    starts = []
    if F_odo is not None:
        starts.append((T_odo.rotation, T_odo.translation))
    if F_r is not None:
        E = K.T @ F_r @ K
        scored = [(epipolar.cheirality_fraction(RigidTransform(R, t), rk, rk1), i, R, t) for i, (R, t) in enumerate(epipolar.decompose_essential(E))]
        frac, _, R, t = max(scored, key=lambda c: (c[0], -c[1]))
        if frac > 0.5:
            starts.append((R, t))
    best = None
    for R0, t0 in starts:
        R, t, cost = epipolar.refine_pose(R0, t0, ck, ck1, K)
        frac = epipolar.cheirality_fraction(RigidTransform(R, t), rk, rk1)
        if frac <= 0.5:
            continue
        disp = -R.T @ t
        agree = float(disp @ odometry_motion.translation)
        if best is None or cost < best[0] * 0.9 - 1e-18 or (cost <= best[0] * 1.1 + 1e-18 and agree > best[3]):
            best = (cost, R, t, agree)
    if best is None:
        raise DecompositionFailed("no cheirality-consistent pose")
    _, R, t, _ = best

    t_unit = -R.T @ t  # unit displacement in frame k
    scale = float(np.linalg.norm(odometry_motion.translation))
    pose = RelativeMotion(R, t_unit * scale, FrameTag.CAMERA)
    F = epipolar.fundamental_from_pose(RigidTransform(R, t), K)
    inl = np.abs(epipolar.sampson_distance(F, uv_k, uv_k1)) < inlier_threshold
    inliers = [m for m, ok in zip(matches, inl) if ok]

    ang = np.abs(euler_from_matrix(R))
    ang_rel = np.abs(euler_from_matrix(R @ odometry_motion.rotation.T))
    rotation_ok = bool(np.all(ang < thresholds.dtheta_max) and np.all(ang_rel < thresholds.dtheta_max))
    gate = translation_gate(t_unit, odometry_motion, normal_hat, thresholds.gate_mode)
    translation_ok = bool(gate >= thresholds.eps_g)
    return EpipolarResult(pose, F, inliers, rotation_ok and translation_ok, rotation_ok, translation_ok, gate)


# ---------------------------------------------------------------------------
# Ground verification
# ---------------------------------------------------------------------------


def pose_from_fundamental(F, intrinsics: CameraIntrinsics, rays_k, rays_k1) -> RigidTransform:
    """Cheirality-selected pose (unit baseline) from a fundamental matrix."""
    K = intrinsics.K
    E = K.T @ F @ K
    best, best_frac = None, -1.0
    for R, t in epipolar.decompose_essential(E):
        T = RigidTransform(R, t)
        frac = epipolar.cheirality_fraction(T, rays_k, rays_k1)
        if frac > best_frac:
            best, best_frac = T, frac
    if best_frac <= 0:
        raise DecompositionFailed("no cheirality-consistent pose")
    return best


def _triangle_normal(X):
    """Null vector of the stacked edge vectors of a triangle."""
    D = np.array([X[1] - X[0], X[2] - X[0], X[2] - X[1]])
    _, S, Vt = np.linalg.svd(D)
    if S[1] < 1e-10 * max(S[0], 1e-300):
        raise RankDeficient("edges are not independent")
    return Vt[-1]


def lemma3_normal(three_matches: Sequence[FeatureMatch], F, intrinsics: CameraIntrinsics, reference_normal=None, pose: RigidTransform | None = None):
    """Plane normal (frame k) through three matched features.

    The three matches are lifted to 3D with the relative pose encoded by ``F``
    (or ``pose`` when supplied) and the normal is the null space of their
    stacked edge vectors. Invariant to the scale of ``F``. The sign is chosen
    to agree with ``reference_normal``.
    """
    if len(three_matches) != 3:
        raise ValueError("need exactly three matches")
    uv_k, uv_k1 = match_arrays(three_matches)
    a, b, c = uv_k
    area = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    if area <= 1e-6:
        raise CollinearTriple("image points are collinear")
    rays_k = backproject_points(uv_k, intrinsics)
    rays_k1 = backproject_points(uv_k1, intrinsics)
    if pose is None:
        pose = pose_from_fundamental(np.asarray(F, dtype=float), intrinsics, rays_k, rays_k1)
    X, _ = triangulate_rays(rays_k, rays_k1, pose)
    n = _triangle_normal(X)
    if reference_normal is not None and n @ np.asarray(reference_normal) < 0:
        n = -n
    return n


def label_ground(n_g, n_hat, eps_l) -> int:
    n_g = np.asarray(n_g, dtype=float)
    n_hat = np.asarray(n_hat, dtype=float)
    # relative slack absorbs rounding at the inclusive boundary
    return int(np.linalg.norm(np.cross(n_g, n_hat)) <= eps_l * (1.0 + 1e-12))


@dataclass(eq=False)
class VerificationResult:
    ground: list
    points: np.ndarray  # triangulated frame-k positions of ``ground``
    reprojection_errors: np.ndarray
    seed_attempts: int


def verify_ground_set(
    matches: Sequence[FeatureMatch],
    F,
    n_hat,
    eps_l: float,
    rng_seed: int,
    intrinsics: CameraIntrinsics,
    pose: RelativeMotion | RigidTransform | None = None,
    max_attempts: int = 50,
    max_reprojection: float = 1.0,
    anchor_radius: float = 2.0,
    seed_pool: float = 0.3,
    anchor_search: float = 8.0,
    min_lever: float = 0.2,
    max_anchors: int = 12,
) -> VerificationResult:
    """Fine road set from a coarse set of matches.

    Seeding draws a random match among the nearest ``seed_pool`` fraction
    and pairs it with its two nearest neighbours until a triple labels as
    road. Every other match is then labelled once, in order of depth, by the
    triangle it forms with two verified anchors (within ``anchor_search``
    meters). Among anchor pairs whose line passes between ``min_lever`` and
    ``anchor_radius`` meters from the match, the one spanning the largest
    triangle is used. Matches without such a pair wait for later passes and
    are dropped if none appears.

    The lever bound matters: a point ``dz`` above the road tilts the
    triangle by about ``atan(dz / lever)``, so a short lever is what lets
    low structure fail the ``eps_l`` test.

    Survivors must also re-project within ``max_reprojection`` pixels after
    triangulation.
    """
    matches = list(matches)
    if len(matches) < 3:
        raise InsufficientMatches("need at least 3 matches")
    rng = np.random.default_rng(rng_seed)
    n_hat = np.asarray(n_hat, dtype=float)
    n_hat = n_hat / np.linalg.norm(n_hat)
    uv_k, uv_k1 = match_arrays(matches)
    rays_k = backproject_points(uv_k, intrinsics)
    rays_k1 = backproject_points(uv_k1, intrinsics)
    if pose is None:
        T = pose_from_fundamental(np.asarray(F, dtype=float), intrinsics, rays_k, rays_k1)
    elif isinstance(pose, RelativeMotion):
        T = pose.as_transform()
    else:
        T = pose
    X, sin2 = triangulate_rays(rays_k, rays_k1, T)
    err, z0, z1 = reprojection_errors(X, uv_k, uv_k1, T, intrinsics)
    usable = (z0 > 0) & (z1 > 0) & (sin2 > 1e-24)

    def plane_label(a, b, c):
        nn = np.cross(X[b] - X[a], X[c] - X[a])
        nrm = np.linalg.norm(nn)
        if nrm <= 1e-12 * max(np.linalg.norm(X[b] - X[a]) * np.linalg.norm(X[c] - X[a]), 1e-300):
            return 0
        nn = nn / nrm
        if nn @ n_hat < 0:
            nn = -nn
        return label_ground(nn, n_hat, eps_l)

    n = len(matches)
    by_depth = [int(i) for i in np.argsort(np.where(usable, z0, np.inf), kind="stable") if usable[i]]
    if len(by_depth) < 3:
        raise NoGroundSeed("fewer than 3 triangulable matches")
    pool = by_depth[: max(3, int(math.ceil(seed_pool * len(by_depth))))]
    cand = np.array(by_depth)

    attempts = 0
    seed = None
    while attempts < max_attempts:
        attempts += 1
        i = pool[int(rng.integers(len(pool)))]
        d = np.linalg.norm(X[cand] - X[i], axis=1)
        nb = cand[np.argsort(d, kind="stable")[1:3]]
        ids = [i, int(nb[0]), int(nb[1])]
        a, b, c = uv_k[ids]
        if 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) <= 1e-6:
            continue
        if plane_label(*ids):
            seed = ids
            break
        if len(pool) == 1:
            break
    if seed is None:
        raise NoGroundSeed(f"no road triple found in {attempts} attempts")

    is_ground = np.zeros(n, dtype=bool)
    is_ground[seed] = True
    anchors = list(seed)
    pairs = {}  # upper-triangle index pairs by anchor count
    # labelling threshold on |n x n_hat|, with the same boundary slack as label_ground
    lim2 = (eps_l * (1.0 + 1e-12)) ** 2
    pending = [j for j in by_depth if j not in seed]
    progress = True
    while pending and progress:
        progress = False
        still = []
        for j in pending:
            Xa = X[anchors]
            d = np.sqrt(((Xa - X[j]) ** 2).sum(axis=1))
            sel = np.flatnonzero(d <= anchor_search)
            if len(sel) < 2:
                still.append(j)
                continue
            if len(sel) > max_anchors:
                sel = np.argsort(d, kind="stable")[:max_anchors]
            m = len(sel)
            if m not in pairs:
                pairs[m] = np.triu_indices(m, 1)
            ia, ib = pairs[m]
            A, B = Xa[sel[ia]], Xa[sel[ib]]
            u, v = B - A, X[j] - A
            cr = np.column_stack([
                u[:, 1] * v[:, 2] - u[:, 2] * v[:, 1],
                u[:, 2] * v[:, 0] - u[:, 0] * v[:, 2],
                u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0],
            ])
            area2 = np.sqrt((cr**2).sum(axis=1))
            lever = area2 / np.maximum(np.sqrt((u**2).sum(axis=1)), 1e-300)
            ok = (lever <= anchor_radius) & (lever >= min_lever)
            if not ok.any():
                still.append(j)
                continue
            best = int(np.argmax(np.where(ok, area2, -1.0)))
            progress = True
            nn = cr[best] / area2[best]
            c = np.cross(nn, n_hat)
            if c @ c <= lim2:
                is_ground[j] = True
                anchors.append(j)
        pending = still

    keep = is_ground & (err <= max_reprojection)
    idx = np.flatnonzero(keep)
    ground = [replace(matches[i], label=Label.GROUND) for i in idx]
    return VerificationResult(ground, X[idx], err[idx], attempts)


def filter_plane_estimate(est: GroundPlaneEstimate, pose_t, ref_height: float, thresholds: Thresholds) -> bool:
    """Plausibility gate on a fitted plane.

    Accepts when ``|g_s . pose_t / |pose_t|| >= eps_s`` and the height is
    within ``eps_h`` of ``ref_height``.
    """
    t = np.asarray(pose_t, dtype=float)
    nt = np.linalg.norm(t)
    if nt == 0:
        return False
    align = abs(float(est.normal @ (t / nt)))
    return bool(align >= thresholds.eps_s and abs(est.height - ref_height) <= thresholds.eps_h)

"""Deterministic synthetic driving scenarios with known ground truth.

The vehicle trajectory is produced by integrating noise-free wheel commands
with the same bicycle model the pipeline uses, so noise-free odometry
reproduces the true poses exactly. Landmarks are either road points (on the
plane z = 0 of the world) or points on the vertical faces of box-shaped
buildings placed beside the road.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import EmptyScene
from .geom import (
    CameraIntrinsics,
    RigidTransform,
    compose,
    invert,
    rotation_from_mounting,
    so3_exp,
    so3_log,
    matrix_from_euler,
)
from .odometry import OdometryIntegrator, VehicleParams, WheelSample

TRAJECTORIES = ("straight", "arc", "s_curve", "stop_and_go")


@dataclass(frozen=True)
class ExtrinsicPerturbation:
    """Perturbation that starts at ``time`` and ramps in over ``ramp`` seconds.

    ``angles`` are roll/pitch/yaw increments of the camera mounting (radians);
    ``height`` is the change of camera height above the road (meters).
    """

    time: float
    angles: tuple = (0.0, 0.0, 0.0)
    height: float = 0.0
    ramp: float = 0.0

    def fraction(self, t):
        if self.ramp <= 0.0:
            return 1.0 if t >= self.time else 0.0
        return min(1.0, max(0.0, (t - self.time) / self.ramp))


@dataclass(frozen=True)
class MountSpec:
    angles: tuple = (0.0, 0.2, 0.0)
    translation: tuple = (1.8, 0.0, 1.5)

    def transform(self) -> RigidTransform:
        return RigidTransform(rotation_from_mounting(self.angles), self.translation)


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    duration: float = 5.0
    wheel_rate: float = 100.0
    frame_rate: float = 33.0
    trajectory: str = "straight"
    speed: float = 10.0
    steering: float = 0.0
    s_curve_amplitude: float = 0.02
    s_curve_period: float = 8.0
    stop_period: float = 6.0
    stop_fraction: float = 0.25
    ground_feature_density: float = 0.4
    structure_fraction: float = 0.3
    structure_min_height: float = 0.5
    pixel_noise_sigma: float = 0.0
    speed_sigma: float = 0.0
    steering_sigma: float = 0.0
    max_range: float = 30.0
    min_depth: float = 0.5
    road_clearance: float = 6.0
    intrinsics: CameraIntrinsics = CameraIntrinsics(420.0, 420.0, 406.0, 270.0, 812, 540)
    vehicle: VehicleParams = VehicleParams()
    mount: MountSpec = MountSpec()
    extrinsic_schedule: tuple = ()
    second_camera: Optional[MountSpec] = None

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.wheel_rate < self.frame_rate:
            raise ValueError("wheel_rate must be at least frame_rate")
        if self.ground_feature_density < 0 or not 0.0 <= self.structure_fraction < 1.0:
            raise ValueError("densities must be non-negative and structure_fraction in [0, 1)")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        times = [p.time for p in self.extrinsic_schedule]
        if times != sorted(times):
            raise ValueError("extrinsic schedule must be sorted by time")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "intrinsics" in d and isinstance(d["intrinsics"], dict):
            d["intrinsics"] = CameraIntrinsics(**d["intrinsics"])
        if "vehicle" in d and isinstance(d["vehicle"], dict):
            d["vehicle"] = VehicleParams(**d["vehicle"])
        if "mount" in d and isinstance(d["mount"], dict):
            d["mount"] = MountSpec(**{k: tuple(v) for k, v in d["mount"].items()})
        if d.get("second_camera") is not None and isinstance(d["second_camera"], dict):
            d["second_camera"] = MountSpec(**{k: tuple(v) for k, v in d["second_camera"].items()})
        if "extrinsic_schedule" in d:
            d["extrinsic_schedule"] = tuple(
                p if isinstance(p, ExtrinsicPerturbation) else ExtrinsicPerturbation(**{**p, "angles": tuple(p.get("angles", (0, 0, 0)))})
                for p in d["extrinsic_schedule"]
            )
        if "odometry_noise" in d:
            noise = d.pop("odometry_noise")
            d.setdefault("speed_sigma", noise.get("speed_sigma", 0.0))
            d.setdefault("steering_sigma", noise.get("steering_sigma", 0.0))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["extrinsic_schedule"] = [asdict(p) for p in self.extrinsic_schedule]
        return d


@dataclass(frozen=True)
class SecondCamera:
    intrinsics: CameraIntrinsics
    extrinsic: RigidTransform  # camera-to-ground


@dataclass(eq=False)
class KeyframeObservations:
    """Observations of one camera frame.

    ``cross`` rows are ``(track_id, u_front, v_front, u_second, v_second)``.
    """

    timestamp: float
    track_ids: np.ndarray
    uv: np.ndarray
    cross: Optional[np.ndarray] = None

    def __post_init__(self):
        self.track_ids = np.asarray(self.track_ids, dtype=np.int64).reshape(-1)
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        if self.cross is not None:
            self.cross = np.asarray(self.cross, dtype=float).reshape(-1, 5)

    @property
    def observations(self):
        from .geom import PixelPoint

        return [PixelPoint(float(u), float(v), int(i)) for i, (u, v) in zip(self.track_ids, self.uv)]

    def lookup(self):
        return {int(i): k for k, i in enumerate(self.track_ids)}


@dataclass(eq=False)
class ScenarioTruth:
    nominal_extrinsic: RigidTransform
    schedule: tuple
    frame_times: np.ndarray
    vehicle_poses: np.ndarray  # (F, 3): x, y, heading
    landmarks: np.ndarray  # (N, 3) world coordinates
    is_ground: np.ndarray  # (N,) bool

    def extrinsic_at(self, t) -> RigidTransform:
        return apply_extrinsic_schedule(self, t)

    def label(self, track_id) -> str:
        return "ground" if self.is_ground[int(track_id)] else "structure"


@dataclass(eq=False)
class Scenario:
    intrinsics: CameraIntrinsics
    vehicle_params: VehicleParams
    wheel_samples: list
    keyframes: list
    truth: ScenarioTruth
    factory_extrinsic: RigidTransform
    second_camera: Optional[SecondCamera] = None


# ---------------------------------------------------------------------------
# Extrinsic schedule
# ---------------------------------------------------------------------------


def perturbation_at(schedule, t):
    R = np.eye(3)
    dh = 0.0
    for p in schedule:
        f = p.fraction(t)
        if f == 0.0:
            continue
        R_full = matrix_from_euler(p.angles)
        R = (R_full if f == 1.0 else so3_exp(f * so3_log(R_full))) @ R
        dh += f * p.height
    return R, dh


def apply_extrinsic_schedule(truth: ScenarioTruth, t: float) -> RigidTransform:
    """True camera-to-ground transform active at time ``t``."""
    nominal = truth.nominal_extrinsic
    if not truth.schedule:
        return nominal
    R_p, dh = perturbation_at(truth.schedule, t)
    tr = nominal.translation + np.array([0.0, 0.0, dh])
    return RigidTransform(R_p @ nominal.rotation, tr)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


def _commands(cfg: ScenarioConfig, t):
    if cfg.trajectory == "straight":
        return cfg.speed, 0.0
    if cfg.trajectory == "arc":
        return cfg.speed, cfg.steering
    if cfg.trajectory == "s_curve":
        return cfg.speed, cfg.s_curve_amplitude * math.sin(2.0 * math.pi * t / cfg.s_curve_period)
    # stop_and_go: drive, then hold still for stop_fraction of every period
    phase = (t % cfg.stop_period) / cfg.stop_period
    return (0.0 if phase >= 1.0 - cfg.stop_fraction else cfg.speed), 0.0


def commanded_samples(cfg: ScenarioConfig):
    n = int(round(cfg.duration * cfg.wheel_rate))
    out = []
    for i in range(n + 1):
        t = i / cfg.wheel_rate
        v, d = _commands(cfg, t)
        out.append(WheelSample(t, v, d))
    return out


def driving_fraction(samples, threshold=1e-6):
    """Share of wheel samples with the vehicle moving."""
    if not samples:
        return 0.0
    return sum(1 for s in samples if abs(s.speed) > threshold) / len(samples)


# ---------------------------------------------------------------------------
# Landmarks
# ---------------------------------------------------------------------------


def _distance_to_path(xy, path):
    """Distance of each point to a polyline (dense path samples)."""
    d = np.full(len(xy), np.inf)
    for k in range(0, len(path) - 1):
        a, b = path[k], path[k + 1]
        ab = b - a
        L2 = float(ab @ ab)
        if L2 == 0:
            s = np.zeros(len(xy))
        else:
            s = np.clip((xy - a) @ ab / L2, 0.0, 1.0)
        proj = a + s[:, None] * ab
        d = np.minimum(d, np.linalg.norm(xy - proj, axis=1))
    return d


def _landmarks(cfg: ScenarioConfig, rng, path):
    lo = path.min(axis=0) - cfg.max_range
    hi = path.max(axis=0) + cfg.max_range
    area = float(np.prod(hi - lo))
    # thin the path for distance queries
    step = max(1, len(path) // 200)
    coarse = path[::step]
    if not np.array_equal(coarse[-1], path[-1]):
        coarse = np.vstack([coarse, path[-1]])

    f = cfg.structure_fraction
    n_total = int(round(cfg.ground_feature_density * area / (1.0 - f)))
    is_structure = rng.random(n_total) < f
    n_struct = int(is_structure.sum())

    pts = np.zeros((n_total, 3))
    n_ground = n_total - n_struct
    pts[~is_structure, :2] = lo + rng.random((n_ground, 2)) * (hi - lo)

    if n_struct:
        # buildings: axis-aligned boxes kept clear of the road
        n_boxes = max(4, int(area / 400.0))
        boxes = []
        attempts = 0
        while len(boxes) < n_boxes and attempts < 50 * n_boxes:
            attempts += 1
            c = lo + rng.random(2) * (hi - lo)
            half = rng.uniform(1.5, 4.0, size=2)
            top = rng.uniform(max(2.5, cfg.structure_min_height + 1.0), 8.0)
            corners = c + np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]]) * half
            if _distance_to_path(np.vstack([c[None], corners]), coarse).min() < cfg.road_clearance:
                continue
            boxes.append((c, half, top))
        if not boxes:
            raise EmptyScene("no room for structure beside the road")
        which = rng.integers(0, len(boxes), size=n_struct)
        face = rng.integers(0, 4, size=n_struct)
        along = rng.uniform(-1.0, 1.0, size=n_struct)
        sp = np.zeros((n_struct, 3))
        for k in range(n_struct):
            c, half, top = boxes[which[k]]
            fk = face[k]
            if fk < 2:
                x = c[0] + (half[0] if fk == 0 else -half[0])
                y = c[1] + along[k] * half[1]
            else:
                y = c[1] + (half[1] if fk == 2 else -half[1])
                x = c[0] + along[k] * half[0]
            sp[k] = (x, y, rng.uniform(cfg.structure_min_height, top))
        pts[is_structure] = sp
    return pts, ~is_structure


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _camera_observations(T_cw, landmarks, intrinsics, cfg):
    Xc = landmarks @ T_cw.rotation.T + T_cw.translation
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * Xc[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * Xc[:, 1] / z + intrinsics.cy
    rng_ok = np.linalg.norm(Xc, axis=1) <= cfg.max_range
    vis = (z > cfg.min_depth) & rng_ok & (u >= 0) & (u <= intrinsics.width - 1) & (v >= 0) & (v <= intrinsics.height - 1)
    return np.flatnonzero(vis), np.stack([u, v], axis=1)


def _clip(uv, intrinsics):
    uv[:, 0] = np.clip(uv[:, 0], 0.0, intrinsics.width - 1)
    uv[:, 1] = np.clip(uv[:, 1], 0.0, intrinsics.height - 1)
    return uv


def vehicle_pose_transform(x, y, heading) -> RigidTransform:
    """World-from-ground transform of the vehicle."""
    c, s = math.cos(heading), math.sin(heading)
    return RigidTransform(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), [x, y, 0.0])


def generate(cfg: ScenarioConfig) -> Scenario:
    rng = np.random.default_rng(cfg.seed)
    exact = commanded_samples(cfg)
    odo = OdometryIntegrator(exact, cfg.vehicle)

    n_frames = int(math.floor(cfg.duration * cfg.frame_rate + 1e-9)) + 1
    frame_times = np.arange(n_frames) / cfg.frame_rate
    states = [odo.state_at(float(t)) for t in frame_times]
    poses = np.array([[s.position[0], s.position[1], s.heading_angle] for s in states])

    dense = np.array([st.position[:2] for st in odo.states])
    landmarks, is_ground = _landmarks(cfg, rng, dense)

    nominal = cfg.mount.transform()
    truth = ScenarioTruth(nominal, tuple(cfg.extrinsic_schedule), frame_times, poses, landmarks, is_ground)
    second = None
    if cfg.second_camera is not None:
        second = SecondCamera(cfg.intrinsics, cfg.second_camera.transform())

    K = cfg.intrinsics
    frames = []
    prev_visible = None
    overlap_seen = False
    for t, (x, y, th) in zip(frame_times, poses):
        T_wg = vehicle_pose_transform(x, y, th)
        T_gc = apply_extrinsic_schedule(truth, float(t))
        T_cw = invert(compose(T_wg, T_gc))
        idx, uv_all = _camera_observations(T_cw, landmarks, K, cfg)
        uv = uv_all[idx].copy()
        if cfg.pixel_noise_sigma > 0:
            uv += rng.normal(0.0, cfg.pixel_noise_sigma, size=uv.shape)
        uv = _clip(uv, K)
        cross = None
        if second is not None:
            T_qw = invert(compose(T_wg, second.extrinsic))
            qidx, quv_all = _camera_observations(T_qw, landmarks, second.intrinsics, cfg)
            common, ia, ib = np.intersect1d(idx, qidx, assume_unique=True, return_indices=True)
            quv = quv_all[qidx[ib]].copy()
            if cfg.pixel_noise_sigma > 0:
                quv += rng.normal(0.0, cfg.pixel_noise_sigma, size=quv.shape)
            quv = _clip(quv, second.intrinsics)
            cross = np.column_stack([common.astype(float), uv[ia], quv])
        frames.append(KeyframeObservations(float(t), idx, uv, cross))
        vis = set(idx.tolist())
        if prev_visible is not None and vis & prev_visible:
            overlap_seen = True
        prev_visible = vis
    if not overlap_seen:
        raise EmptyScene("no landmark is visible in two consecutive frames")

    wheel = []
    for s in exact:
        v = s.speed + (rng.normal(0.0, cfg.speed_sigma) if cfg.speed_sigma > 0 else 0.0)
        d = s.steering_angle + (rng.normal(0.0, cfg.steering_sigma) if cfg.steering_sigma > 0 else 0.0)
        wheel.append(WheelSample(s.timestamp, v, d))

    return Scenario(K, cfg.vehicle, wheel, frames, truth, nominal, second)


def true_camera_pose(scenario: Scenario, frame_index: int) -> RigidTransform:
    """World-from-camera pose of a frame."""
    x, y, th = scenario.truth.vehicle_poses[frame_index]
    t = scenario.truth.frame_times[frame_index]
    return compose(vehicle_pose_transform(x, y, th), apply_extrinsic_schedule(scenario.truth, float(t)))

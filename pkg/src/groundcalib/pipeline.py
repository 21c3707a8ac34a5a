"""End-to-end calibration over a scenario stream.

Per keyframe pair: odometry -> prediction-assisted matching -> horizon gating
-> grid thinning -> epipolar check -> road verification -> plane fit and
filters -> failure checks -> window refinement -> averaging -> z-test.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .config import PipelineConfig
from .errors import (
    CalibrationError,
    CollinearPoints,
    DecompositionFailed,
    InsufficientMatches,
    InsufficientPoints,
    NoGroundSeed,
    PointAtInfinity,
    SolverDiverged,
)
from .geom import CameraIntrinsics, GroundPlaneEstimate, PixelPoint, RigidTransform, fit_plane, invert, rotation_angle
from . import ground as gr
from .odometry import (
    OdometryIntegrator,
    RelativeMotion,
    relative_vehicle_motion,
    vehicle_to_camera_motion,
    yaw_rate,
)
from .optimizer import (
    FailureReason,
    MarginalPrior,
    PairObservations,
    StepReport,
    WindowState,
    average_rotations,
    average_translations,
    detect_failure,
    homography,
    marginalize_or_drop,
    optimize_window,
    rotation_with_heading,
    xi_from,
    z_test,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Report types
# ---------------------------------------------------------------------------


@dataclass
class ReportEvent:
    timestamp: float
    keyframe: int
    xi: list
    z: list
    n_h: int
    segment: int


@dataclass
class KeyframeDiagnostics:
    keyframe: int
    frame: int
    timestamp: float
    coarse: int = 0
    fine: int = 0
    epipolar_accepted: Optional[bool] = None
    raw_normal: Optional[list] = None
    raw_height: Optional[float] = None
    pair_normal: Optional[list] = None
    pair_height: Optional[float] = None
    plane_accepted: Optional[bool] = None
    window_normal: Optional[list] = None
    window_height: Optional[float] = None
    failure: Optional[str] = None
    used: bool = False
    note: str = ""


@dataclass
class PairRecord:
    """Final state of a pair when it left the window."""

    keyframe: int
    timestamp: float
    homography: list
    uv_k: list
    uv_k1: list
    residual_norms: list

    @property
    def transfer_error(self):
        return float(np.mean(self.residual_norms))


@dataclass
class FailureEvent:
    timestamp: float
    keyframe: int
    reason: str


@dataclass
class CalibrationReport:
    schema_version: int = 1
    events: list = field(default_factory=list)
    keyframes: list = field(default_factory=list)
    pairs: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    final: Optional[dict] = None
    critical_value: float = float("nan")
    aborted: bool = False
    abort_reason: str = ""

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            schema_version=d.get("schema_version", 1),
            events=[ReportEvent(**e) for e in d.get("events", [])],
            keyframes=[KeyframeDiagnostics(**k) for k in d.get("keyframes", [])],
            pairs=[PairRecord(**p) for p in d.get("pairs", [])],
            failures=[FailureEvent(**f) for f in d.get("failures", [])],
            final=d.get("final"),
            critical_value=d.get("critical_value", float("nan")),
            aborted=d.get("aborted", False),
            abort_reason=d.get("abort_reason", ""),
        )


# ---------------------------------------------------------------------------
# Keyframe selection
# ---------------------------------------------------------------------------


def select_keyframes(scenario, config: PipelineConfig, integrator: OdometryIntegrator | None = None):
    """Frame indices chosen as keyframes under steady driving."""
    kc = config.keyframes
    odo = integrator or OdometryIntegrator(scenario.wheel_samples, scenario.vehicle_params)
    chosen = []
    last = None
    for i, kf in enumerate(scenario.keyframes):
        s = odo.sample_at(kf.timestamp)
        if not kc.min_speed <= s.speed <= kc.max_speed:
            continue
        if abs(yaw_rate(s.speed, s.steering_angle, scenario.vehicle_params)) > kc.max_yaw_rate:
            continue
        pos = odo.state_at(kf.timestamp).position
        if last is None or np.linalg.norm(pos - last) >= kc.min_translation:
            chosen.append(i)
            last = pos
    return chosen


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _PairData:
    keyframe: int
    timestamp: float
    obs: PairObservations
    pose: RelativeMotion
    expected_displacement: np.ndarray  # camera displacement in the ground frame
    raw: Optional[object] = None


def coarse_matches(kf_a, kf_b, motion, normal, height, rotation_gc, intrinsics, config: PipelineConfig):
    """Prediction-gated, horizon-gated, grid-thinned matches of two keyframes."""
    lb = kf_b.lookup()
    ia, ib = [], []
    for i, tid in enumerate(kf_a.track_ids):
        j = lb.get(int(tid))
        if j is not None:
            ia.append(i)
            ib.append(j)
    if not ia:
        return []
    ia, ib = np.array(ia), np.array(ib)
    uv_a, uv_b = kf_a.uv[ia], kf_b.uv[ib]
    pred, valid = gr.predict_points(uv_a, motion, normal, height, intrinsics)
    dist = np.linalg.norm(np.where(valid[:, None], pred - uv_b, np.inf), axis=1)
    line = gr.horizon_line(np.asarray(rotation_gc).T, intrinsics, height)
    below = line.evaluate(uv_a) > 0
    keep = valid & below & (dist <= config.gating_radius)
    tids = kf_a.track_ids[ia]
    # Synthetic tracks carry no tracker quality, so every match scores the same
    # and the grid keeps the lowest track ids.  Ranking by distance to the
    # prediction would favour points that agree with the current plane.
    quality = np.zeros(len(ia))
    matches = []
    for k in np.flatnonzero(keep):
        t = int(tids[k])
        matches.append(
            gr.FeatureMatch(
                PixelPoint(float(uv_a[k, 0]), float(uv_a[k, 1]), t),
                PixelPoint(float(uv_b[k, 0]), float(uv_b[k, 1]), t),
                PixelPoint(float(pred[k, 0]), float(pred[k, 1]), t),
                score=float(quality[k]),
            )
        )
    return gr.grid_select(matches, config.grid_cols, config.grid_rows, config.per_cell, (intrinsics.width, intrinsics.height))


class CalibrationPipeline:
    """Stateful driver; one instance per scenario stream."""

    def __init__(self, scenario, config: PipelineConfig | None = None):
        self.sc = scenario
        self.cfg = config or PipelineConfig()
        self.K: CameraIntrinsics = scenario.intrinsics
        self.odo = OdometryIntegrator(scenario.wheel_samples, scenario.vehicle_params)
        self.report = CalibrationReport(critical_value=float(_critical(self.cfg.optimizer.alpha)))
        self.segment = 0
        factory = scenario.factory_extrinsic
        self.factory_t = factory.translation.copy()
        self._reset(factory.rotation, factory.translation, bootstrap=False)

    # -- state management ---------------------------------------------------

    def _reset(self, R, t, bootstrap):
        self.R = np.array(R, dtype=float)
        self.t = np.array(t, dtype=float)
        self.normal = self.R[2].copy()
        self.height = float(self.t[2])
        self.window: Optional[WindowState] = None
        self.pairs: list = []
        self.prior: Optional[MarginalPrior] = None
        self.samples: deque = deque(maxlen=self.cfg.optimizer.averaging_window)
        # per-pair estimates: nearly independent, unlike overlapping windows
        self.pair_xi: deque = deque(maxlen=self.cfg.optimizer.averaging_window)
        self.bootstrap = [] if bootstrap else None
        self.flagged = 0

    def _finalize_pair(self, i):
        pd = self.pairs[i]
        H = homography(self.window.motion(i), self.window.plane, self.K)
        x = np.column_stack([pd.obs.uv_k, np.ones(len(pd.obs))]) @ H.T
        r = pd.obs.uv_k1 - x[:, :2] / x[:, 2:3]
        self.report.pairs.append(
            PairRecord(pd.keyframe, pd.timestamp, H.tolist(), pd.obs.uv_k.tolist(), pd.obs.uv_k1.tolist(), np.linalg.norm(r, axis=1).tolist())
        )

    def _flush_window(self):
        if self.window is not None:
            for i in range(len(self.pairs)):
                self._finalize_pair(i)
        self.window = None
        self.pairs = []

    # -- per pair -------------------------------------------------------------

    def _camera_motion(self, state_a, state_b):
        vm = relative_vehicle_motion(state_a, state_b)
        E = invert(RigidTransform(self.R, self.t))
        return vm, vehicle_to_camera_motion(vm, E)

    def process_pair(self, ka, kb, fa, fb):
        sc, cfg = self.sc, self.cfg
        kf_a, kf_b = sc.keyframes[fa], sc.keyframes[fb]
        diag = KeyframeDiagnostics(kb, fb, kf_b.timestamp)
        self.report.keyframes.append(diag)
        sa, sb = self.odo.state_at(kf_a.timestamp), self.odo.state_at(kf_b.timestamp)
        vm, cm = self._camera_motion(sa, sb)
        step = StepReport(rotation_step=rotation_angle(vm.rotation), translation_step=float(np.linalg.norm(vm.translation)))

        matches = coarse_matches(kf_a, kf_b, cm, self.normal, self.height, self.R, self.K, cfg)
        diag.coarse = len(matches)
        step.tracked_ground = len(matches)
        pd = None
        if detect_failure(step, cfg.failure) is None:
            pd, raw = self._extract(matches, cm, vm, diag, kb, kf_b.timestamp)
            if pd is not None:
                step.triangulated = len(pd.obs)
                if raw is not None:
                    pd.raw = raw
                    step.height_change = raw.height - self.height
                    step.normal_change = math.acos(min(1.0, abs(float(raw.normal @ self.normal))))
                    gate_dir = self.normal if cfg.thresholds.gate_mode == "heading" else cm.translation
                    ok = gr.filter_plane_estimate(raw, gate_dir, self.height, cfg.thresholds)
                    diag.plane_accepted = ok
                    step.quality_ok = ok
            elif diag.epipolar_accepted is False or diag.note == "epipolar":
                return  # the pair is simply not informative (turning, no parallax)
            else:
                step.triangulated = diag.fine

        if self.bootstrap is not None:
            self._bootstrap_step(pd, diag)
            return

        reason = detect_failure(step, cfg.failure)
        if reason is not None:
            diag.failure = reason.value
            self.flagged += 1
            if self.flagged >= cfg.failure.persistence:
                self._declare_failure(kb, kf_b.timestamp, reason)
            return
        self.flagged = 0
        self._add_pair(pd, diag)

    def _extract(self, matches, cm, vm, diag, kb, timestamp):
        cfg = self.cfg
        if len(matches) < 8:
            return None, None
        try:
            epi = gr.epipolar_pose_check(
                matches, cm, self.normal, cfg.thresholds, self.K,
                rng=np.random.default_rng([cfg.seed, kb]),
                ransac_iterations=cfg.ransac_iterations,
                inlier_threshold=cfg.inlier_threshold,
            )
        except (InsufficientMatches, DecompositionFailed):
            diag.note = "epipolar"
            return None, None
        diag.epipolar_accepted = epi.accepted
        if not epi.accepted:
            return None, None
        try:
            vr = gr.verify_ground_set(
                matches, epi.F, self.normal, cfg.thresholds.eps_l, int(cfg.seed * 1000003 + kb), self.K,
                pose=epi.pose, max_attempts=cfg.seed_attempts, max_reprojection=cfg.max_reprojection,
            )
        except (NoGroundSeed, InsufficientMatches):
            diag.fine = 0
            return None, None
        diag.fine = len(vr.ground)
        uv_k, uv_k1 = gr.match_arrays(vr.ground)
        obs = PairObservations(uv_k, uv_k1, float(np.linalg.norm(cm.translation)), kb)
        # camera displacement predicted by odometry, in the ground frame at k
        c = self.t
        exp_disp = vm.translation + (vm.rotation.T - np.eye(3)) @ c
        pd = _PairData(kb, timestamp, obs, epi.pose, exp_disp)
        raw = None
        if len(vr.ground) >= 3:
            try:
                raw = fit_plane(vr.points)
            except (CollinearPoints, InsufficientPoints, ValueError):
                raw = None
        if raw is not None:
            diag.raw_normal = raw.normal.tolist()
            diag.raw_height = raw.height
            raw = self._refine_single(pd, raw)
            if raw is not None:
                diag.pair_normal = raw.normal.tolist()
                diag.pair_height = raw.height
        return pd, raw

    def _refine_single(self, pd, raw):
        """Polish the fitted plane with this pair's homography residuals alone.

        Triangulated far points make the fitted height noisy; the per-pair
        homography solve is far tighter and is what the health checks use.
        """
        if len(pd.obs) < 4:
            return None
        try:
            st = optimize_window(WindowState([pd.pose.rotation], [pd.pose.translation], raw.normal, raw.height), [pd.obs], None, self.cfg.optimizer, self.K)
        except (SolverDiverged, PointAtInfinity, ValueError):
            return None
        if not st.height > 0:
            return None
        return GroundPlaneEstimate(st.normal, st.height, len(pd.obs))

    def _declare_failure(self, kb, timestamp, reason: FailureReason):
        log.info("failure at keyframe %d: %s", kb, reason.value)
        self.report.failures.append(FailureEvent(timestamp, kb, reason.value))
        self._flush_window()
        self.segment += 1
        self._reset(self.R, self.t, bootstrap=True)

    def _bootstrap_step(self, pd, diag):
        if pd is None or pd.raw is None or len(pd.obs) < self.cfg.failure.min_triangulated:
            return
        self.bootstrap.append(pd)
        if len(self.bootstrap) < self.cfg.bootstrap_pairs:
            return
        normals = np.array([p.raw.normal for p in self.bootstrap])
        n = np.median(normals, axis=0)
        n /= np.linalg.norm(n)
        h = float(np.median([p.raw.height for p in self.bootstrap]))
        t_star = sum(p.pose.translation for p in self.bootstrap)
        e_star = sum(p.expected_displacement for p in self.bootstrap)
        R = rotation_with_heading(n, t_star, e_star)
        t = np.array([self.factory_t[0], self.factory_t[1], h])
        pending = self.bootstrap
        self._reset(R, t, bootstrap=False)
        for p in pending:
            self._add_pair(p, diag)

    def _add_pair(self, pd: _PairData, diag):
        cfg = self.cfg.optimizer
        if pd is None or len(pd.obs) < 4:
            return
        if self.window is None:
            self.window = WindowState([], [], self.normal, self.height)
            self.prior = MarginalPrior.empty(self.normal)
        if len(self.pairs) >= cfg.window_size:
            self.prior = marginalize_or_drop(self.window, [p.obs for p in self.pairs], 0, self.prior, cfg, self.K)
            self._finalize_pair(0)
            self.window = self.window.drop_oldest()
            self.pairs = self.pairs[1:]
        cand = WindowState(
            self.window.rotations + [pd.pose.rotation],
            self.window.translations + [pd.pose.translation],
            self.window.normal,
            self.window.height,
        )
        try:
            solved = optimize_window(cand, [p.obs for p in self.pairs] + [pd.obs], self.prior, cfg, self.K)
        except (SolverDiverged, PointAtInfinity, ValueError) as exc:
            diag.note = f"optimizer: {exc}"
            return
        self.window = solved
        self.pairs.append(pd)
        diag.used = True
        self.normal = solved.normal.copy()
        self.height = solved.height
        diag.window_normal = self.normal.tolist()
        diag.window_height = self.height
        self._assemble(diag)

    def _assemble(self, diag):
        cfg = self.cfg.optimizer
        t_star = sum(self.window.translations)
        e_star = sum(p.expected_displacement for p in self.pairs)
        R_w = rotation_with_heading(self.window.normal, t_star, e_star)
        t_w = np.array([self.factory_t[0], self.factory_t[1], self.window.height])
        self.samples.append((R_w, t_w))
        R_avg = average_rotations([s[0] for s in self.samples])
        t_avg = average_translations([s[1] for s in self.samples])
        self.R, self.t = R_avg, t_avg
        xi_avg = xi_from(R_avg, t_avg)
        self.report.final = {"timestamp": diag.timestamp, "keyframe": diag.keyframe, "xi": xi_avg.tolist(), "segment": self.segment, "reported": False}

        pd = self.pairs[-1]
        if pd.raw is not None:
            R_p = rotation_with_heading(pd.raw.normal, pd.pose.translation, pd.expected_displacement)
            self.pair_xi.append(xi_from(R_p, [self.factory_t[0], self.factory_t[1], pd.raw.height]))
        xs = np.array(self.pair_xi)
        if len(xs) < cfg.min_z_samples:
            return
        if cfg.ztest_mode == "drift":
            half = len(xs) // 2
            ref, test = xs[:half].mean(axis=0), xs[half:]
        else:
            ref, test = np.asarray(cfg.xi_d, dtype=float), xs
        zt = z_test(test, ref, cfg.alpha)
        if zt.report:
            self.report.events.append(ReportEvent(diag.timestamp, diag.keyframe, xi_avg.tolist(), zt.z.tolist(), zt.n, self.segment))
            self.report.final["reported"] = True

    # -- driver ---------------------------------------------------------------

    def run(self) -> CalibrationReport:
        kfs = select_keyframes(self.sc, self.cfg, self.odo)
        try:
            for n in range(1, len(kfs)):
                self.process_pair(n - 1, n, kfs[n - 1], kfs[n])
        except CalibrationError as exc:
            log.warning("pipeline aborted: %s", exc)
            self.report.aborted = True
            self.report.abort_reason = f"{type(exc).__name__}: {exc}"
        self._flush_window()
        return self.report


def _critical(alpha):
    from .optimizer import critical_value

    return critical_value(alpha)


def run_pipeline(scenario, config: PipelineConfig | None = None) -> CalibrationReport:
    return CalibrationPipeline(scenario, config).run()

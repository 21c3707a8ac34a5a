"""Evaluation metrics: in-camera transfer error, cross-camera residual, truth deltas."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMatches, EmptySet, NoSecondCamera
from .geom import CameraIntrinsics, RigidTransform, compose, invert, mounting_angles, rotation_from_mounting, skew


def metric_transfer_error(H, uv_k, uv_k1) -> float:
    """Mean transfer residual norm of one pair's road matches under ``H``."""
    uv_k = np.asarray(uv_k, dtype=float).reshape(-1, 2)
    uv_k1 = np.asarray(uv_k1, dtype=float).reshape(-1, 2)
    if len(uv_k) == 0:
        raise EmptySet("transfer error needs at least one match")
    x = np.column_stack([uv_k, np.ones(len(uv_k))]) @ np.asarray(H, dtype=float).T
    r = uv_k1 - x[:, :2] / x[:, 2:3]
    return float(np.mean(np.linalg.norm(r, axis=1)))


def transfer_errors(report) -> np.ndarray:
    """Per-pair transfer error recomputed from the report's stored homographies."""
    return np.array([metric_transfer_error(p.homography, p.uv_k, p.uv_k1) for p in report.pairs if len(p.uv_k)])


def cross_fundamental(calib_front: RigidTransform, calib_second: RigidTransform, K_front: CameraIntrinsics, K_second: CameraIntrinsics):
    """F with ``q^T F p = 0`` for a front pixel ``p`` and second-camera pixel ``q``.

    Both calibrations map camera coordinates into the ground frame.
    """
    T = compose(invert(calib_second), calib_front)  # front camera -> second camera
    E = skew(T.translation) @ T.rotation
    return K_second.K_inv.T @ E @ K_front.K_inv


def metric_residual_error(cross_matches, calib_front, calib_second, K_front, K_second=None) -> float:
    """Mean symmetric squared epipolar point-line distance across two cameras.

    ``cross_matches`` rows are ``(u_front, v_front, u_second, v_second)``; a
    leading track-id column (as stored by the simulator) is ignored.
    """
    if calib_second is None:
        raise NoSecondCamera("no second camera calibration")
    K_second = K_front if K_second is None else K_second
    m = np.asarray(cross_matches, dtype=float)
    if m.size == 0:
        raise EmptyMatches("no cross-camera matches")
    m = m.reshape(len(m), -1)[:, -4:]
    F = cross_fundamental(calib_front, calib_second, K_front, K_second)
    p = np.column_stack([m[:, :2], np.ones(len(m))])
    q = np.column_stack([m[:, 2:], np.ones(len(m))])
    lq = p @ F.T  # lines in the second image
    lp = q @ F  # lines in the front image
    e = np.einsum("ij,ij->i", q, lq)
    d2 = e**2 / (lq[:, 0] ** 2 + lq[:, 1] ** 2) + e**2 / (lp[:, 0] ** 2 + lp[:, 1] ** 2)
    return float(np.mean(d2))


def xi_to_transform(xi) -> RigidTransform:
    xi = np.asarray(xi, dtype=float)
    return RigidTransform(rotation_from_mounting(xi[:3]), xi[3:])


def _wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class TruthDeltas:
    roll: float  # degrees
    pitch: float
    yaw: float
    height: float  # cm
    count: int

    def as_dict(self):
        return {"delta_r_deg": self.roll, "delta_p_deg": self.pitch, "delta_y_deg": self.yaw, "delta_h_cm": self.height, "count": self.count}


def truth_xi(truth, t):
    T = truth.extrinsic_at(float(t))
    return np.concatenate([mounting_angles(T.rotation), T.translation])


def compare_to_truth(events, truth) -> TruthDeltas:
    """Mean absolute Euler and height differences against the truth active at each event.

    ``events`` are report events (anything with ``timestamp`` and ``xi``).
    """
    if not events:
        return TruthDeltas(float("nan"), float("nan"), float("nan"), float("nan"), 0)
    d = np.array([np.asarray(e.xi, dtype=float) - truth_xi(truth, e.timestamp) for e in events])
    ang = np.degrees(np.abs(_wrap(d[:, :3]))).mean(axis=0)
    return TruthDeltas(float(ang[0]), float(ang[1]), float(ang[2]), float(100.0 * np.abs(d[:, 5]).mean()), len(events))


def residual_errors(report, scenario, frames_by_keyframe=None) -> np.ndarray:
    """Cross-camera residual of each report event, using the event's calibration."""
    if scenario.second_camera is None:
        raise NoSecondCamera("scenario has no second camera")
    frame_of = frames_by_keyframe or {k.keyframe: k.frame for k in report.keyframes}
    out = []
    for e in report.events:
        kf = scenario.keyframes[frame_of[e.keyframe]]
        if kf.cross is None or len(kf.cross) == 0:
            continue
        out.append(metric_residual_error(kf.cross, xi_to_transform(e.xi), scenario.second_camera.extrinsic, scenario.intrinsics, scenario.second_camera.intrinsics))
    return np.array(out)


def histogram(values, bins=20, upper=None):
    """Counts over ``bins`` equal bins on [0, upper]; counts sum to ``len(values)``."""
    v = np.asarray(values, dtype=float)
    if upper is None:
        upper = float(v.max()) if v.size else 1.0
    upper = upper if upper > 0 else 1.0
    counts, edges = np.histogram(np.clip(v, 0.0, upper), bins=bins, range=(0.0, upper))
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def summarize(report, scenario) -> dict:
    """Summary metrics of a calibration report against its scenario."""
    ef = transfer_errors(report)
    out = {
        "schema_version": 1,
        "events": len(report.events),
        "failures": len(report.failures),
        "truth": compare_to_truth(report.events, scenario.truth).as_dict(),
        "transfer_error": {"per_pair": ef.tolist(), "histogram": histogram(ef)},
    }
    if report.final is not None:
        d = np.asarray(report.final["xi"]) - truth_xi(scenario.truth, report.final["timestamp"])
        out["final_error"] = {"angles_deg": np.degrees(_wrap(d[:3])).tolist(), "height_cm": float(100 * d[5])}
    if scenario.second_camera is not None:
        ep = residual_errors(report, scenario)
        out["residual_error"] = {"per_event": ep.tolist(), "histogram": histogram(ep)}
    return out

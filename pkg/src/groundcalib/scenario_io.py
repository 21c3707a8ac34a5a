"""Scenario files: JSON text, lossless for every numeric field.

Floats are written with ``repr`` (shortest round-trip form, at most 17
significant digits) and timestamps as decimal strings formatted with
``.17g``, so ``import_scenario(export_scenario(s))`` reproduces ``s`` bit for
bit.
"""

from __future__ import annotations

import json
import math
import re
from pathlib import Path

import numpy as np

from .errors import MalformedField, SchemaVersionMismatch, ScenarioError
from .geom import CameraIntrinsics, RigidTransform
from .odometry import VehicleParams, WheelSample
from .simulator import (
    ExtrinsicPerturbation,
    KeyframeObservations,
    Scenario,
    ScenarioTruth,
    SecondCamera,
)

SCHEMA_VERSION = 1


def _ts(x) -> str:
    return format(float(x), ".17g")


def _transform(T: RigidTransform):
    return {"rotation": np.asarray(T.rotation).tolist(), "translation": np.asarray(T.translation).tolist()}


def _intrinsics(K: CameraIntrinsics):
    return {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height}


def scenario_to_dict(sc: Scenario) -> dict:
    tr = sc.truth
    d = {
        "schema_version": SCHEMA_VERSION,
        "intrinsics": _intrinsics(sc.intrinsics),
        "vehicle": {"L": sc.vehicle_params.L, "L_r": sc.vehicle_params.L_r},
        "wheel_samples": {
            "timestamp": [_ts(w.timestamp) for w in sc.wheel_samples],
            "speed": [float(w.speed) for w in sc.wheel_samples],
            "steering_angle": [float(w.steering_angle) for w in sc.wheel_samples],
        },
        "keyframes": [
            {
                "timestamp": _ts(kf.timestamp),
                "track_ids": kf.track_ids.tolist(),
                "uv": kf.uv.tolist(),
                "cross": None if kf.cross is None else kf.cross.tolist(),
            }
            for kf in sc.keyframes
        ],
        "truth": {
            "nominal_extrinsic": _transform(tr.nominal_extrinsic),
            "schedule": [
                {"time": _ts(p.time), "angles": [float(a) for a in p.angles], "height": float(p.height), "ramp": float(p.ramp)}
                for p in tr.schedule
            ],
            "frame_times": [_ts(t) for t in tr.frame_times],
            "vehicle_poses": np.asarray(tr.vehicle_poses).tolist(),
            "landmarks": np.asarray(tr.landmarks).tolist(),
            "is_ground": [bool(g) for g in tr.is_ground],
        },
        "factory_extrinsic": _transform(sc.factory_extrinsic),
        "second_camera": None
        if sc.second_camera is None
        else {"intrinsics": _intrinsics(sc.second_camera.intrinsics), "extrinsic": _transform(sc.second_camera.extrinsic)},
    }
    return d


def export_scenario(sc: Scenario, path) -> Path:
    p = Path(path)
    text = json.dumps(scenario_to_dict(sc), indent=1, allow_nan=False)
    try:
        p.write_text(text + "\n")
    except OSError as exc:
        raise ScenarioError(f"cannot write {p}: {exc}") from exc
    return p


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------


class _Reader:
    """Field accessors that turn bad content into MalformedField with a location."""

    def __init__(self, text):
        self.text = text

    def locate(self, key):
        """Line/column of the first ``"key":`` in the source, if any."""
        m = re.search(r'"%s"\s*:' % re.escape(str(key)), self.text)
        if m is None:
            return None, None
        line = self.text.count("\n", 0, m.start()) + 1
        col = m.start() - (self.text.rfind("\n", 0, m.start()) + 1) + 1
        return line, col

    def fail(self, path, message):
        key = path.rsplit(".", 1)[-1].split("[")[0]
        line, col = self.locate(key)
        raise MalformedField(message, line=line, column=col, field=path)

    def get(self, d, key, path):
        if not isinstance(d, dict):
            self.fail(path, "expected an object")
        if key not in d:
            self.fail(f"{path}.{key}" if path else key, "missing field")
        return d[key]

    def number(self, v, path, integer=False):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(path, f"expected a number, got {type(v).__name__}")
        if integer and not isinstance(v, int):
            self.fail(path, "expected an integer")
        if not math.isfinite(v):
            self.fail(path, "non-finite number")
        return v

    def timestamp(self, v, path):
        if not isinstance(v, str):
            self.fail(path, "timestamps are decimal strings")
        try:
            x = float(v)
        except ValueError:
            self.fail(path, f"bad timestamp {v!r}")
        if not math.isfinite(x):
            self.fail(path, "non-finite timestamp")
        return x

    def array(self, v, path, shape_tail=(), dtype=float):
        if not isinstance(v, list):
            self.fail(path, "expected an array")
        try:
            a = np.array(v, dtype=dtype)
        except (TypeError, ValueError):
            self.fail(path, "array has non-numeric or ragged entries")
        if len(v) == 0:
            a = a.reshape((0,) + tuple(shape_tail))
        if a.shape[1:] != tuple(shape_tail):
            self.fail(path, f"expected shape (N, {', '.join(map(str, shape_tail))}), got {a.shape}")
        if dtype is float and not np.all(np.isfinite(a)):
            self.fail(path, "non-finite entries")
        return a

    def transform(self, d, path):
        R = self.array(self.get(d, "rotation", path), f"{path}.rotation", (3,))
        t = self.array(self.get(d, "translation", path), f"{path}.translation")
        if R.shape != (3, 3) or t.shape != (3,):
            self.fail(path, "rotation must be 3x3 and translation a 3-vector")
        return RigidTransform(R, t)

    def intrinsics(self, d, path):
        try:
            return CameraIntrinsics(
                *(float(self.number(self.get(d, k, path), f"{path}.{k}")) for k in ("fx", "fy", "cx", "cy")),
                *(int(self.number(self.get(d, k, path), f"{path}.{k}", integer=True)) for k in ("width", "height")),
            )
        except ValueError as exc:
            self.fail(path, str(exc))


def scenario_from_dict(d, text="") -> Scenario:
    r = _Reader(text)
    if not isinstance(d, dict):
        raise MalformedField("top level must be an object", line=1, column=1)
    version = r.get(d, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")

    K = r.intrinsics(r.get(d, "intrinsics", ""), "intrinsics")
    veh = r.get(d, "vehicle", "")
    try:
        vp = VehicleParams(float(r.number(r.get(veh, "L", "vehicle"), "vehicle.L")), float(r.number(r.get(veh, "L_r", "vehicle"), "vehicle.L_r")))
    except ValueError as exc:
        r.fail("vehicle", str(exc))

    ws = r.get(d, "wheel_samples", "")
    ts = [r.timestamp(x, f"wheel_samples.timestamp[{i}]") for i, x in enumerate(r.get(ws, "timestamp", "wheel_samples"))]
    sp = r.array(r.get(ws, "speed", "wheel_samples"), "wheel_samples.speed")
    st = r.array(r.get(ws, "steering_angle", "wheel_samples"), "wheel_samples.steering_angle")
    if not len(ts) == len(sp) == len(st):
        r.fail("wheel_samples", "timestamp, speed and steering_angle lengths differ")
    try:
        wheel = [WheelSample(t, float(v), float(a)) for t, v, a in zip(ts, sp, st)]
    except ValueError as exc:
        r.fail("wheel_samples.steering_angle", str(exc))
    if any(b.timestamp < a.timestamp for a, b in zip(wheel, wheel[1:])):
        r.fail("wheel_samples.timestamp", "timestamps must be non-decreasing")

    kfs_raw = r.get(d, "keyframes", "")
    if not isinstance(kfs_raw, list):
        r.fail("keyframes", "expected an array")
    keyframes = []
    for i, kf in enumerate(kfs_raw):
        p = f"keyframes[{i}]"
        t = r.timestamp(r.get(kf, "timestamp", p), f"{p}.timestamp")
        ids = r.array(r.get(kf, "track_ids", p), f"{p}.track_ids", dtype=np.int64)
        uv = r.array(r.get(kf, "uv", p), f"{p}.uv", (2,))
        if ids.ndim != 1 or len(ids) != len(uv):
            r.fail(f"{p}.track_ids", "one track id per observation is required")
        cross = kf.get("cross")
        cross = None if cross is None else r.array(cross, f"{p}.cross", (5,))
        keyframes.append(KeyframeObservations(t, ids, uv, cross))
    if any(b.timestamp < a.timestamp for a, b in zip(keyframes, keyframes[1:])):
        r.fail("keyframes.timestamp", "keyframe timestamps must be non-decreasing")

    tr = r.get(d, "truth", "")
    nominal = r.transform(r.get(tr, "nominal_extrinsic", "truth"), "truth.nominal_extrinsic")
    schedule = []
    for i, p in enumerate(r.get(tr, "schedule", "truth")):
        q = f"truth.schedule[{i}]"
        angles = r.array(r.get(p, "angles", q), f"{q}.angles")
        if angles.shape != (3,):
            r.fail(f"{q}.angles", "expected 3 angles")
        schedule.append(
            ExtrinsicPerturbation(
                r.timestamp(r.get(p, "time", q), f"{q}.time"),
                tuple(float(a) for a in angles),
                float(r.number(r.get(p, "height", q), f"{q}.height")),
                float(r.number(r.get(p, "ramp", q), f"{q}.ramp")),
            )
        )
    frame_times = np.array([r.timestamp(x, f"truth.frame_times[{i}]") for i, x in enumerate(r.get(tr, "frame_times", "truth"))], dtype=float)
    poses = r.array(r.get(tr, "vehicle_poses", "truth"), "truth.vehicle_poses", (3,))
    landmarks = r.array(r.get(tr, "landmarks", "truth"), "truth.landmarks", (3,))
    labels = r.get(tr, "is_ground", "truth")
    if not isinstance(labels, list) or not all(isinstance(x, bool) for x in labels):
        r.fail("truth.is_ground", "expected an array of booleans")
    is_ground = np.array(labels, dtype=bool)
    if len(is_ground) != len(landmarks):
        r.fail("truth.is_ground", "one label per landmark is required")
    if len(poses) != len(frame_times):
        r.fail("truth.vehicle_poses", "one pose per frame time is required")
    for i, kf in enumerate(keyframes):
        if len(kf.track_ids) and (kf.track_ids.min() < 0 or kf.track_ids.max() >= len(is_ground)):
            r.fail(f"keyframes[{i}].track_ids", "track id without a truth label")
    truth = ScenarioTruth(nominal, tuple(schedule), frame_times, poses, landmarks, is_ground)

    factory = d.get("factory_extrinsic")
    factory = nominal if factory is None else r.transform(factory, "factory_extrinsic")
    second = d.get("second_camera")
    if second is not None:
        second = SecondCamera(r.intrinsics(r.get(second, "intrinsics", "second_camera"), "second_camera.intrinsics"), r.transform(r.get(second, "extrinsic", "second_camera"), "second_camera.extrinsic"))
    return Scenario(K, vp, wheel, keyframes, truth, factory, second)


def import_scenario(path) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {p}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedField(exc.msg, line=exc.lineno, column=exc.colno) from exc
    return scenario_from_dict(d, text)


def scenarios_equal(a: Scenario, b: Scenario) -> bool:
    """Bitwise equality of every numeric field."""
    return scenario_to_dict(a) == scenario_to_dict(b) and _bitwise(a, b)


def _bitwise(a, b):
    pairs = [(a.truth.frame_times, b.truth.frame_times), (a.truth.vehicle_poses, b.truth.vehicle_poses), (a.truth.landmarks, b.truth.landmarks)]
    for ka, kb in zip(a.keyframes, b.keyframes):
        pairs += [(ka.uv, kb.uv), (ka.track_ids, kb.track_ids)]
    return all(x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in pairs)

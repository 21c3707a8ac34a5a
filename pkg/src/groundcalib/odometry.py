"""Wheel odometry with a kinematic bicycle model.

Speeds and steering angles arrive at the wheel rate; poses are integrated in a
planar world frame anchored at the starting position of the vehicle.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .geom import RigidTransform, compose, invert, so3_exp


@dataclass(frozen=True)
class WheelSample:
    timestamp: float
    speed: float
    steering_angle: float

    def __post_init__(self):
        if not abs(self.steering_angle) < math.pi / 2:
            raise ValueError("steering angle must lie in (-pi/2, pi/2)")


@dataclass(frozen=True)
class VehicleParams:
    L: float = 2.8
    L_r: float = 1.4

    def __post_init__(self):
        if not 0.0 < self.L_r < self.L:
            raise ValueError("need 0 < L_r < L")


@dataclass(frozen=True, eq=False)
class VehicleState:
    position: np.ndarray
    velocity: np.ndarray
    heading_rotation: np.ndarray
    heading_angle: float
    timestamp: float = 0.0

    @classmethod
    def at_rest(cls, timestamp=0.0):
        return cls(np.zeros(3), np.zeros(3), np.eye(3), 0.0, timestamp)


class FrameTag(str, Enum):
    VEHICLE_COG = "vehicle_cog"
    CAMERA = "camera"


@dataclass(frozen=True, eq=False)
class RelativeMotion:
    """Motion between two consecutive keyframes.

    ``rotation`` maps frame-k coordinates to frame k+1 (``R_{k+1}^T R_k``);
    ``translation`` is the displacement of the frame origin from k to k+1,
    expressed in frame k. Hence a static point moves as
    ``X_{k+1} = rotation @ (X_k - translation)``.
    """

    rotation: np.ndarray
    translation: np.ndarray
    frame_tag: FrameTag

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "frame_tag", FrameTag(self.frame_tag))

    @classmethod
    def identity(cls, frame_tag=FrameTag.CAMERA):
        return cls(np.eye(3), np.zeros(3), frame_tag)

    def as_transform(self) -> RigidTransform:
        """Point transport from frame k to frame k+1."""
        return RigidTransform(self.rotation, -self.rotation @ self.translation)

    @classmethod
    def from_transform(cls, T: RigidTransform, frame_tag) -> "RelativeMotion":
        return cls(T.rotation, -T.rotation.T @ T.translation, frame_tag)

    def then(self, nxt: "RelativeMotion") -> "RelativeMotion":
        """Chain k->k+1 with k+1->k+2."""
        if nxt.frame_tag != self.frame_tag:
            raise ValueError("cannot chain motions in different frames")
        return RelativeMotion(
            nxt.rotation @ self.rotation,
            self.translation + self.rotation.T @ nxt.translation,
            self.frame_tag,
        )

    def transport(self, points):
        P = np.asarray(points, dtype=float)
        return (P - self.translation) @ self.rotation.T


def slip_angle(steering_angle, params: VehicleParams):
    return math.atan(params.L_r * math.tan(steering_angle) / params.L)


def yaw_rate(speed, steering_angle, params: VehicleParams):
    return speed * math.sin(slip_angle(steering_angle, params)) / params.L_r


def integrate_step(state: VehicleState, sample: WheelSample, params: VehicleParams, dt: float, next_speed=None, next_steering=None) -> VehicleState:
    """One bicycle-model step of length ``dt`` driven by ``sample``.

    ``next_speed`` and ``next_steering`` are the inputs at the end of the
    step. The longitudinal acceleration is the forward difference of the
    speeds (zero when omitted, at the end of the stream). The yaw rate is
    averaged over both ends and the displacement follows the course at mid
    step, which keeps the scheme second order in ``dt``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    v1 = sample.speed if next_speed is None else next_speed
    d1 = sample.steering_angle if next_steering is None else next_steering
    beta0 = slip_angle(sample.steering_angle, params)
    beta1 = slip_angle(d1, params)
    omega = 0.5 * (sample.speed * math.sin(beta0) + v1 * math.sin(beta1)) / params.L_r
    course = state.heading_angle + 0.5 * omega * dt + 0.5 * (beta0 + beta1)
    direction = np.array([math.cos(course), math.sin(course), 0.0])
    accel = (v1 - sample.speed) / dt
    # v dt + a dt^2 / 2 along the mid-step course
    position = state.position + direction * (sample.speed * dt + accel * dt * dt / 2.0)
    heading = state.heading_angle + omega * dt
    velocity = v1 * np.array([math.cos(heading + beta1), math.sin(heading + beta1), 0.0])
    rotation = state.heading_rotation @ so3_exp(np.array([0.0, 0.0, omega * dt]))
    return VehicleState(position, velocity, rotation, heading, state.timestamp + dt)


class OdometryIntegrator:
    """Integrates a wheel-sample stream and answers pose queries at any time.

    Full steps run sample to sample; a query between two samples takes a
    partial step from the earlier sample towards the linearly interpolated
    speed and steering at the query time.
    """

    def __init__(self, samples: Sequence[WheelSample], params: VehicleParams):
        if not samples:
            raise ValueError("empty wheel stream")
        times = [s.timestamp for s in samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("wheel timestamps must be strictly increasing")
        self.samples = list(samples)
        self.params = params
        self.times = times
        self.states = [VehicleState.at_rest(times[0])]
        for i in range(len(samples) - 1):
            dt = times[i + 1] - times[i]
            nxt = samples[i + 1]
            st = integrate_step(self.states[-1], samples[i], params, dt, nxt.speed, nxt.steering_angle)
            # pin the clock to the sample times so long streams do not drift
            self.states.append(VehicleState(st.position, st.velocity, st.heading_rotation, st.heading_angle, times[i + 1]))

    def sample_index(self, t):
        i = bisect.bisect_right(self.times, t) - 1
        return max(0, min(i, len(self.times) - 1))

    def state_at(self, t) -> VehicleState:
        i = self.sample_index(t)
        base = self.states[i]
        dt = t - self.times[i]
        if dt <= 0:
            return base
        nxt = self.sample_at(t)
        st = integrate_step(base, self.samples[i], self.params, dt, nxt.speed, nxt.steering_angle)
        return VehicleState(st.position, st.velocity, st.heading_rotation, st.heading_angle, t)

    def sample_at(self, t) -> WheelSample:
        """Linearly interpolated speed and steering at ``t``."""
        i = self.sample_index(t)
        s = self.samples[i]
        if i + 1 >= len(self.samples) or t <= self.times[i]:
            return WheelSample(t, s.speed, s.steering_angle)
        w = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        n = self.samples[i + 1]
        return WheelSample(t, s.speed + w * (n.speed - s.speed), s.steering_angle + w * (n.steering_angle - s.steering_angle))


def integrate(samples: Sequence[WheelSample], params: VehicleParams):
    """Pose stream at every sample time."""
    return OdometryIntegrator(samples, params).states


def relative_vehicle_motion(state_k: VehicleState, state_k1: VehicleState) -> RelativeMotion:
    Rk, Rk1 = state_k.heading_rotation, state_k1.heading_rotation
    return RelativeMotion(Rk1.T @ Rk, Rk.T @ (state_k1.position - state_k.position), FrameTag.VEHICLE_COG)


def vehicle_to_camera_motion(motion: RelativeMotion, extrinsic: RigidTransform) -> RelativeMotion:
    """Conjugate a vehicle motion into the camera frame.

    ``extrinsic`` maps vehicle (CoG) coordinates into camera coordinates.
    """
    if motion.frame_tag != FrameTag.VEHICLE_COG:
        raise ValueError("expected a vehicle-frame motion")
    T = compose(extrinsic, compose(motion.as_transform(), invert(extrinsic)))
    return RelativeMotion.from_transform(T, FrameTag.CAMERA)


def camera_to_vehicle_motion(motion: RelativeMotion, extrinsic: RigidTransform) -> RelativeMotion:
    if motion.frame_tag != FrameTag.CAMERA:
        raise ValueError("expected a camera-frame motion")
    T = compose(invert(extrinsic), compose(motion.as_transform(), extrinsic))
    return RelativeMotion.from_transform(T, FrameTag.VEHICLE_COG)

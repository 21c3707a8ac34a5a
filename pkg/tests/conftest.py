import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from groundcalib import simulator as sim
from groundcalib.geom import CameraIntrinsics

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def intrinsics():
    return CameraIntrinsics(420.0, 420.0, 406.0, 270.0, 812, 540)


@pytest.fixture(scope="session")
def clean_scenario():
    """Noise-free 2 s straight drive."""
    return sim.generate(sim.ScenarioConfig(seed=11, duration=2.0))


@pytest.fixture(scope="session")
def noisy_scenario():
    return sim.generate(sim.ScenarioConfig(seed=12, duration=2.0, pixel_noise_sigma=0.5, speed_sigma=0.1))


def random_rotation(rng, scale=np.pi):
    from groundcalib.geom import so3_exp

    w = rng.standard_normal(3)
    w *= rng.uniform(0, scale) / np.linalg.norm(w)
    return so3_exp(w)


def pair_matches(sc, i, j, ground_only=True):
    """Arrays (track_ids, uv_i, uv_j) of tracks seen in frames i and j."""
    a, b = sc.keyframes[i], sc.keyframes[j]
    la, lb = a.lookup(), b.lookup()
    ids = [t for t in la if t in lb and (not ground_only or sc.truth.is_ground[t])]
    return np.array(ids), a.uv[[la[t] for t in ids]], b.uv[[lb[t] for t in ids]]


def camera_motion(sc, i, j):
    """True camera RelativeMotion from frame i to frame j."""
    from groundcalib.odometry import FrameTag, RelativeMotion

    Ti, Tj = sim.true_camera_pose(sc, i), sim.true_camera_pose(sc, j)
    R = Tj.rotation.T @ Ti.rotation
    d = Ti.rotation.T @ (Tj.translation - Ti.translation)
    return RelativeMotion(R, d, FrameTag.CAMERA)


def true_plane(sc, i):
    """(normal in camera, height) active at frame i."""
    E = sc.truth.extrinsic_at(float(sc.truth.frame_times[i]))
    return E.rotation[2].copy(), float(E.translation[2])

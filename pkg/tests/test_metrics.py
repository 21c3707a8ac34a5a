import math
from types import SimpleNamespace

import numpy as np
import pytest

from groundcalib import simulator as sim
from groundcalib.errors import EmptyMatches, EmptySet, NoSecondCamera
from groundcalib.geom import CameraIntrinsics, RigidTransform, compose, matrix_from_euler
from groundcalib.metrics import (
    compare_to_truth,
    cross_fundamental,
    histogram,
    metric_residual_error,
    metric_transfer_error,
    truth_xi,
)

K = CameraIntrinsics(420, 420, 406, 270, 812, 540)


def test_transfer_error_examples():
    uv = np.array([[100.0, 200.0], [300.0, 50.0]])
    assert metric_transfer_error(np.eye(3), uv, uv) == 0.0
    assert metric_transfer_error(np.eye(3), uv, uv + [3.0, 4.0]) == pytest.approx(5.0)
    # homogeneous scale of H does not matter
    H = np.array([[1, 0, 10], [0, 1, 0], [0, 0, 1.0]])
    assert metric_transfer_error(7 * H, uv, uv + [10, 0]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(EmptySet):
        metric_transfer_error(np.eye(3), np.zeros((0, 2)), np.zeros((0, 2)))


def test_transfer_error_matches_recomputation():
    rng = np.random.default_rng(0)
    H = np.eye(3) + rng.normal(0, 1e-3, (3, 3))
    uv = rng.uniform(0, 500, (30, 2))
    uv1 = uv + rng.normal(0, 1, (30, 2))
    manual = np.mean([np.hypot(*(b - (H @ [a[0], a[1], 1])[:2] / (H @ [a[0], a[1], 1])[2])) for a, b in zip(uv, uv1)])
    assert metric_transfer_error(H, uv, uv1) == pytest.approx(manual, rel=1e-12)


def test_single_match_closed_form():
    # second camera shifted sideways: epipolar lines are image rows
    front = RigidTransform.identity()
    second = RigidTransform(np.eye(3), [0.5, 0.0, 0.0])
    m = [[100.0, 200.0, 140.0, 203.0]]
    assert metric_residual_error(m, front, second, K) == pytest.approx(2 * 3.0**2, rel=1e-9)
    # a leading track-id column is ignored
    assert metric_residual_error([[7] + m[0]], front, second, K) == pytest.approx(18.0, rel=1e-9)


def test_cross_fundamental_direction():
    rng = np.random.default_rng(1)
    front = RigidTransform(matrix_from_euler((0.01, 0.2, -0.1)), [1.8, 0, 1.5])
    second = RigidTransform(matrix_from_euler((0.0, 0.15, 0.5)), [1.5, 0.6, 1.4])
    P = rng.uniform([-5, -5, 0], [5, 5, 2], (10, 3)) + [12, 3, 0]
    to_cam = lambda T, X: (X - T.translation) @ T.rotation
    p = to_cam(front, P) @ K.K.T
    q = to_cam(second, P) @ K.K.T
    F = cross_fundamental(front, second, K, K)
    e = np.einsum("ij,jk,ik->i", q / q[:, 2:], F, p / p[:, 2:]) / np.linalg.norm(F)
    assert np.max(np.abs(e)) < 1e-12


def two_camera_scene():
    cfg = sim.ScenarioConfig(seed=4, duration=0.5, second_camera=sim.MountSpec(angles=(0.0, 0.2, 0.6), translation=(1.6, 0.5, 1.4)))
    return sim.generate(cfg)


def test_residual_zero_at_truth_and_grows_with_yaw():
    sc = two_camera_scene()
    kf = sc.keyframes[3]
    front, second = sc.truth.nominal_extrinsic, sc.second_camera.extrinsic
    e0 = metric_residual_error(kf.cross, front, second, K)
    assert e0 < 1e-16
    bumped = compose(RigidTransform(matrix_from_euler((0, 0, math.radians(0.5))), np.zeros(3)), front)
    e1 = metric_residual_error(kf.cross, bumped, second, K)
    assert e1 > 1.0
    with pytest.raises(NoSecondCamera):
        metric_residual_error(kf.cross, front, None, K)
    with pytest.raises(EmptyMatches):
        metric_residual_error(np.zeros((0, 5)), front, second, K)


def test_compare_to_truth_examples():
    sc = two_camera_scene()
    xi = truth_xi(sc.truth, 0.1)
    ev = lambda d: SimpleNamespace(timestamp=0.1, xi=(xi + d).tolist())
    out = compare_to_truth([ev([0, math.radians(0.2), 0, 0, 0, 0.01]), ev([0, -math.radians(0.4), 0, 0, 0, 0.0])], sc.truth)
    assert out.count == 2 and out.roll == pytest.approx(0, abs=1e-12) and out.yaw == pytest.approx(0, abs=1e-12)
    assert out.pitch == pytest.approx(0.3) and out.height == pytest.approx(0.5)
    # angles are wrapped before averaging
    wrapped = compare_to_truth([ev([2 * math.pi + 1e-3, 0, 0, 0, 0, 0])], sc.truth)
    assert wrapped.roll == pytest.approx(math.degrees(1e-3))
    empty = compare_to_truth([], sc.truth)
    assert empty.count == 0 and math.isnan(empty.pitch)


def test_histogram_counts_sum_to_length():
    rng = np.random.default_rng(2)
    v = rng.exponential(1.0, 137)
    h = histogram(v, bins=10, upper=2.0)
    assert sum(h["counts"]) == 137 and len(h["edges"]) == 11 and h["edges"][-1] == 2.0
    assert sum(histogram([])["counts"]) == 0

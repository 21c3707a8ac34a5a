import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize
from scipy.special import erf

from groundcalib.errors import DegenerateGeometry, RankDeficientSum
from groundcalib.geom import rotation_angle, rotation_from_mounting, so3_exp
from groundcalib.optimizer.calibration import (
    CalibrationResult,
    average_rotations,
    average_translations,
    build_rotation,
    critical_value,
    heading_yaw,
    rotation_with_heading,
    xi_from,
    z_test,
)

from conftest import random_rotation

R_TRUE = rotation_from_mounting((0.01, 0.2, -0.03))  # camera -> ground


def test_build_rotation_recovers_straight_mount():
    # forward motion: the camera displacement is the ground x axis seen from the camera
    R = build_rotation(R_TRUE[2], R_TRUE[0] * 0.6)
    assert np.allclose(R, R_TRUE, atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_x_cross_z_row_order_is_a_reflection():
    """Rows [x; x cross z; z] give det -1 with a right-handed z-up ground frame."""
    nx, nz = R_TRUE[0], R_TRUE[2]
    swapped = np.vstack([nx, np.cross(nx, nz), nz])
    assert np.linalg.det(swapped) == pytest.approx(-1.0)
    assert np.allclose(swapped, np.diag([1, -1, 1]) @ build_rotation(nz, nx))


@given(st.floats(0.1, 10.0), st.floats(0.1, 10.0), st.integers(0, 2**31 - 1))
def test_build_rotation_scale_invariant_and_orthonormal(sg, st_, seed):
    rng = np.random.default_rng(seed)
    g = R_TRUE[2] + rng.normal(0, 0.05, 3)
    t = R_TRUE[0] + rng.normal(0, 0.05, 3)
    R = build_rotation(g, t)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12) and np.linalg.det(R) == pytest.approx(1.0)
    assert np.allclose(build_rotation(sg * g, st_ * t), R, atol=1e-12)
    # idempotent: feeding back its own rows reproduces it
    assert np.allclose(build_rotation(R[2], R[0]), R, atol=1e-12)


def test_build_rotation_degenerate_inputs():
    with pytest.raises(DegenerateGeometry):
        build_rotation([0, 0, 1.0], [0, 0, 0])
    with pytest.raises(DegenerateGeometry):
        build_rotation([0, 0, 1.0], [0, 0, 2.0])
    with pytest.raises(DegenerateGeometry):
        build_rotation([0, 0, 0.0], [1, 0, 0])


def test_heading_correction_on_a_curve():
    for yaw in (0.0, 0.05, -0.3):
        d_ground = 0.7 * np.array([math.cos(yaw), math.sin(yaw), 0.0])
        d_cam = R_TRUE.T @ d_ground
        assert heading_yaw(d_ground) == pytest.approx(yaw)
        assert np.allclose(rotation_with_heading(R_TRUE[2], d_cam, d_ground), R_TRUE, atol=1e-12)
        off = rotation_angle(build_rotation(R_TRUE[2], d_cam).T @ R_TRUE)
        assert off == pytest.approx(abs(yaw), abs=1e-12)
    assert np.allclose(rotation_with_heading(R_TRUE[2], R_TRUE[0]), R_TRUE)


def chordal_oracle(Rs):
    """Brute-force minimiser of sum ||R - R_i||_F^2 over a rotation-vector chart."""
    R0 = Rs[0]
    f = lambda w: sum(np.sum((R0 @ so3_exp(w) - R) ** 2) for R in Rs)
    w = minimize(f, np.zeros(3), method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 20000}).x
    return R0 @ so3_exp(w)


def test_average_rotations_matches_chordal_oracle():
    rng = np.random.default_rng(0)
    base = random_rotation(rng)
    Rs = [base @ so3_exp(rng.normal(0, 0.2, 3)) for _ in range(15)]
    avg = average_rotations(Rs)
    assert rotation_angle(avg.T @ chordal_oracle(Rs)) < 1e-5
    assert np.linalg.det(avg) == pytest.approx(1.0)


def test_average_rotations_det_correction():
    # a reflection-prone set: spread about an axis so the raw SVD projection is improper
    Rs = [so3_exp([0, 0, a]) for a in np.linspace(-2.5, 2.5, 6)] + [so3_exp([math.pi, 0, 0])]
    avg = average_rotations(Rs)
    assert np.linalg.det(avg) == pytest.approx(1.0)
    assert rotation_angle(avg.T @ chordal_oracle(Rs)) < 1e-4


@given(st.integers(0, 2**31 - 1))
def test_average_rotations_order_and_conjugation_invariant(seed):
    rng = np.random.default_rng(seed)
    base = random_rotation(rng)
    Rs = [base @ so3_exp(rng.normal(0, 0.3, 3)) for _ in range(7)]
    avg = average_rotations(Rs)
    assert np.allclose(average_rotations([Rs[i] for i in rng.permutation(7)]), avg, atol=1e-10)
    Q = random_rotation(rng)
    assert np.allclose(average_rotations([Q @ R for R in Rs]), Q @ avg, atol=1e-10)
    assert np.allclose(average_rotations([R @ Q for R in Rs]), avg @ Q, atol=1e-10)
    assert np.allclose(average_rotations([avg]), avg, atol=1e-12)


def test_average_rotations_errors():
    with pytest.raises(ValueError):
        average_rotations([])
    with pytest.raises(RankDeficientSum):
        # the four half-turn group elements sum to zero
        average_rotations([np.eye(3), np.diag([1.0, -1, -1]), np.diag([-1.0, 1, -1]), np.diag([-1.0, -1, 1])])


def test_average_translations():
    assert np.allclose(average_translations([[0, 0, 1], [2, 0, 1]]), [1, 0, 1])
    with pytest.raises(ValueError):
        average_translations([])


def test_calibration_result_xi_round_trip():
    res = CalibrationResult.from_pose(R_TRUE, [1.8, 0, 1.5], 12)
    assert np.allclose(res.xi[:3], (0.01, 0.2, -0.03)) and np.allclose(res.xi[3:], [1.8, 0, 1.5])
    assert np.allclose(xi_from(R_TRUE, [0, 0, 1]), np.r_[0.01, 0.2, -0.03, 0, 0, 1])


# -- z-test -------------------------------------------------------------------


@pytest.mark.parametrize("alpha", [0.01, 0.05, 0.1, 0.32])
def test_critical_value_erf_oracle(alpha):
    c = critical_value(alpha)
    assert erf(c / math.sqrt(2)) == pytest.approx(1 - alpha, abs=1e-12)


def test_critical_value_at_five_percent():
    assert critical_value(0.05) == pytest.approx(1.959964, abs=1e-6)


def test_z_test_statistic_oracle():
    rng = np.random.default_rng(0)
    X = rng.normal([0, 0, 0, 1, 0, 1.5], [0.01, 0.01, 0.01, 0.02, 0.02, 0.01], (40, 6))
    xi_d = np.array([0, 0, 0, 1, 0, 1.5])
    res = z_test(X, xi_d, 0.05)
    manual = [(X[:, i].mean() - xi_d[i]) / math.sqrt(X[:, i].var(ddof=1) / 40) for i in range(6)]
    assert np.allclose(res.z, manual)
    assert res.n == 40 and res.report == bool(np.all(np.abs(manual) < 1.959963984540054))


def test_z_test_rejects_shift_and_floors_variance():
    X = np.tile([0.0, 0, 0, 1, 0, 1.5], (10, 1))
    res = z_test(X, [0, 0, 0, 1, 0, 1.5], 0.05)
    assert res.report and np.all(res.z == 0)
    res = z_test(X, [0, 0, 0, 1, 0, 1.5 + 1e-3], 0.05)
    assert not res.report and np.isfinite(res.z).all()
    with pytest.raises(ValueError):
        z_test(X[:1], X[0], 0.05)
    with pytest.raises(ValueError):
        z_test(X, X[0], 1.0)


def test_z_test_false_alarm_rate_near_alpha():
    rng = np.random.default_rng(1)
    fires = 0
    trials = 2000
    for _ in range(trials):
        z = z_test(rng.normal(0, 1, (30, 1)), [0.0], 0.05)
        fires += not z.report
    # t-distributed statistic with 29 dof; expected rate about 0.06
    assert 0.04 < fires / trials < 0.08

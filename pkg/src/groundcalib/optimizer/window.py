"""Sliding-window refinement of inter-keyframe motion and the road plane.

Each keyframe pair contributes homography transfer residuals of its road
features. The plane is shared by every pair in the window. Old pairs are
folded into a linear prior on the plane by Schur complement.

Plane coordinates live in a fixed gnomonic chart around a reference normal
``n0``: ``n = normalize(n0 + B0 a)`` with ``a`` in R^2, so the plane state is
the Euclidean vector ``(a, h)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import InsufficientFeatures, PointAtInfinity, SingularBlock, SolverDiverged
from ..geom import CameraIntrinsics, GroundPlaneEstimate, euler_from_matrix, orthonormalize, so3_exp
from ..odometry import FrameTag, RelativeMotion

MIN_PAIR_FEATURES = 4


# ---------------------------------------------------------------------------
# Homography
# ---------------------------------------------------------------------------


def homography(motion: RelativeMotion, plane: GroundPlaneEstimate, intrinsics: CameraIntrinsics):
    """Road-induced homography taking pixels of keyframe k to keyframe k+1.

    ``motion.translation`` is the displacement k -> k+1 in frame k, which is
    the translation of frame k+1 seen from frame k.
    """
    if not plane.height > 0:
        raise ValueError("plane height must be positive")
    K = intrinsics.K
    A = np.eye(3) + np.outer(motion.translation, plane.normal) / plane.height
    return K @ motion.rotation @ A @ intrinsics.K_inv


def transfer_residual(H, match) -> np.ndarray:
    """``p_{k+1} - dehomogenize(H p_k)`` in pixels."""
    q = np.asarray(H, dtype=float) @ np.array([match.p_k.u, match.p_k.v, 1.0])
    if q[2] < 1e-12:
        raise PointAtInfinity("transferred point is at or beyond infinity")
    return np.array([match.p_k1.u - q[0] / q[2], match.p_k1.v - q[1] / q[2]])


def transfer_residuals(H, uv_k, uv_k1):
    """Vectorised residuals, shape (N, 2)."""
    x = np.column_stack([uv_k, np.ones(len(uv_k))]) @ np.asarray(H).T
    if np.any(x[:, 2] < 1e-12):
        raise PointAtInfinity("transferred point is at or beyond infinity")
    return uv_k1 - x[:, :2] / x[:, 2:3]


# ---------------------------------------------------------------------------
# State types
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PairObservations:
    """Verified road matches of one keyframe pair."""

    uv_k: np.ndarray
    uv_k1: np.ndarray
    odometry_distance: float
    keyframe: int = -1

    def __post_init__(self):
        self.uv_k = np.asarray(self.uv_k, dtype=float).reshape(-1, 2)
        self.uv_k1 = np.asarray(self.uv_k1, dtype=float).reshape(-1, 2)
        if len(self.uv_k) != len(self.uv_k1):
            raise ValueError("match arrays differ in length")

    def __len__(self):
        return len(self.uv_k)


@dataclass(eq=False)
class WindowState:
    """Per-pair motions plus the shared plane ``(normal, height)``."""

    rotations: list
    translations: list
    normal: np.ndarray
    height: float
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rotations = [np.array(R, dtype=float).reshape(3, 3) for R in self.rotations]
        self.translations = [np.array(t, dtype=float).reshape(3) for t in self.translations]
        n = np.array(self.normal, dtype=float).reshape(3)
        self.normal = n / np.linalg.norm(n)
        self.height = float(self.height)
        if len(self.rotations) != len(self.translations):
            raise ValueError("rotations and translations differ in length")

    def __len__(self):
        return len(self.rotations)

    @property
    def euler(self):
        return [euler_from_matrix(R) for R in self.rotations]

    @property
    def plane(self) -> GroundPlaneEstimate:
        return GroundPlaneEstimate(self.normal, self.height)

    def motion(self, i) -> RelativeMotion:
        return RelativeMotion(self.rotations[i], self.translations[i], FrameTag.CAMERA)

    def copy(self) -> "WindowState":
        return WindowState(list(self.rotations), list(self.translations), self.normal.copy(), self.height, dict(self.info))

    def drop_oldest(self) -> "WindowState":
        return WindowState(self.rotations[1:], self.translations[1:], self.normal, self.height)


def tangent_basis(n0):
    n0 = np.asarray(n0, dtype=float)
    n0 = n0 / np.linalg.norm(n0)
    a = np.array([1.0, 0.0, 0.0]) if abs(n0[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(n0, a)
    b1 /= np.linalg.norm(b1)
    return np.column_stack([b1, np.cross(n0, b1)])


class PlaneChart:
    """Gnomonic chart of unit normals around ``n0``."""

    def __init__(self, n0):
        n0 = np.asarray(n0, dtype=float).reshape(3)
        self.n0 = n0 / np.linalg.norm(n0)
        self.B = tangent_basis(self.n0)

    def to_normal(self, a):
        v = self.n0 + self.B @ a
        return v / np.linalg.norm(v)

    def from_normal(self, n):
        c = float(n @ self.n0)
        if c <= 1e-6:
            raise ValueError("normal outside chart")
        return self.B.T @ n / c

    def jacobian(self, a):
        """d normal / d a, shape (3, 2)."""
        v = self.n0 + self.B @ a
        nv = np.linalg.norm(v)
        n = v / nv
        return (np.eye(3) - np.outer(n, n)) @ self.B / nv


@dataclass(eq=False)
class MarginalPrior:
    """Linear prior ``0.5 * ||H_m x - r_m||^2`` on the plane chart coordinates.

    ``x = (a1, a2, h)`` in the chart centred on ``chart_normal``.
    """

    r_m: np.ndarray
    H_m: np.ndarray
    chart_normal: np.ndarray
    flagged: bool = False

    def __post_init__(self):
        self.r_m = np.asarray(self.r_m, dtype=float).reshape(-1)
        self.H_m = np.asarray(self.H_m, dtype=float).reshape(-1, 3)
        n = np.asarray(self.chart_normal, dtype=float).reshape(3)
        self.chart_normal = n / np.linalg.norm(n)
        if len(self.r_m) != len(self.H_m):
            raise ValueError("r_m and H_m row counts differ")

    @classmethod
    def empty(cls, chart_normal) -> "MarginalPrior":
        return cls(np.zeros(0), np.zeros((0, 3)), chart_normal)

    @property
    def is_empty(self):
        return len(self.r_m) == 0

    @property
    def information(self):
        return self.H_m.T @ self.H_m

    def residual(self, x):
        return self.H_m @ x - self.r_m

    def cost(self, x):
        e = self.residual(x)
        return 0.5 * float(e @ e)


@dataclass(frozen=True)
class OptimizerConfig:
    window_size: int = 10
    averaging_window: int = 20
    huber_delta: Optional[float] = None  # pixels; defaults to 1.345 * feature_cov_px
    max_iterations: int = 50
    convergence_tol: float = 1e-12
    alpha: float = 0.05
    xi_d: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    feature_cov_px: float = 1.0
    odometry_sigma: float = 0.01  # meters, per-pair distance prior
    ztest_mode: str = "drift"  # "drift" or "target"
    min_z_samples: int = 6

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.averaging_window < 1:
            raise ValueError("averaging_window must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.feature_cov_px > 0 or not self.odometry_sigma > 0:
            raise ValueError("noise scales must be positive")
        if len(self.xi_d) != 6:
            raise ValueError("xi_d must have 6 components")
        if self.ztest_mode not in ("drift", "target"):
            raise ValueError("ztest_mode must be 'drift' or 'target'")
        if self.min_z_samples < 2:
            raise ValueError("min_z_samples must be >= 2")

    @property
    def delta(self):
        """Huber threshold in whitened units."""
        d = 1.345 * self.feature_cov_px if self.huber_delta is None else self.huber_delta
        return d / self.feature_cov_px


# ---------------------------------------------------------------------------
# Residual model
# ---------------------------------------------------------------------------


def _rays(pair: PairObservations, intrinsics: CameraIntrinsics):
    return np.column_stack([pair.uv_k, np.ones(len(pair.uv_k))]) @ intrinsics.K_inv.T


def _pair_terms(R, d, n, h, pair: PairObservations, intrinsics: CameraIntrinsics, sigma, x=None):
    """Whitened residuals (2N,) and Jacobians wrt (phi, d) (2N,6), n (2N,3), h (2N,)."""
    if x is None:
        x = _rays(pair, intrinsics)
    s = x @ n / h
    m = x + s[:, None] * d
    y = m @ R.T
    if np.any(y[:, 2] < 1e-12):
        raise PointAtInfinity("transferred point is at or beyond infinity")
    fx, fy = intrinsics.fx, intrinsics.fy
    iz = 1.0 / y[:, 2]
    u = fx * y[:, 0] * iz + intrinsics.cx
    v = fy * y[:, 1] * iz + intrinsics.cy
    r = np.column_stack([pair.uv_k1[:, 0] - u, pair.uv_k1[:, 1] - v]) / sigma

    # d(residual)/dy rows, applied column-block by column-block
    a_u = -fx * iz / sigma
    a_v = -fy * iz / sigma
    bu = y[:, 0] * iz
    bv = y[:, 1] * iz

    def proj(Jy):  # Jy: (N, 3, k) -> (N, 2, k)
        out = np.empty((Jy.shape[0], 2, Jy.shape[2]))
        out[:, 0] = a_u[:, None] * (Jy[:, 0] - bu[:, None] * Jy[:, 2])
        out[:, 1] = a_v[:, None] * (Jy[:, 1] - bv[:, None] * Jy[:, 2])
        return out

    N = len(x)
    Jy = np.empty((N, 3, 10))
    # rotation (right perturbation): -R [m]_x
    zero = np.zeros(N)
    cols = (np.column_stack([zero, m[:, 2], -m[:, 1]]), np.column_stack([-m[:, 2], zero, m[:, 0]]), np.column_stack([m[:, 1], -m[:, 0], zero]))
    for i, c in enumerate(cols):
        Jy[:, :, i] = -(c @ R.T)
    Jy[:, :, 3:6] = s[:, None, None] * R[None]
    Rd = R @ d
    Jy[:, :, 6:9] = (Rd / h)[None, :, None] * x[:, None, :]
    Jy[:, :, 9] = -(s / h)[:, None] * Rd[None, :]
    Jr = proj(Jy)
    J6 = Jr[:, :, :6]
    Jn_r = Jr[:, :, 6:9]
    Jh_r = Jr[:, :, 9]
    return r.reshape(-1), J6.reshape(-1, 6), Jn_r.reshape(-1, 3), Jh_r.reshape(-1)


def _huber(e, delta):
    a = np.abs(e)
    rho = np.where(a <= delta, 0.5 * e * e, delta * a - 0.5 * delta * delta)
    w = np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))
    return rho, w


class _Problem:
    """Assembles the robust normal equations of a window."""

    def __init__(self, pairs, intrinsics, prior: MarginalPrior, config: OptimizerConfig):
        self.pairs = list(pairs)
        self.K = intrinsics
        self.prior = prior
        self.chart = PlaneChart(prior.chart_normal)
        self.cfg = config
        self.sigma = config.feature_cov_px
        self.delta = config.delta
        self.dim = 6 * len(self.pairs) + 3
        self.rays = [_rays(p, intrinsics) for p in self.pairs]

    def plane_coords(self, state):
        return np.concatenate([self.chart.from_normal(state.normal), [state.height]])

    def cost(self, state):
        x_s = self.plane_coords(state)
        total = self.prior.cost(x_s)
        for i, pair in enumerate(self.pairs):
            R, d = state.rotations[i], state.translations[i]
            e = _residual_only(R, d, state.normal, state.height, pair, self.K, self.sigma, self.rays[i])
            total += float(_huber(e, self.delta)[0].sum())
            eo = (np.linalg.norm(d) - pair.odometry_distance) / self.cfg.odometry_sigma
            total += 0.5 * eo * eo
        return total

    def linearize(self, state, pair_indices=None):
        """Gauss-Newton system ``(H, g, cost)`` with IRLS weights."""
        n, h = state.normal, state.height
        x_s = self.plane_coords(state)
        Jchart = self.chart.jacobian(x_s[:2])
        H = np.zeros((self.dim, self.dim))
        g = np.zeros(self.dim)
        cost = 0.0
        sp = slice(self.dim - 3, self.dim)
        idx = range(len(self.pairs)) if pair_indices is None else pair_indices
        for i in idx:
            pair = self.pairs[i]
            R, d = state.rotations[i], state.translations[i]
            e, J6, Jn, Jh = _pair_terms(R, d, n, h, pair, self.K, self.sigma, self.rays[i])
            rho, w = _huber(e, self.delta)
            cost += float(rho.sum())
            Js = np.column_stack([Jn @ Jchart, Jh])
            sl = slice(6 * i, 6 * i + 6)
            Jw6 = J6 * w[:, None]
            Jws = Js * w[:, None]
            H[sl, sl] += J6.T @ Jw6
            H[sl, sp] += Jw6.T @ Js
            H[sp, sl] += Jws.T @ J6
            H[sp, sp] += Js.T @ Jws
            g[sl] += Jw6.T @ e
            g[sp] += Jws.T @ e
            # odometry distance factor fixes the metric scale
            nd = np.linalg.norm(d)
            eo = (nd - pair.odometry_distance) / self.cfg.odometry_sigma
            jo = np.zeros(6)
            jo[3:] = d / (nd * self.cfg.odometry_sigma)
            H[sl, sl] += np.outer(jo, jo)
            g[sl] += jo * eo
            cost += 0.5 * eo * eo
        if not self.prior.is_empty:
            ep = self.prior.residual(x_s)
            H[sp, sp] += self.prior.H_m.T @ self.prior.H_m
            g[sp] += self.prior.H_m.T @ ep
            cost += 0.5 * float(ep @ ep)
        return H, g, cost

    def retract(self, state, delta):
        rots, trans = [], []
        for i in range(len(self.pairs)):
            dp = delta[6 * i : 6 * i + 6]
            rots.append(orthonormalize(state.rotations[i] @ so3_exp(dp[:3])))
            trans.append(state.translations[i] + dp[3:])
        x_s = self.plane_coords(state) + delta[-3:]
        return WindowState(rots, trans, self.chart.to_normal(x_s[:2]), x_s[2])


def _residual_only(R, d, n, h, pair, intrinsics, sigma, x=None):
    if x is None:
        x = _rays(pair, intrinsics)
    y = (x + (x @ n / h)[:, None] * d) @ R.T
    if np.any(y[:, 2] < 1e-12):
        raise PointAtInfinity("transferred point is at or beyond infinity")
    u = intrinsics.fx * y[:, 0] / y[:, 2] + intrinsics.cx
    v = intrinsics.fy * y[:, 1] / y[:, 2] + intrinsics.cy
    return (np.column_stack([pair.uv_k1[:, 0] - u, pair.uv_k1[:, 1] - v]) / sigma).reshape(-1)


def window_residuals(state: WindowState, pairs: Sequence[PairObservations], intrinsics: CameraIntrinsics):
    """Unwhitened transfer residuals per pair, each of shape (N_i, 2)."""
    return [_residual_only(state.rotations[i], state.translations[i], state.normal, state.height, p, intrinsics, 1.0).reshape(-1, 2) for i, p in enumerate(pairs)]


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def optimize_window(
    init: WindowState,
    features: Sequence[PairObservations],
    prior: MarginalPrior | None,
    config: OptimizerConfig,
    intrinsics: CameraIntrinsics,
) -> WindowState:
    """Levenberg-Marquardt on the robust windowed cost.

    Diagnostics land in ``result.info``: iterations, accepted steps, cost,
    gradient norm.
    """
    features = list(features)
    if len(features) != len(init):
        raise ValueError("one feature set per window pair is required")
    if not features:
        raise InsufficientFeatures("empty window")
    for p in features:
        if len(p) < MIN_PAIR_FEATURES:
            raise InsufficientFeatures(f"pair has {len(p)} road matches, need {MIN_PAIR_FEATURES}")
    if not init.height > 0:
        raise ValueError("initial height must be positive")
    if prior is None:
        prior = MarginalPrior.empty(init.normal)
    prob = _Problem(features, intrinsics, prior, config)

    state = init.copy()
    lam = 1e-4
    rejections = 0
    accepted = 0
    H, g, cost = prob.linearize(state)
    it = 0
    status = "max_iterations"
    for it in range(1, config.max_iterations + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm < 1e-10 * (1.0 + cost) or cost < 1e-30:
            status = "gradient"
            break
        D = np.maximum(np.diag(H), 1e-12)
        try:
            step = np.linalg.solve(H + lam * np.diag(D), -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            rejections += 1
            continue
        predicted = -(g @ step + 0.5 * step @ H @ step)
        if predicted <= 1e-15 * (1.0 + cost) or np.max(np.abs(step)) < 1e-14:
            status = "step"
            break
        try:
            cand = prob.retract(state, step)
            new_cost = prob.cost(cand)
        except (PointAtInfinity, ValueError):
            new_cost = np.inf
        if np.isfinite(new_cost) and new_cost < cost:
            decrease = cost - new_cost
            state = cand
            accepted += 1
            rejections = 0
            lam = max(lam / 3.0, 1e-12)
            H, g, cost = prob.linearize(state)
            if decrease <= config.convergence_tol * max(cost, 1e-300) or decrease < 1e-30:
                status = "cost"
                break
        else:
            if predicted <= 1e-12 * (1.0 + cost):
                # at the noise floor of the cost evaluation
                status = "step"
                break
            rejections += 1
            lam *= 10.0
            if rejections >= 5:
                raise SolverDiverged("cost increased on 5 consecutive damped steps")
    state.info = {"iterations": it, "accepted": accepted, "cost": cost, "gradient_norm": float(np.max(np.abs(g))), "status": status}
    return state


# ---------------------------------------------------------------------------
# Marginalisation
# ---------------------------------------------------------------------------


def _prior_from_information(Hs, bs, x0, chart_normal, flagged=False):
    w, V = np.linalg.eigh(0.5 * (Hs + Hs.T))
    keep = w > 1e-12 * max(w.max(), 1e-300)
    if not np.any(keep):
        return MarginalPrior.empty(chart_normal)
    sq = np.sqrt(w[keep])
    A = sq[:, None] * V[:, keep].T
    c = (V[:, keep].T @ bs) / sq
    return MarginalPrior(A @ x0 - c, A, chart_normal, flagged)


def marginalize(
    window: WindowState,
    features: Sequence[PairObservations],
    oldest_k: int,
    prior: MarginalPrior | None,
    config: OptimizerConfig,
    intrinsics: CameraIntrinsics,
) -> MarginalPrior:
    """Fold pair ``oldest_k`` and the existing prior into a new plane prior.

    The Gauss-Newton system of every factor touching that pair is linearised
    at ``window`` and the pair's six motion parameters are eliminated by
    Schur complement.
    """
    if prior is None:
        prior = MarginalPrior.empty(window.normal)
    prob = _Problem(features, intrinsics, prior, config)
    H, g, _ = prob.linearize(window, pair_indices=[oldest_k])
    sl = slice(6 * oldest_k, 6 * oldest_k + 6)
    sp = slice(prob.dim - 3, prob.dim)
    Hpp = H[sl, sl]
    w = np.linalg.eigvalsh(Hpp)
    if w.max() <= 0 or w.min() <= 1e-9 * w.max():
        raise SingularBlock("eliminated block is rank-deficient")
    Hsp = H[sp, sl]
    Hs = H[sp, sp] - Hsp @ np.linalg.solve(Hpp, Hsp.T)
    bs = g[sp] - Hsp @ np.linalg.solve(Hpp, g[sl])
    x0 = prob.plane_coords(window)
    return _prior_from_information(Hs, bs, x0, prior.chart_normal)


def marginalize_or_drop(window, features, oldest_k, prior, config, intrinsics):
    """Like :func:`marginalize`, keeping the old prior (flagged) on a singular block."""
    try:
        return marginalize(window, features, oldest_k, prior, config, intrinsics)
    except SingularBlock:
        base = prior if prior is not None else MarginalPrior.empty(window.normal)
        return MarginalPrior(base.r_m, base.H_m, base.chart_normal, True)

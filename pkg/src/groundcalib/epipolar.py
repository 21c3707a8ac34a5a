"""Two-view epipolar geometry: normalised 8-point, RANSAC, pose recovery.

Fundamental matrices follow ``x_{k+1}^T F x_k = 0`` and essential matrices
``E = [t]_x R`` for the point transport ``X_{k+1} = R X_k + t``.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import least_squares

from .geom import skew, so3_exp, triangulate_rays, RigidTransform


def _hartley_normalization(uv):
    c = uv.mean(axis=0)
    d = np.sqrt(((uv - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def eight_point(uv_k, uv_k1):
    """Normalised 8-point estimate with the rank-2 constraint enforced."""
    uv_k = np.asarray(uv_k, dtype=float)
    uv_k1 = np.asarray(uv_k1, dtype=float)
    if len(uv_k) < 8:
        raise ValueError("eight_point needs at least 8 matches")
    T1 = _hartley_normalization(uv_k)
    T2 = _hartley_normalization(uv_k1)
    x1 = np.column_stack([uv_k, np.ones(len(uv_k))]) @ T1.T
    x2 = np.column_stack([uv_k1, np.ones(len(uv_k1))]) @ T2.T
    A = np.einsum("ni,nj->nij", x2, x1).reshape(-1, 9)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(F)
    F = U @ np.diag([S[0], S[1], 0.0]) @ Vt
    F = T2.T @ F @ T1
    n = np.linalg.norm(F)
    return F / n if n > 0 else F


def sampson_distance(F, uv_k, uv_k1):
    """Signed first-order geometric error in pixels."""
    x1 = np.column_stack([uv_k, np.ones(len(uv_k))])
    x2 = np.column_stack([uv_k1, np.ones(len(uv_k1))])
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = np.einsum("ij,ij->i", x2, Fx1)
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return num / np.sqrt(np.maximum(den, 1e-300))


def ransac_fundamental(uv_k, uv_k1, threshold, iterations, rng):
    n = len(uv_k)
    best_F, best_inl = None, np.zeros(n, dtype=bool)
    for _ in range(iterations):
        idx = rng.choice(n, 8, replace=False)
        try:
            F = eight_point(uv_k[idx], uv_k1[idx])
        except np.linalg.LinAlgError:
            continue
        inl = np.abs(sampson_distance(F, uv_k, uv_k1)) < threshold
        if inl.sum() > best_inl.sum():
            best_F, best_inl = F, inl
    return best_F, best_inl


def fundamental_from_pose(T: RigidTransform, K, K2=None):
    K2 = K if K2 is None else K2
    E = skew(T.translation) @ T.rotation
    return np.linalg.inv(K2).T @ E @ np.linalg.inv(K)


def decompose_essential(E):
    """Four (R, t) candidates with unit ``t``."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    return [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]


def cheirality_fraction(T: RigidTransform, rays_k, rays_k1):
    X, sin2 = triangulate_rays(rays_k, rays_k1, T)
    X1 = T.apply(X)
    ok = (X[:, 2] > 0) & (X1[:, 2] > 0) & (sin2 > 1e-24)
    return float(ok.mean()) if len(ok) else 0.0


def _tangent_basis(v):
    v = v / np.linalg.norm(v)
    a = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(v, a)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(v, b1)
    return np.column_stack([b1, b2])


def _sampson_jacobian_F(F, x1, x2):
    """Derivative of the signed Sampson distance w.r.t. the 9 entries of F."""
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = np.einsum("ij,ij->i", x2, Fx1)
    den = np.maximum(Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2, 1e-300)
    dnum = np.einsum("ni,nj->nij", x2, x1)
    a = np.zeros_like(Fx1)
    a[:, :2] = Fx1[:, :2]
    b = np.zeros_like(Ftx2)
    b[:, :2] = Ftx2[:, :2]
    dden = 2.0 * (np.einsum("ni,nj->nij", a, x1) + np.einsum("ni,nj->nij", x2, b))
    sq = np.sqrt(den)
    J = dnum / sq[:, None, None] - 0.5 * (num / (den * sq))[:, None, None] * dden
    return num / sq, J.reshape(len(x1), 9)


def refine_pose(R0, t0, uv_k, uv_k1, K, loss_scale=1.0):
    """Minimise Sampson error over the 5-dof essential manifold.

    Returns ``(R, t_unit, cost)``.
    """
    t0 = t0 / np.linalg.norm(t0)
    B = _tangent_basis(t0)
    Kinv = np.linalg.inv(K)
    x1 = np.column_stack([uv_k, np.ones(len(uv_k))])
    x2 = np.column_stack([uv_k1, np.ones(len(uv_k1))])

    def unpack(p):
        R = R0 @ so3_exp(p[:3])
        t = t0 + B @ p[3:]
        return R, t / np.linalg.norm(t)

    def fmat(p):
        R, t = unpack(p)
        return Kinv.T @ skew(t) @ R @ Kinv

    def resid(p):
        return _sampson_jacobian_F(fmat(p), x1, x2)[0]

    def jac(p):
        # chain rule: per-point derivative in F times a central difference of F(p)
        _, JF = _sampson_jacobian_F(fmat(p), x1, x2)
        h = 1e-6
        dF = np.empty((9, 5))
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            dF[:, i] = (fmat(p + e) - fmat(p - e)).ravel() / (2 * h)
        return JF @ dF

    sol = least_squares(resid, np.zeros(5), jac=jac, loss="huber", f_scale=loss_scale, method="trf", xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=100)
    R, t = unpack(sol.x)
    return R, t, float(sol.cost)

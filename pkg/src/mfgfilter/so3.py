"""Rotation group primitives: hat/vee, exp/log, proper SVD, Haar sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEF1 = "def1"
DEF2 = "def2"

_SMALL_ANGLE = 1e-4


def hat(v):
    """Skew-symmetric matrix of a 3-vector (or a stack of them, shape (..., 3))."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(A, tol=1e-9):
    """Inverse of :func:`hat`. Raises if ``A`` is not antisymmetric within ``tol``."""
    A = np.asarray(A, dtype=float)
    if tol is not None:
        asym = np.sqrt(np.sum((A + np.swapaxes(A, -1, -2)) ** 2, axis=(-2, -1)))
        scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
        if np.any(asym > tol * scale):
            raise ValueError("matrix is not antisymmetric")
    return np.stack([A[..., 2, 1], A[..., 0, 2], A[..., 1, 0]], axis=-1)


def vee_skew(A):
    """vee of the antisymmetric part of ``A``; no input check."""
    A = np.asarray(A, dtype=float)
    return 0.5 * np.stack(
        [A[..., 2, 1] - A[..., 1, 2], A[..., 0, 2] - A[..., 2, 0], A[..., 1, 0] - A[..., 0, 1]],
        axis=-1,
    )


def _rodrigues_coeffs(theta):
    # sin(t)/t and (1 - cos t)/t^2 with Taylor branches near zero
    theta = np.asarray(theta, dtype=float)
    small = theta < _SMALL_ANGLE
    t2 = theta * theta
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    return a, b


def exp_so3(v):
    """Rodrigues formula. Accepts shape (3,) or (..., 3)."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    a, b = _rodrigues_coeffs(theta)
    K = hat(v)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * K2


def _first_nonzero_positive(axis):
    for c in axis:
        if abs(c) > 1e-12:
            return axis if c > 0 else -axis
    return axis


def log_so3(R):
    """Principal logarithm as a rotation vector with norm in [0, pi].

    Near a half turn the axis is read off the dominant diagonal of the
    symmetric part (the (R + I)/2 rule, with the cos(t) I term removed);
    at exactly pi its first nonzero component is made positive.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim > 2:
        return log_so3_batch(R.reshape(-1, 3, 3)).reshape(R.shape[:-2] + (3,))
    w = vee_skew(R)  # sin(theta) * axis
    sin_t = float(np.linalg.norm(w))
    cos_t = (np.trace(R) - 1.0) / 2.0
    theta = float(np.arctan2(sin_t, cos_t))
    if theta < _SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    if np.pi - theta > 1e-3:
        return w * (theta / sin_t)
    # symmetric part is cos(t) I + (1 - cos t) a a^T
    B = ((R + R.T) / 2.0 - cos_t * np.eye(3)) / (1.0 - cos_t)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.linalg.norm(B[:, k])
    if sin_t > 1e-12:
        if np.dot(axis, w) < 0:
            axis = -axis
    else:
        axis = _first_nonzero_positive(axis)
    return theta * axis


def log_so3_batch(R):
    """Vectorised principal logarithm for a stack of rotations (N, 3, 3)."""
    R = np.asarray(R, dtype=float)
    w = vee_skew(R)
    sin_t = np.linalg.norm(w, axis=-1)
    cos_t = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    theta = np.arctan2(sin_t, cos_t)
    out = np.empty(w.shape)
    small = theta < _SMALL_ANGLE
    near_pi = (np.pi - theta) <= 1e-3
    mid = ~small & ~near_pi
    out[small] = w[small] * (1.0 + theta[small, None] ** 2 / 6.0)
    out[mid] = w[mid] * (theta[mid] / sin_t[mid])[:, None]
    for i in np.flatnonzero(near_pi):
        out[i] = log_so3(R[i])
    return out


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    return (
        R.shape == (3, 3)
        and np.linalg.norm(R.T @ R - np.eye(3)) < tol
        and abs(np.linalg.det(R) - 1.0) < tol
    )


def orthonormalize(R):
    """Closest rotation in Frobenius norm."""
    u, _, vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class ProperSVD:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    convention: str = DEF1

    def matrix(self):
        return self.U @ np.diag(self.S) @ self.V.T


def _column_sign_fix(Up, Vp):
    # first nonzero element of each column of U' positive; V' follows so U'S'V'^T is unchanged
    Up = Up.copy()
    Vp = Vp.copy()
    for j in range(3):
        col = Up[:, j]
        idx = np.flatnonzero(np.abs(col) > 1e-12)
        if idx.size and col[idx[0]] < 0:
            Up[:, j] = -Up[:, j]
            Vp[:, j] = -Vp[:, j]
    return Up, Vp


def proper_svd(F, convention=DEF1):
    """Proper singular value decomposition F = U diag(S) V^T with U, V in SO(3).

    ``def1`` moves the sign of det(U'V') onto the smallest singular value;
    ``def2`` flips all singular values instead.
    """
    if convention not in (DEF1, DEF2):
        raise ValueError(f"unknown convention {convention!r}")
    F = np.asarray(F, dtype=float)
    if F.shape != (3, 3) or not np.all(np.isfinite(F)):
        raise ValueError("F must be a finite 3x3 matrix")
    Up, sp, Vpt = np.linalg.svd(F)
    Up, Vp = _column_sign_fix(Up, Vpt.T)
    du = np.sign(np.linalg.det(Up))
    dv = np.sign(np.linalg.det(Vp))
    if convention == DEF1:
        U = Up @ np.diag([1.0, 1.0, du])
        V = Vp @ np.diag([1.0, 1.0, dv])
        S = np.array([sp[0], sp[1], du * dv * sp[2]])
    else:
        U = Up * du
        V = Vp * dv
        S = sp * du * dv
    return ProperSVD(U, S, V, convention)


def uniform_rotation(rng, size=None):
    """Haar-uniform rotation(s) via normalised 4D Gaussian quaternions."""
    n = 1 if size is None else int(size)
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    R = quat_to_rotation(q)
    return R[0] if size is None else R


def quat_to_rotation(q):
    """Unit quaternions (w, x, y, z), shape (..., 4), to rotation matrices."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = w * w + x * x - y * y - z * z
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = w * w - x * x + y * y - z * z
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = w * w - x * x - y * y + z * z
    return R


def euler_zyz(alpha, beta, gamma):
    """Rz(alpha) Ry(beta) Rz(gamma), broadcasting over the angle arrays."""
    alpha, beta, gamma = np.broadcast_arrays(
        np.asarray(alpha, float), np.asarray(beta, float), np.asarray(gamma, float)
    )
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    R = np.empty(alpha.shape + (3, 3))
    R[..., 0, 0] = ca * cb * cg - sa * sg
    R[..., 0, 1] = -ca * cb * sg - sa * cg
    R[..., 0, 2] = ca * sb
    R[..., 1, 0] = sa * cb * cg + ca * sg
    R[..., 1, 1] = -sa * cb * sg + ca * cg
    R[..., 1, 2] = sa * sb
    R[..., 2, 0] = -sb * cg
    R[..., 2, 1] = sb * sg
    R[..., 2, 2] = cb
    return R


def euler_321(yaw, pitch, roll):
    """Body-fixed 3-2-1 sequence: Rz(yaw) Ry(pitch) Rx(roll)."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def sign_matrix(i):
    """Diagonal sign matrix with +1 only at the listed 1-based indices.

    ``sign_matrix(1)`` is diag(1, -1, -1); ``sign_matrix((1, 2))`` is diag(1, 1, -1).
    """
    keep = (i,) if np.isscalar(i) else tuple(i)
    d = -np.ones(3)
    for k in keep:
        d[k - 1] = 1.0
    return np.diag(d)


def geodesic_angle(R1, R2):
    """Angle of R1^T R2 in radians."""
    M = np.asarray(R1).T @ np.asarray(R2)
    return float(np.arccos(np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)))

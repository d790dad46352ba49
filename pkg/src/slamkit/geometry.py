"""Rigid and similarity transforms, quaternions, and Lie group maps.

Conventions used across the whole package:
  * poses are camera-to-world unless a name says otherwise
  * quaternions are (qx, qy, qz, qw)
  * se3/sim3 tangent vectors are ordered [rho, phi(, sigma)] with rho the
    translational part
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-10


def skew(v):
    """3x3 skew-symmetric matrix of a 3-vector."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def orthonormalize_rotation(r):
    """Project a near-rotation onto SO(3) (closest in Frobenius norm)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def quat_from_rotation(r):
    """Rotation matrix -> unit quaternion (qx, qy, qz, qw), qw >= 0."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s,
                      0.25 * s])
    else:
        i = int(np.argmax([r[0, 0], r[1, 1], r[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (r[j, i] + r[i, j]) / s
        q[k] = (r[k, i] + r[i, k]) / s
        q[3] = (r[k, j] - r[j, k]) / s
    if q[3] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_from_quat(q):
    """Unit quaternion (qx, qy, qz, qw) -> rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_slerp(qa, qb, alpha):
    """Spherical-linear interpolation between two unit quaternions."""
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb, dot = -qb, -dot
    if dot > 1.0 - 1e-12:
        q = qa + alpha * (qb - qa)
        return q / np.linalg.norm(q)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    q = (np.sin((1.0 - alpha) * theta) * qa + np.sin(alpha * theta) * qb) / s
    return q / np.linalg.norm(q)


class SE3:
    """Rigid transform: x_out = r @ x + t. Value-copyable."""

    __slots__ = ("r", "t")

    def __init__(self, r=None, t=None):
        self.r = np.eye(3) if r is None else np.array(r, dtype=float).reshape(3, 3)
        self.t = np.zeros(3) if t is None else np.array(t, dtype=float).reshape(3)

    @staticmethod
    def identity():
        return SE3()

    @staticmethod
    def from_matrix(m):
        m = np.asarray(m, dtype=float)
        return SE3(m[:3, :3], m[:3, 3])

    @staticmethod
    def from_quat_t(q, t):
        return SE3(rotation_from_quat(q), t)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    def quaternion(self):
        return quat_from_rotation(self.r)

    def compose(self, other: "SE3") -> "SE3":
        # re-normalize so long compose chains stay on SO(3)
        r = orthonormalize_rotation(self.r @ other.r)
        return SE3(r, self.r @ other.t + self.t)

    def __matmul__(self, other):
        if isinstance(other, SE3):
            return self.compose(other)
        return NotImplemented

    def inverse(self) -> "SE3":
        rt = self.r.T
        return SE3(rt, -rt @ self.t)

    def transform(self, pts):
        """Apply to a 3-vector or an (N, 3) array of points."""
        pts = np.asarray(pts, dtype=float)
        if pts.ndim == 1:
            return self.r @ pts + self.t
        return pts @ self.r.T + self.t

    def copy(self):
        return SE3(self.r.copy(), self.t.copy())

    def is_close(self, other: "SE3", tol=1e-9):
        return (np.max(np.abs(self.r - other.r)) < tol
                and np.max(np.abs(self.t - other.t)) < tol)

    def __repr__(self):
        return f"SE3(t={np.round(self.t, 4)}, q={np.round(self.quaternion(), 4)})"


class Sim3:
    """Similarity transform: x_out = s * r @ x + t."""

    __slots__ = ("r", "t", "s")

    def __init__(self, r=None, t=None, s=1.0):
        self.r = np.eye(3) if r is None else np.array(r, dtype=float).reshape(3, 3)
        self.t = np.zeros(3) if t is None else np.array(t, dtype=float).reshape(3)
        self.s = float(s)

    @staticmethod
    def identity():
        return Sim3()

    @staticmethod
    def from_se3(pose: SE3, s=1.0):
        return Sim3(pose.r.copy(), pose.t.copy(), s)

    def to_se3(self) -> SE3:
        """Drop scale (keeps rotation/translation as-is)."""
        return SE3(self.r.copy(), self.t.copy())

    def compose(self, other: "Sim3") -> "Sim3":
        r = orthonormalize_rotation(self.r @ other.r)
        return Sim3(r, self.s * (self.r @ other.t) + self.t, self.s * other.s)

    def __matmul__(self, other):
        if isinstance(other, Sim3):
            return self.compose(other)
        return NotImplemented

    def inverse(self) -> "Sim3":
        rt = self.r.T
        inv_s = 1.0 / self.s
        return Sim3(rt, -inv_s * (rt @ self.t), inv_s)

    def transform(self, pts):
        pts = np.asarray(pts, dtype=float)
        if pts.ndim == 1:
            return self.s * (self.r @ pts) + self.t
        return self.s * (pts @ self.r.T) + self.t

    def copy(self):
        return Sim3(self.r.copy(), self.t.copy(), self.s)

    def __repr__(self):
        return f"Sim3(t={np.round(self.t, 4)}, s={self.s:.6g})"


# ---------------------------------------------------------------------------
# SO(3) / SE(3) exponential and logarithm
# ---------------------------------------------------------------------------

def so3_exp(phi):
    """Axis-angle 3-vector -> rotation matrix (Rodrigues)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    w = skew(phi)
    if theta < 1e-8:
        # 2nd-order Taylor keeps the map smooth through zero
        return np.eye(3) + w + 0.5 * (w @ w)
    a = np.sin(theta) / theta
    # 1 - cos via sin^2(theta/2): no cancellation at small angles
    b = 2.0 * np.sin(0.5 * theta) ** 2 / (theta * theta)
    return np.eye(3) + a * w + b * (w @ w)


def so3_log(r):
    """Rotation matrix -> axis-angle 3-vector."""
    r = np.asarray(r, dtype=float)
    cos_theta = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta > np.pi - 1e-6:
        # near pi the off-diagonal formula degenerates; use the symmetric part
        s = np.sqrt(np.maximum(np.diag(r) - cos_theta, 0.0) / (1.0 - cos_theta))
        axis = s / np.linalg.norm(s)
        # fix signs from the skew part
        sk = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if np.linalg.norm(sk) > 1e-9:
            axis = np.where(np.sign(sk) != 0, np.abs(axis) * np.sign(sk), axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * np.array(
        [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])


def _so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    w = skew(phi)
    t2 = theta * theta
    if theta < 1e-4:
        # second-order series; the closed form loses digits to cancellation
        return (np.eye(3) + (0.5 - t2 / 24.0) * w
                + (1.0 / 6.0 - t2 / 120.0) * (w @ w))
    a = 2.0 * np.sin(0.5 * theta) ** 2 / t2        # (1 - cos)/theta^2, stable
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * w + b * (w @ w)


def _so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    w = skew(phi)
    t2 = theta * theta
    if theta < 1e-4:
        return np.eye(3) - 0.5 * w + (1.0 / 12.0 + t2 / 720.0) * (w @ w)
    half = 0.5 * theta
    cot = 1.0 / np.tan(half)
    coef = (1.0 - half * cot) / t2
    return np.eye(3) - 0.5 * w + coef * (w @ w)


def se3_exp(xi) -> SE3:
    """Tangent [rho, phi] -> SE3."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:6]
    r = so3_exp(phi)
    v = _so3_left_jacobian(phi)
    return SE3(r, v @ rho)


def se3_log(pose: SE3):
    """SE3 -> tangent [rho, phi]."""
    phi = so3_log(pose.r)
    v_inv = _so3_left_jacobian_inv(phi)
    return np.concatenate([v_inv @ pose.t, phi])


def se3_adjoint(pose: SE3):
    """Adjoint of SE3 for [rho, phi] ordering."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = pose.r
    ad[3:, 3:] = pose.r
    ad[:3, 3:] = skew(pose.t) @ pose.r
    return ad


def _se3_q_matrix(rho, phi):
    """Barfoot's Q(xi) block used by the SE3 left-Jacobian inverse."""
    rx = skew(rho)
    px = skew(phi)
    theta = np.linalg.norm(phi)
    px2 = px @ px
    m1 = px @ rx + rx @ px + px @ rx @ px
    m2 = px2 @ rx + rx @ px2 - 3.0 * (px @ rx @ px)
    m3 = px @ rx @ px2 + px2 @ rx @ px
    if theta < 1e-2:
        # c2/c3 match the closed forms below, whose leading terms are negative
        c1 = 1.0 / 6.0 - theta ** 2 / 120.0
        c2 = -1.0 / 24.0 + theta ** 2 / 720.0
        c3 = -1.0 / 120.0 + theta ** 2 / 2520.0
    else:
        t2, t3, t4, t5 = theta ** 2, theta ** 3, theta ** 4, theta ** 5
        half, shalf = 0.5 * theta, np.sin(0.5 * theta)
        c1 = (theta - np.sin(theta)) / t3
        # (1 - t2/2 - cos)/t4 without the cancellation of its naive form
        c2 = -2.0 * (half - shalf) * (half + shalf) / t4
        c3 = 0.5 * (c2 - 3.0 * (theta - np.sin(theta) - t3 / 6.0) / t5)
    return 0.5 * rx + c1 * m1 - c2 * m2 - c3 * m3


def se3_left_jacobian_inv(xi):
    """Inverse left Jacobian of SE3 at tangent xi = [rho, phi]."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:6]
    j_inv = _so3_left_jacobian_inv(phi)
    q = _se3_q_matrix(rho, phi)
    out = np.zeros((6, 6))
    out[:3, :3] = j_inv
    out[3:, 3:] = j_inv
    out[:3, 3:] = -j_inv @ q @ j_inv
    return out


def se3_right_jacobian_inv(xi):
    """Inverse right Jacobian: Jr^{-1}(xi) = Jl^{-1}(-xi)."""
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


# ---------------------------------------------------------------------------
# Sim(3) exponential and logarithm (Sophus-style W matrix)
# ---------------------------------------------------------------------------

def _sim3_w_matrix(phi, sigma):
    theta = np.linalg.norm(phi)
    px = skew(phi)
    px2 = px @ px
    scale = np.exp(sigma)
    small_sigma = abs(sigma) < 1e-6
    small_theta = theta < 1e-6
    if small_sigma:
        c = 1.0
        if small_theta:
            a = 0.5
            b = 1.0 / 6.0
        else:
            t2 = theta * theta
            a = (1.0 - np.cos(theta)) / t2
            b = (theta - np.sin(theta)) / (t2 * theta)
    else:
        c = (scale - 1.0) / sigma
        s2 = sigma * sigma
        if small_theta:
            a = ((sigma - 1.0) * scale + 1.0) / s2
            b = ((0.5 * s2 - sigma + 1.0) * scale - 1.0) / (s2 * sigma)
        else:
            t2 = theta * theta
            sa = scale * np.sin(theta)
            sb = scale * np.cos(theta)
            cden = t2 + s2
            a = (sa * sigma + (1.0 - sb) * theta) / (theta * cden)
            b = (c - ((sb - 1.0) * sigma + sa * theta) / cden) / t2
    return a * px + b * px2 + c * np.eye(3)


def sim3_exp(xi) -> Sim3:
    """Tangent [rho, phi, sigma] -> Sim3."""
    xi = np.asarray(xi, dtype=float)
    rho, phi, sigma = xi[:3], xi[3:6], float(xi[6])
    r = so3_exp(phi)
    w = _sim3_w_matrix(phi, sigma)
    return Sim3(r, w @ rho, np.exp(sigma))


def sim3_log(g: Sim3):
    """Sim3 -> tangent [rho, phi, sigma]."""
    sigma = np.log(g.s)
    phi = so3_log(g.r)
    w = _sim3_w_matrix(phi, sigma)
    rho = np.linalg.solve(w, g.t)
    return np.concatenate([rho, phi, [sigma]])


def interpolate_pose(pose_a: SE3, pose_b: SE3, alpha: float) -> SE3:
    """Linear in translation, slerp in rotation."""
    q = quat_slerp(pose_a.quaternion(), pose_b.quaternion(), alpha)
    t = (1.0 - alpha) * pose_a.t + alpha * pose_b.t
    return SE3(rotation_from_quat(q), t)


def rotation_angle(r):
    """Geodesic angle of a rotation matrix, radians."""
    return float(np.arccos(np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)))

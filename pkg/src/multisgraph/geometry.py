"""Rigid-body and plane geometry shared by every layer.

Conventions
-----------
* Quaternions are stored ``[w, x, y, z]``.
* A pose ``T`` maps points from its local frame into the parent frame:
  ``x_parent = R @ x_local + t``.  Composition ``A @ B`` applies ``B`` first.
* se(3) tangent vectors are ordered ``(rho, phi)``: translation part first.
* A plane is ``(n, d)`` with ``n . x = d`` for points ``x`` on the plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL = 1e-2


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    # fixed hemisphere so equal rotations compare equal
    if q[0] < 0.0 or (q[0] == 0.0 and _first_nonzero(q[1:]) < 0.0):
        q = -q
    return q


def _first_nonzero(v: np.ndarray) -> float:
    for x in v:
        if x != 0.0:
            return x
    return 0.0


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method
    tr = np.trace(R)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * K @ K


def so3_log(R: np.ndarray) -> np.ndarray:
    q = matrix_to_quat(R)
    return quat_log(q)


def quat_log(q: np.ndarray) -> np.ndarray:
    w = q[0]
    v = np.asarray(q[1:], dtype=float)
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v / w
    theta = 2.0 * np.arctan2(s, w)
    return theta * v / s


def quat_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    half = 0.5 * theta
    if theta < 1e-8:
        k = 0.5 - theta * theta / 48.0
    else:
        k = np.sin(half) / theta
    return quat_normalize(np.concatenate([[np.cos(half)], k * phi]))


def _so3_coeffs(theta: float) -> tuple[float, float]:
    """(1-cos)/t^2 and (t-sin)/t^3 with series near zero."""
    if theta < _SMALL:
        t2 = theta * theta
        return 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    return (1.0 - np.cos(theta)) / theta**2, (theta - np.sin(theta)) / theta**3


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    b, c = _so3_coeffs(theta)
    return np.eye(3) + b * K + c * K @ K


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL:
        t2 = theta * theta
        e = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        e = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * K + e * K @ K


# ---------------------------------------------------------------------------
# SE(3) tangent-space machinery, xi = (rho, phi)
# ---------------------------------------------------------------------------


def _se3_q(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    P = skew(phi)
    Rh = skew(rho)
    if theta < 0.1:
        t2 = theta * theta
        a = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        b = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        c = 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    else:
        s, co = np.sin(theta), np.cos(theta)
        a = (theta - s) / theta**3
        b = (theta * theta / 2.0 + co - 1.0) / theta**4
        c = (2.0 * theta - 3.0 * s + theta * co) / (2.0 * theta**5)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    return (
        0.5 * Rh
        + a * (PR + RP + PRP)
        + b * (P @ PR + RP @ P - 3.0 * PRP)
        + c * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    rho, phi = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[:3, 3:] = _se3_q(rho, phi)
    return out


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    rho, phi = xi[:3], xi[3:]
    Ji = so3_left_jacobian_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[:3, 3:] = -Ji @ _se3_q(rho, phi) @ Ji
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi))


# ---------------------------------------------------------------------------
# batched variants (leading axis = item)
# ---------------------------------------------------------------------------


def skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def quat_conjugate_batch(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a.T
    bw, bx, by, bz = b.T
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=1,
    )


def quat_to_matrix_batch(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=1),
        ],
        axis=1,
    )


def quat_log_batch(q: np.ndarray) -> np.ndarray:
    q = np.where(q[:, :1] < 0.0, -q, q)
    w, v = q[:, 0], q[:, 1:]
    s = np.linalg.norm(v, axis=1)
    small = s < 1e-12
    theta = 2.0 * np.arctan2(s, w)
    scale = np.where(small, 2.0 / np.where(small, w, 1.0), theta / np.where(small, 1.0, s))
    return scale[:, None] * v


def so3_left_jacobian_inv_batch(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi, axis=1)
    K = skew_batch(phi)
    small = theta < _SMALL
    t2 = theta * theta
    ts = np.where(small, 1.0, theta)
    e = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
        1.0 / ts**2 - (1.0 + np.cos(ts)) / (2.0 * ts * np.sin(ts)),
    )
    return np.eye(3) - 0.5 * K + e[:, None, None] * (K @ K)


def _se3_q_batch(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi, axis=1)
    P = skew_batch(phi)
    Rh = skew_batch(rho)
    small = theta < 0.1
    t2 = theta * theta
    ts = np.where(small, 1.0, theta)
    sn, co = np.sin(ts), np.cos(ts)
    a = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (ts - sn) / ts**3)
    b = np.where(small, 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0, (ts * ts / 2.0 + co - 1.0) / ts**4)
    c = np.where(
        small, 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0, (2.0 * ts - 3.0 * sn + ts * co) / (2.0 * ts**5)
    )
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    a, b, c = a[:, None, None], b[:, None, None], c[:, None, None]
    return 0.5 * Rh + a * (PR + RP + PRP) + b * (P @ PR + RP @ P - 3.0 * PRP) + c * (PRP @ P + P @ PRP)


def se3_left_jacobian_inv_batch(xi: np.ndarray) -> np.ndarray:
    rho, phi = xi[:, :3], xi[:, 3:]
    Ji = so3_left_jacobian_inv_batch(phi)
    out = np.zeros((len(xi), 6, 6))
    out[:, :3, :3] = Ji
    out[:, 3:, 3:] = Ji
    out[:, :3, 3:] = -Ji @ _se3_q_batch(rho, phi) @ Ji
    return out


def se3_log_batch(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    phi = quat_log_batch(q)
    rho = np.einsum("nij,nj->ni", so3_left_jacobian_inv_batch(phi), t)
    return np.concatenate([rho, phi], axis=1)


# ---------------------------------------------------------------------------
# Pose3
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform as a unit quaternion plus a translation."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> Pose3:
        return cls()

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> Pose3:
        return cls(matrix_to_quat(np.asarray(R, dtype=float)), t)

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> Pose3:
        M = np.asarray(M, dtype=float)
        return cls.from_rt(M[:3, :3], M[:3, 3])

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float = 0.0, yaw: float = 0.0) -> Pose3:
        return cls(np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)]), [x, y, z])

    @classmethod
    def exp(cls, xi) -> Pose3:
        xi = np.asarray(xi, dtype=float)
        rho, phi = xi[:3], xi[3:]
        return cls(quat_exp(phi), so3_left_jacobian(phi) @ rho)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def yaw(self) -> float:
        R = self.R
        return float(np.arctan2(R[1, 0], R[0, 0]))

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def log(self) -> np.ndarray:
        phi = quat_log(self.q)
        return np.concatenate([so3_left_jacobian_inv(phi) @ self.t, phi])

    def inverse(self) -> Pose3:
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose3(qi, -(quat_to_matrix(qi) @ self.t))

    def compose(self, other: Pose3) -> Pose3:
        return Pose3(quat_multiply(self.q, other.q), self.R @ other.t + self.t)

    __matmul__ = compose

    def act(self, points: np.ndarray) -> np.ndarray:
        """Apply to an (N, 3) array or a single 3-vector."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def adjoint(self) -> np.ndarray:
        R = self.R
        A = np.zeros((6, 6))
        A[:3, :3] = R
        A[3:, 3:] = R
        A[:3, 3:] = skew(self.t) @ R
        return A

    def almost_equal(self, other: Pose3, tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.t, other.t, atol=tol)
            and min(np.abs(self.q - other.q).max(), np.abs(self.q + other.q).max()) <= tol
        )

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d: dict) -> Pose3:
        return cls(np.array(d["q"], dtype=float), np.array(d["t"], dtype=float))

    def __repr__(self) -> str:
        return f"Pose3(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def pose_error(estimate: Pose3, truth: Pose3) -> tuple[float, float]:
    """Translation error (m) and rotation angle error (rad)."""
    delta = truth.inverse() @ estimate
    return float(np.linalg.norm(estimate.t - truth.t)), float(np.linalg.norm(quat_log(delta.q)))


# ---------------------------------------------------------------------------
# planes
# ---------------------------------------------------------------------------


def canonical_plane(n, d: float) -> tuple[np.ndarray, float]:
    """Flip (n, d) jointly so that d >= 0; ties go to lexicographically positive n."""
    n = np.asarray(n, dtype=float)
    norm = np.linalg.norm(n)
    if abs(norm - 1.0) > 1e-12:  # leave unit inputs untouched so this is idempotent
        n = n / norm
    d = float(d)
    if d < 0.0 or (d == 0.0 and _first_nonzero(n) < 0.0):
        return -n, -d
    return n, d


def transform_plane_params(T: Pose3, n, d: float) -> tuple[np.ndarray, float]:
    """Plane expressed in T's local frame -> the same plane in T's parent frame.

    With ``x' = R x + t``: ``n' = R n`` and ``d' = d + n' . t``.
    """
    n2 = T.R @ np.asarray(n, dtype=float)
    return canonical_plane(n2, float(d) + float(n2 @ T.t))


def tangent_basis(n: np.ndarray) -> np.ndarray:
    """(3, 2) orthonormal basis of the plane orthogonal to unit vector ``n``."""
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    b1 = np.cross(n, axis)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(n, b1)
    return np.stack([b1, b2], axis=1)


def sphere_retract(n: np.ndarray, delta: np.ndarray) -> np.ndarray:
    v = tangent_basis(n) @ np.asarray(delta, dtype=float)
    a = np.linalg.norm(v)
    if a < 1e-15:
        out = n + v
    else:
        out = np.cos(a) * n + np.sin(a) * v / a
    return out / np.linalg.norm(out)


def points_on_plane(n, d: float, count: int, rng: np.random.Generator, extent: float = 5.0) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    B = tangent_basis(n)
    uv = rng.uniform(-extent, extent, size=(count, 2))
    return d * n + uv @ B.T

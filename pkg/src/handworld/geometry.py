"""Rotation and rigid-transform algebra.

Conventions used throughout the package:

* axis-angle vectors have shape ``(..., 3)``; their norm is the angle in
  radians and is kept in ``[0, pi]`` by :func:`matrix_to_aa`;
* quaternions are ``(..., 4)`` arrays ordered ``(w, x, y, z)``;
* rotation matrices act on column vectors, ``p' = R @ p``.

Every function broadcasts over leading axes and works in float64.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NotARotation

_SMALL_ANGLE = 1e-6
_SLERP_DOT_THRESHOLD = 1.0 - 1e-7
_PI_TIE_W = 1e-12


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def aa_to_matrix(v):
    """Rodrigues' formula. The zero vector maps to the identity."""
    v = np.asarray(v, dtype=np.float64)
    theta2 = np.sum(v * v, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # series for sin(t)/t and (1 - cos t)/t^2 near zero
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = skew(v)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def aa_to_quat(v):
    v = np.asarray(v, dtype=np.float64)
    theta2 = np.sum(v * v, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta2 / 48.0, np.sin(0.5 * safe) / safe)
    return np.concatenate([np.cos(0.5 * theta)[..., None], k[..., None] * v], axis=-1)


def quat_canonical(q):
    """Flip sign so that ``w >= 0``."""
    q = np.asarray(q, dtype=np.float64)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_aa(q):
    """Quaternion to axis-angle with angle in [0, pi].

    At exactly a half turn the axis sign is ambiguous; the returned axis has
    its first nonzero component positive.
    """
    q = quat_canonical(quat_normalize(q))
    w = q[..., 0]
    xyz = q[..., 1:]
    n = np.linalg.norm(xyz, axis=-1)
    small = n < 1e-12
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, np.maximum(w, 1e-300), 1.0)
    factor = np.where(small, 2.0 / safe_w, 2.0 * np.arctan2(n, w) / safe_n)
    v = factor[..., None] * xyz

    half_turn = w < _PI_TIE_W
    if np.any(half_turn):
        v = np.array(v, copy=True)
        flat_v = v.reshape(-1, 3)
        for i in np.flatnonzero(np.broadcast_to(half_turn, v.shape[:-1]).ravel()):
            nz = np.flatnonzero(np.abs(flat_v[i]) > 1e-12)
            if nz.size and flat_v[i, nz[0]] < 0.0:
                flat_v[i] = -flat_v[i]
    return v


def quat_to_matrix(q):
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def check_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise NotARotation(f"expected (...,3,3) array, got shape {R.shape}")
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max(axis=(-2, -1))
    det = np.linalg.det(R)
    bad = (err > tol) | (np.abs(det - 1.0) > tol) | ~np.isfinite(det)
    if np.any(bad):
        raise NotARotation(
            f"matrix is not a rotation (orthonormality error {float(np.max(err)):.3g}, "
            f"det {float(np.min(det)):.6g})"
        )
    return R


def matrix_to_quat(R):
    """Shepperd's method; result has ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = m00 + m11 + m22
    cand = np.stack([tr, m00, m11, m22], axis=-1)
    pick = np.argmax(cand, axis=-1)

    q = np.empty(R.shape[:-2] + (4,))
    # case 0: trace dominates
    s0 = np.sqrt(np.maximum(1.0 + tr, 0.0)) * 2.0
    s1 = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0.0)) * 2.0
    s2 = np.sqrt(np.maximum(1.0 + m11 - m00 - m22, 0.0)) * 2.0
    s3 = np.sqrt(np.maximum(1.0 + m22 - m00 - m11, 0.0)) * 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        q0 = np.stack([
            0.25 * s0,
            (R[..., 2, 1] - R[..., 1, 2]) / s0,
            (R[..., 0, 2] - R[..., 2, 0]) / s0,
            (R[..., 1, 0] - R[..., 0, 1]) / s0,
        ], axis=-1)
        q1 = np.stack([
            (R[..., 2, 1] - R[..., 1, 2]) / s1,
            0.25 * s1,
            (R[..., 0, 1] + R[..., 1, 0]) / s1,
            (R[..., 0, 2] + R[..., 2, 0]) / s1,
        ], axis=-1)
        q2 = np.stack([
            (R[..., 0, 2] - R[..., 2, 0]) / s2,
            (R[..., 0, 1] + R[..., 1, 0]) / s2,
            0.25 * s2,
            (R[..., 1, 2] + R[..., 2, 1]) / s2,
        ], axis=-1)
        q3 = np.stack([
            (R[..., 1, 0] - R[..., 0, 1]) / s3,
            (R[..., 0, 2] + R[..., 2, 0]) / s3,
            (R[..., 1, 2] + R[..., 2, 1]) / s3,
            0.25 * s3,
        ], axis=-1)
    p = pick[..., None]
    q = np.where(p == 0, q0, np.where(p == 1, q1, np.where(p == 2, q2, q3)))
    return quat_canonical(quat_normalize(q))


def matrix_to_aa(R):
    """Inverse of :func:`aa_to_matrix`; raises NotARotation on bad input."""
    R = check_rotation(R)
    return quat_to_aa(matrix_to_quat(R))


def canonical_aa(v):
    """Shortest axis-angle representative of the same rotation (angle <= pi)."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    if not np.any(theta > np.pi):
        return v.copy()
    return quat_to_aa(aa_to_quat(v))


def quat_mul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_angle(q0, q1):
    """Rotation angle between two unit quaternions, in [0, pi]."""
    d = np.abs(np.sum(quat_normalize(q0) * quat_normalize(q1), axis=-1))
    rel = quat_mul(quat_conj(q0), q1)
    n = np.linalg.norm(rel[..., 1:], axis=-1)
    return 2.0 * np.arctan2(n, d)


def rotation_angle(R0, R1):
    """Geodesic distance between rotation matrices, radians."""
    rel = np.swapaxes(R0, -1, -2) @ R1
    q = matrix_to_quat(rel)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), q[..., 0])


def slerp(q0, q1, u):
    """Shortest-arc spherical interpolation, broadcasting over leading axes.

    ``u`` may be a scalar or an array broadcastable to the quaternion batch
    shape. Nearly parallel inputs fall back to normalized lerp.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)[..., None]
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    dot = np.abs(dot)
    near = dot > _SLERP_DOT_THRESHOLD
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_theta = np.where(near, 1.0, np.sin(theta))
    w0 = np.where(near, 1.0 - u, np.sin((1.0 - u) * theta) / sin_theta)
    w1 = np.where(near, u, np.sin(u * theta) / sin_theta)
    return quat_normalize(w0 * q0 + w1 * q1)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element mapping ``p -> R @ p + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_aa(cls, aa, t):
        return cls(aa_to_matrix(aa), t)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, p):
        p = np.asarray(p, dtype=np.float64)
        return p @ self.R.T + self.t

    def __matmul__(self, other):
        return compose(self, other)

    def inverse(self):
        return invert(self)


def compose(A, B):
    """``(A o B)(p) = A(B(p))``."""
    return RigidTransform(A.R @ B.R, A.R @ B.t + A.t)


def invert(T):
    Rt = T.R.T
    return RigidTransform(Rt, -Rt @ T.t)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


MIN_DEPTH = 1e-6


def project(K, p):
    """Pinhole projection of camera-frame points ``(..., 3)`` to pixels ``(..., 2)``."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    bad = z <= MIN_DEPTH
    if np.any(bad):
        idx = np.flatnonzero(np.atleast_1d(bad))
        raise BehindCamera(f"{idx.size} point(s) at or behind the camera plane", idx)
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def unproject(K, uv, depth):
    """Back-project pixels at the given z-depth to camera-frame points."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (uv[..., 0] - K.cx) / K.fx * depth
    y = (uv[..., 1] - K.cy) / K.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def random_rotation(rng, size=None):
    """Uniformly distributed rotation matrices."""
    shape = (4,) if size is None else (size, 4)
    q = quat_normalize(rng.standard_normal(shape))
    return quat_to_matrix(q)

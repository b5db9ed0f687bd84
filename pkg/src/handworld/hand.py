"""A 21-joint kinematic hand standing in for MANO.

The parameterization keeps MANO's arity: a global orientation ``phi`` (3),
15 articulated joint rotations ``theta`` (15x3), a 10-vector ``beta`` and a
root translation ``gamma`` (3). Joint layout is wrist (0) followed by four
joints per finger in the order thumb, index, middle, ring, pinky; the first
three joints of each finger are articulated, the fourth is the fingertip.

``beta[f]`` for ``f < 5`` scales all four bones of finger ``f`` by
``1 + beta[f]``; ``beta[5:]`` is reserved and ignored.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import BehindCamera
from .geometry import aa_to_matrix, project

N_JOINTS = 21
N_ARTICULATED = 15
N_BETA = 10
STATE_DIM = 3 + 3 * N_ARTICULATED + N_BETA + 3  # 61

HAND_PARENTS = np.array([-1] + [p for f in range(5) for p in (0, 1 + 4 * f, 2 + 4 * f, 3 + 4 * f)],
                        dtype=np.int64)

# joint index -> index into theta (or -1 for wrist / fingertips)
THETA_OF_JOINT = np.full(N_JOINTS, -1, dtype=np.int64)
for _f in range(5):
    for _k in range(3):
        THETA_OF_JOINT[1 + 4 * _f + _k] = 3 * _f + _k

# joint index -> finger group whose beta scales the bone ending at that joint
FINGER_OF_JOINT = np.array([-1] + [f for f in range(5) for _ in range(4)], dtype=np.int64)

_RIGHT_REST = np.array([
    [0.000, 0.000, 0.000],
    # thumb
    [0.030, 0.020, -0.005], [0.050, 0.045, -0.012], [0.065, 0.068, -0.016], [0.075, 0.090, -0.018],
    # index
    [0.025, 0.090, 0.000], [0.026, 0.130, -0.004], [0.026, 0.155, -0.007], [0.026, 0.175, -0.010],
    # middle
    [0.000, 0.095, 0.002], [0.000, 0.140, -0.002], [0.000, 0.168, -0.006], [0.000, 0.190, -0.009],
    # ring
    [-0.020, 0.090, 0.001], [-0.021, 0.130, -0.003], [-0.021, 0.155, -0.006], [-0.021, 0.175, -0.009],
    # pinky
    [-0.038, 0.080, -0.002], [-0.040, 0.110, -0.005], [-0.041, 0.130, -0.008], [-0.041, 0.147, -0.010],
])


@dataclass(frozen=True)
class HandTemplate:
    rest_joints: np.ndarray
    parent: np.ndarray = field(default_factory=lambda: HAND_PARENTS.copy())

    def __post_init__(self):
        rest = np.asarray(self.rest_joints, dtype=np.float64).reshape(N_JOINTS, 3)
        parent = np.asarray(self.parent, dtype=np.int64).reshape(N_JOINTS)
        if parent[0] != -1 or np.any(parent[1:] < 0) or np.any(parent[1:] >= np.arange(1, N_JOINTS)):
            raise ValueError("parent array must be a tree rooted at joint 0 in topological order")
        lengths = np.linalg.norm(rest[1:] - rest[parent[1:]], axis=1)
        if np.any(lengths <= 0):
            raise ValueError("rest bone lengths must be positive")
        object.__setattr__(self, "rest_joints", rest)
        object.__setattr__(self, "parent", parent)

    @property
    def offsets(self):
        out = np.zeros_like(self.rest_joints)
        out[1:] = self.rest_joints[1:] - self.rest_joints[self.parent[1:]]
        return out

    def bone_lengths(self):
        return np.linalg.norm(self.offsets[1:], axis=1)

    def to_dict(self):
        return {"rest_joints": self.rest_joints.tolist(), "parents": self.parent.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["rest_joints"]), np.asarray(d["parents"]))


def default_template(side="right"):
    rest = _RIGHT_REST.copy()
    if side == "left":
        rest[:, 0] *= -1.0
    elif side != "right":
        raise ValueError(f"unknown hand side {side!r}")
    return HandTemplate(rest)


@dataclass(frozen=True)
class HandState:
    """Single-frame hand parameters (phi, theta, beta, gamma)."""

    phi: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta: np.ndarray = field(default_factory=lambda: np.zeros((N_ARTICULATED, 3)))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(N_BETA))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(3))
    side: str = "right"

    def __post_init__(self):
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=np.float64).reshape(3))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64).reshape(N_ARTICULATED, 3))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64).reshape(N_BETA))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64).reshape(3))

    def to_vector(self):
        return np.concatenate([self.phi, self.theta.ravel(), self.beta, self.gamma])

    @classmethod
    def from_vector(cls, v, side="right"):
        v = np.asarray(v, dtype=np.float64)
        return cls(v[0:3], v[3:48].reshape(N_ARTICULATED, 3), v[48:58], v[58:61], side)

    def replace(self, **kw):
        return replace(self, **kw)


def forward_kinematics_batch(template, phi, theta, beta, gamma):
    """Vectorized FK over leading axes.

    Shapes: phi (..., 3), theta (..., 15, 3), beta (..., 10), gamma (..., 3).
    Returns joints (..., 21, 3).
    """
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    lead = phi.shape[:-1]
    G = np.empty(lead + (N_JOINTS, 3, 3))
    X = np.empty(lead + (N_JOINTS, 3))
    local = aa_to_matrix(theta)  # (..., 15, 3, 3)
    offsets = template.offsets
    G[..., 0, :, :] = aa_to_matrix(phi)
    X[..., 0, :] = gamma
    for i in range(1, N_JOINTS):
        p = template.parent[i]
        scale = 1.0 + beta[..., FINGER_OF_JOINT[i]]
        X[..., i, :] = X[..., p, :] + np.einsum("...ij,j->...i", G[..., p, :, :], offsets[i]) * scale[..., None]
        ti = THETA_OF_JOINT[i]
        if ti >= 0:
            G[..., i, :, :] = G[..., p, :, :] @ local[..., ti, :, :]
        else:
            G[..., i, :, :] = G[..., p, :, :]
    return X


def forward_kinematics(template, state):
    """Joint positions (21, 3) for one :class:`HandState`."""
    return forward_kinematics_batch(template, state.phi, state.theta, state.beta, state.gamma)


def project_joints(K, joints3d_cam):
    """Per-joint pinhole projection; raises BehindCamera listing bad joints."""
    joints3d_cam = np.asarray(joints3d_cam, dtype=np.float64)
    bad = np.flatnonzero(joints3d_cam[..., 2].ravel() <= 1e-6)
    if bad.size:
        raise BehindCamera(f"joints {bad.tolist()} are behind the camera", bad)
    return project(K, joints3d_cam)


def bone_segments(parents):
    parents = np.asarray(parents, dtype=np.int64)
    child = np.flatnonzero(parents >= 0)
    return np.stack([parents[child], child], axis=1)


def render_hand_mask(K, joints2d, radius_px=8.0, parents=None, backend=None):
    """Binary hand mask: discs around every joint plus capsules along bones.

    Pixel (row v, column u) is set when its center ``(u, v)`` lies within
    ``radius_px`` of a joint or bone. Bones are taken from ``parents``; if
    omitted, the standard hand tree is used for 21-joint input and no bones
    are drawn otherwise.
    """
    if radius_px <= 0:
        raise ValueError("radius_px must be positive")
    pts = np.ascontiguousarray(np.asarray(joints2d, dtype=np.float64).reshape(-1, 2))
    n = pts.shape[0]
    if parents is None and n == N_JOINTS:
        parents = HAND_PARENTS
    discs = np.stack([np.arange(n), np.arange(n)], axis=1)
    if parents is not None:
        segs = np.concatenate([discs, bone_segments(parents)], axis=0)
    else:
        segs = discs
    finite = np.all(np.isfinite(pts[segs[:, 0]]), axis=1) & np.all(np.isfinite(pts[segs[:, 1]]), axis=1)
    segs = np.ascontiguousarray(segs[finite], dtype=np.int64)
    raster = _kernels.get("raster_capsules", backend)
    return raster(int(K.height), int(K.width), pts, segs, float(radius_px))

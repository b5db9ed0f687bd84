"""Time-indexed containers: hand motion sequences and camera trajectories."""

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import RigidTransform, check_rotation
from .hand import N_ARTICULATED, N_BETA, HandState, default_template, forward_kinematics_batch

FRAME_TAGS = ("camera", "canonical", "world")


@dataclass(frozen=True)
class MotionSequence:
    """T hand states stored as stacked arrays.

    phi (T,3), theta (T,15,3), beta (T,10), gamma (T,3), visible (T,) bool.
    """

    phi: np.ndarray
    theta: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    visible: np.ndarray
    frame_tag: str = "camera"
    fps: float = 30.0
    side: str = "right"

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64).reshape(-1, 3)
        T = phi.shape[0]
        if T < 1:
            raise ValueError("a motion sequence needs at least one frame")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64).reshape(T, N_ARTICULATED, 3))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64).reshape(T, N_BETA))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64).reshape(T, 3))
        object.__setattr__(self, "visible", np.asarray(self.visible, dtype=bool).reshape(T))
        if self.frame_tag not in FRAME_TAGS:
            raise ValueError(f"frame_tag must be one of {FRAME_TAGS}")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    def __len__(self):
        return self.phi.shape[0]

    @classmethod
    def from_states(cls, states, visible=None, frame_tag="camera", fps=30.0):
        states = list(states)
        if visible is None:
            visible = np.ones(len(states), dtype=bool)
        side = states[0].side if states else "right"
        return cls(np.stack([s.phi for s in states]), np.stack([s.theta for s in states]),
                   np.stack([s.beta for s in states]), np.stack([s.gamma for s in states]),
                   visible, frame_tag, fps, side)

    @classmethod
    def from_vectors(cls, vecs, visible=None, frame_tag="camera", fps=30.0, side="right"):
        vecs = np.asarray(vecs, dtype=np.float64)
        T = vecs.shape[0]
        if visible is None:
            visible = np.ones(T, dtype=bool)
        return cls(vecs[:, 0:3], vecs[:, 3:48], vecs[:, 48:58], vecs[:, 58:61], visible, frame_tag, fps, side)

    def vectors(self):
        """(T, 61) state vectors: phi, theta, beta, gamma."""
        T = len(self)
        return np.concatenate([self.phi, self.theta.reshape(T, -1), self.beta, self.gamma], axis=1)

    def state(self, t):
        return HandState(self.phi[t], self.theta[t], self.beta[t], self.gamma[t], self.side)

    def joints(self, template=None):
        if template is None:
            template = default_template(self.side)
        return forward_kinematics_batch(template, self.phi, self.theta, self.beta, self.gamma)

    def replace(self, **kw):
        return replace(self, **kw)

    def slice(self, start, stop):
        return replace(self, phi=self.phi[start:stop], theta=self.theta[start:stop],
                       beta=self.beta[start:stop], gamma=self.gamma[start:stop],
                       visible=self.visible[start:stop])

    def reversed(self):
        return replace(self, phi=self.phi[::-1], theta=self.theta[::-1], beta=self.beta[::-1],
                       gamma=self.gamma[::-1], visible=self.visible[::-1])

    def timestamps(self):
        return np.arange(len(self)) / self.fps


@dataclass(frozen=True)
class CameraTrajectory:
    """Camera-to-world poses R (T,3,3), t (T,3) with timestamps (T,)."""

    R: np.ndarray
    t: np.ndarray
    timestamps: np.ndarray = field(default=None)

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(-1, 3, 3)
        T = R.shape[0]
        t = np.asarray(self.t, dtype=np.float64).reshape(T, 3)
        ts = self.timestamps
        ts = np.arange(T, dtype=np.float64) if ts is None else np.asarray(ts, dtype=np.float64).reshape(T)
        if T > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return self.R.shape[0]

    @classmethod
    def from_poses(cls, poses, timestamps=None):
        poses = list(poses)
        return cls(np.stack([p.R for p in poses]), np.stack([p.t for p in poses]), timestamps)

    def pose(self, i):
        return RigidTransform(self.R[i], self.t[i])

    def poses(self):
        return [self.pose(i) for i in range(len(self))]

    def positions(self):
        return self.t.copy()

    def validate(self, tol=1e-9):
        check_rotation(self.R, tol=tol)
        return self

    def left_compose(self, T):
        """Apply a rigid transform to every pose: ``T o pose_i``."""
        return CameraTrajectory(T.R @ self.R, self.t @ T.R.T + T.t, self.timestamps)

    def relative_to_first(self):
        first = self.pose(0).inverse()
        return self.left_compose(first)

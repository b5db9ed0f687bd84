"""Combine camera-frame hand motion with a metric camera trajectory.

The hand network's root translation is taken to be metric already; only the
SLAM trajectory needs the scale ``alpha``.
"""

import numpy as np

from .errors import FrameTagMismatch, LengthMismatch, NonPositiveScale
from .geometry import aa_to_matrix, matrix_to_aa
from .motion import CameraTrajectory


def apply_scale(cams, alpha):
    if not (np.isfinite(alpha) and alpha > 0):
        raise NonPositiveScale(f"scale must be positive, got {alpha}")
    return CameraTrajectory(cams.R.copy(), cams.t * alpha, cams.timestamps.copy())


def camera_to_world_motion(seq, cams):
    if seq.frame_tag != "camera":
        raise FrameTagMismatch(f"expected camera-frame motion, got {seq.frame_tag!r}")
    if len(seq) != len(cams):
        raise LengthMismatch(f"sequence has {len(seq)} frames, trajectory has {len(cams)}")
    phi = matrix_to_aa(cams.R @ aa_to_matrix(seq.phi))
    gamma = np.einsum("tij,tj->ti", cams.R, seq.gamma) + cams.t
    return seq.replace(phi=phi, gamma=gamma, frame_tag="world",
                       theta=seq.theta.copy(), beta=seq.beta.copy(), visible=seq.visible.copy())


def world_to_camera_motion(seq, cams):
    if seq.frame_tag != "world":
        raise FrameTagMismatch(f"expected world-frame motion, got {seq.frame_tag!r}")
    if len(seq) != len(cams):
        raise LengthMismatch(f"sequence has {len(seq)} frames, trajectory has {len(cams)}")
    Rt = np.swapaxes(cams.R, 1, 2)
    phi = matrix_to_aa(Rt @ aa_to_matrix(seq.phi))
    gamma = np.einsum("tij,tj->ti", Rt, seq.gamma - cams.t)
    return seq.replace(phi=phi, gamma=gamma, frame_tag="camera",
                       theta=seq.theta.copy(), beta=seq.beta.copy(), visible=seq.visible.copy())

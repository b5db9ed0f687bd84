"""Camera-space <-> canonical-space <-> world-space hand motion transforms.

The canonical frame is the world-frame hand pose at the anchor frame: at the
anchor the canonical hand has identity orientation and zero translation.
With camera-to-world poses ``(R_c_t, t_c_t)`` and anchor ``a``::

    A       = R_c_a @ Phi_a
    R_t2c   = A^-1 @ R_c_t
    t_t2c   = A^-1 @ (t_c_t - t_c_a - R_c_a @ Gamma_a)

and the canonical-to-world transform is ``(A, t_c_a + R_c_a @ Gamma_a)``.
"""

import numpy as np

from .errors import AnchorInvisible, FrameTagMismatch, LengthMismatch
from .geometry import RigidTransform, aa_to_matrix, matrix_to_aa
from .motion import CameraTrajectory, MotionSequence


def anchor_index(seq):
    vis = np.flatnonzero(seq.visible)
    if vis.size == 0:
        raise AnchorInvisible("no visible frame to anchor the canonical space")
    return int(vis[0])


def camera_to_canonical(seq, cams):
    """Canonicalize a camera-frame motion.

    Returns ``(canonical_seq, per_frame_transforms, anchor)`` where
    ``per_frame_transforms[t]`` maps camera ``t`` coordinates into canonical
    space and ``anchor`` maps canonical space to world. The anchor is frame 0
    when visible, otherwise the first visible frame.
    """
    if seq.frame_tag != "camera":
        raise FrameTagMismatch(f"expected a camera-frame sequence, got {seq.frame_tag!r}")
    if len(seq) != len(cams):
        raise LengthMismatch(f"sequence has {len(seq)} frames, trajectory has {len(cams)}")
    a = anchor_index(seq)

    Ra, ta = cams.R[a], cams.t[a]
    A = Ra @ aa_to_matrix(seq.phi[a])
    origin = ta + Ra @ seq.gamma[a]
    Ainv = A.T

    R_c2cano = Ainv @ cams.R                              # (T,3,3)
    t_c2cano = (cams.t - ta - Ra @ seq.gamma[a]) @ Ainv.T  # (T,3)

    phi_mat = R_c2cano @ aa_to_matrix(seq.phi)
    gamma = np.einsum("tij,tj->ti", R_c2cano, seq.gamma) + t_c2cano
    phi = matrix_to_aa(phi_mat)
    phi[a] = 0.0
    gamma[a] = 0.0

    out = seq.replace(phi=phi, gamma=gamma, frame_tag="canonical",
                      theta=seq.theta.copy(), beta=seq.beta.copy(), visible=seq.visible.copy())
    per_frame = [RigidTransform(R_c2cano[i], t_c2cano[i]) for i in range(len(seq))]
    return out, per_frame, RigidTransform(A, origin)


def canonical_to_world(seq, anchor):
    if seq.frame_tag != "canonical":
        raise FrameTagMismatch(f"expected a canonical sequence, got {seq.frame_tag!r}")
    phi = matrix_to_aa(anchor.R @ aa_to_matrix(seq.phi))
    gamma = seq.gamma @ anchor.R.T + anchor.t
    return seq.replace(phi=phi, gamma=gamma, frame_tag="world",
                       theta=seq.theta.copy(), beta=seq.beta.copy(), visible=seq.visible.copy())


def world_to_canonical(seq):
    """Canonicalize a world-frame motion directly (identity cameras)."""
    if seq.frame_tag != "world":
        raise FrameTagMismatch(f"expected a world sequence, got {seq.frame_tag!r}")
    T = len(seq)
    cams = CameraTrajectory(np.broadcast_to(np.eye(3), (T, 3, 3)), np.zeros((T, 3)))
    return camera_to_canonical(seq.replace(frame_tag="camera"), cams)

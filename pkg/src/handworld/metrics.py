"""Trajectory and hand-pose evaluation metrics.

Positions are in meters on input; joint and trajectory errors are reported
in millimeters, RTE in percent, acceleration error in m/s^2.
"""

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import Degenerate, TooFewSamples, TooShort, ZeroDisplacement

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

SEGMENT_LENGTH = 100
AUC_MAX_MM = 50.0
AUC_STEPS = 100
DEFAULT_LAMBDAS = (0.05, 0.01, 0.001)


@dataclass(frozen=True)
class SimilarityTransform:
    s: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, x):
        return self.s * (np.asarray(x, dtype=np.float64) @ self.R.T) + self.t


def umeyama_align(X, Y, with_scale=True, min_rank=2):
    """Least-squares (s, R, t) minimizing sum ||s R x_i + t - y_i||^2.

    ``X`` is the source, ``Y`` the target, both (N, 3). With
    ``with_scale=False`` the scale is fixed to exactly 1. ``min_rank`` is the
    smallest acceptable rank of the centered source (2 rejects collinear
    points, 1 only coincident ones, 0 disables the check).
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(Y, dtype=np.float64).reshape(-1, 3)
    if X.shape != Y.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {Y.shape}")
    n = X.shape[0]
    if n < 3 and min_rank >= 2:
        raise Degenerate("need at least 3 points")
    mx = X.mean(axis=0)
    my = Y.mean(axis=0)
    Xc = X - mx
    Yc = Y - my
    var_x = np.sum(Xc * Xc) / n
    if min_rank >= 1:
        sv = np.linalg.svd(Xc, compute_uv=False)
        if sv[0] <= 1e-12:
            raise Degenerate("source points are coincident")
        if min_rank >= 2 and sv[1] <= 1e-9 * sv[0]:
            raise Degenerate("source points are collinear")
    if var_x <= 0.0:
        return SimilarityTransform(1.0, np.eye(3), my - mx)
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    return SimilarityTransform(s, R, t)


def _align_batch(pred, gt, with_scale=True):
    """Per-frame similarity alignment of (T, J, 3) joint arrays."""
    out = np.empty_like(pred)
    for i in range(pred.shape[0]):
        out[i] = umeyama_align(pred[i], gt[i], with_scale=with_scale).apply(pred[i])
    return out


def _joint_errors_pa(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    aligned = _align_batch(pred, gt, with_scale=True)
    return np.linalg.norm(aligned - gt, axis=-1) * 1000.0


def pa_mpjpe(pred, gt):
    """Procrustes-aligned MPJPE in mm, averaged over joints then frames."""
    return float(np.mean(_joint_errors_pa(pred, gt)))


def auc_pck(pred, gt, max_mm=AUC_MAX_MM, steps=AUC_STEPS):
    """Area under the PCK curve over thresholds 0..max_mm, normalized to [0, 1]."""
    err = _joint_errors_pa(pred, gt).ravel()
    thresholds = np.linspace(0.0, max_mm, steps)
    # alignment leaves ~1e-13 mm of round-off on exact matches
    pck = np.array([np.mean(err <= th + 1e-9) for th in thresholds])
    return float(_trapezoid(pck, thresholds) / max_mm)


def _segments(T, length=SEGMENT_LENGTH):
    return [(s, min(s + length, T)) for s in range(0, T, length)]


def w_mpjpe(pred, gt, frame_mask=None, segment=SEGMENT_LENGTH):
    """World MPJPE (mm) after rigidly aligning each segment's first frame.

    pred, gt: (T, J, 3) world joints. ``frame_mask`` optionally restricts
    which frames contribute to the per-segment mean (alignment still uses
    the segment's first frame).
    """
    return _world_mpjpe(pred, gt, frame_mask, segment, whole=False)


def wa_mpjpe(pred, gt, frame_mask=None, segment=SEGMENT_LENGTH):
    """World MPJPE (mm) after rigidly aligning each whole segment."""
    return _world_mpjpe(pred, gt, frame_mask, segment, whole=True)


def _world_mpjpe(pred, gt, frame_mask, segment, whole):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[0] < 1:
        raise ValueError(f"expected equal (T, J, 3) arrays, got {pred.shape} and {gt.shape}")
    T = pred.shape[0]
    mask = np.ones(T, dtype=bool) if frame_mask is None else np.asarray(frame_mask, dtype=bool)
    values = []
    for s, e in _segments(T, segment):
        if not np.any(mask[s:e]):
            continue
        if whole:
            al = umeyama_align(pred[s:e].reshape(-1, 3), gt[s:e].reshape(-1, 3), with_scale=False)
        else:
            al = umeyama_align(pred[s], gt[s], with_scale=False)
        seg = al.apply(pred[s:e].reshape(-1, 3)).reshape(pred[s:e].shape)
        err = np.linalg.norm(seg - gt[s:e], axis=-1)
        values.append(np.mean(err[mask[s:e]]))
    if not values:
        return 0.0
    return float(np.mean(values) * 1000.0)


def path_length(positions):
    positions = np.asarray(positions, dtype=np.float64)
    return float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))


def rte(pred_root, gt_root):
    """Root translation error in percent of the GT path length, rigid alignment."""
    pred_root = np.asarray(pred_root, dtype=np.float64).reshape(-1, 3)
    gt_root = np.asarray(gt_root, dtype=np.float64).reshape(-1, 3)
    if pred_root.shape != gt_root.shape:
        raise ValueError("trajectories differ in length")
    disp = path_length(gt_root)
    if disp <= 0.0:
        raise ZeroDisplacement("ground-truth root trajectory does not move")
    al = umeyama_align(pred_root, gt_root, with_scale=False, min_rank=0)
    err = np.linalg.norm(al.apply(pred_root) - gt_root, axis=1)
    return float(np.mean(err) / disp * 100.0)


def accel_error(pred, gt, fps):
    """Mean L2 difference of second-difference accelerations, m/s^2."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    if pred.shape[0] < 3:
        raise TooShort("acceleration needs at least 3 frames")
    acc_p = (pred[2:] - 2.0 * pred[1:-1] + pred[:-2]) * fps * fps
    acc_g = (gt[2:] - 2.0 * gt[1:-1] + gt[:-2]) * fps * fps
    return float(np.mean(np.linalg.norm(acc_p - acc_g, axis=-1)))


def _rms(a, b):
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def ate(pred_positions, gt_positions, estimated_scale=None):
    """Average trajectory error in mm.

    Without ``estimated_scale``: similarity (Umeyama) alignment, then RMS
    position error. With it (ATE-S): positions are multiplied by the scale,
    then rigidly aligned.
    """
    pred = np.asarray(pred_positions, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_positions, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise ValueError("trajectories differ in length")
    if estimated_scale is None:
        al = umeyama_align(pred, gt, with_scale=True, min_rank=1)
        return _rms(al.apply(pred), gt) * 1000.0
    scaled = pred * float(estimated_scale)
    al = umeyama_align(scaled, gt, with_scale=False, min_rank=0)
    return _rms(al.apply(scaled), gt) * 1000.0


def _sqrtm_psd(S):
    w, V = np.linalg.eigh((S + S.T) / 2.0)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def fid(pred_states, gt_states, eps=1e-8):
    """Frechet distance between Gaussian fits of two sample sets (rows = samples)."""
    A = np.asarray(pred_states, dtype=np.float64)
    B = np.asarray(gt_states, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError("expected two (N, D) arrays with equal D")
    if A.shape[0] < 2 or B.shape[0] < 2:
        raise TooFewSamples("need at least 2 samples per side")
    if A.shape == B.shape and np.array_equal(A, B):
        return 0.0
    d = A.shape[1]
    mu1, mu2 = A.mean(axis=0), B.mean(axis=0)
    S1 = np.atleast_2d(np.cov(A, rowvar=False)) + eps * np.eye(d)
    S2 = np.atleast_2d(np.cov(B, rowvar=False)) + eps * np.eye(d)
    S1h = _sqrtm_psd(S1)
    M = S1h @ S2 @ S1h
    w = np.linalg.eigvalsh((M + M.T) / 2.0)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    val = float(np.sum((mu1 - mu2) ** 2) + np.trace(S1) + np.trace(S2) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def camera_frame_losses(pred_j3d, gt_j3d, pred_j2d, gt_j2d, pred_theta, gt_theta,
                        pred_beta, gt_beta, lambdas=DEFAULT_LAMBDAS):
    """Camera-frame training losses ``(joints_3d, joints_2d, pose_shape, total)``.

    The joint terms are L1 errors averaged over joints; the pose/shape term is
    the sum of squared theta and beta errors. All three are averaged over
    frames and ``total`` weights them by ``lambdas``.
    """
    def frames(x, tail):
        x = np.asarray(x, dtype=np.float64)
        return x.reshape((-1,) + tail)

    p3, g3 = frames(pred_j3d, (21, 3)), frames(gt_j3d, (21, 3))
    p2, g2 = frames(pred_j2d, (21, 2)), frames(gt_j2d, (21, 2))
    pt, gt_ = frames(pred_theta, (15, 3)), frames(gt_theta, (15, 3))
    pb, gb = frames(pred_beta, (10,)), frames(gt_beta, (10,))
    l3d = np.mean(np.sum(np.abs(p3 - g3), axis=-1), axis=-1)
    l2d = np.mean(np.sum(np.abs(p2 - g2), axis=-1), axis=-1)
    lpose = np.sum((pt - gt_) ** 2, axis=(1, 2)) + np.sum((pb - gb) ** 2, axis=1)
    l1, l2, l3 = lambdas
    L3, L2, LP = float(np.mean(l3d)), float(np.mean(l2d)), float(np.mean(lpose))
    return L3, L2, LP, l1 * L3 + l2 * L2 + l3 * LP


@dataclass
class MetricReport:
    pa_mpjpe: float
    auc: float
    w_mpjpe: float
    wa_mpjpe: float
    rte: float
    accel: float
    ate: float
    ate_s: float
    fid: float

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        return "".join(f"{f.name} {getattr(self, f.name):.9g}\n" for f in fields(self))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


def evaluate(pred_joints, gt_joints, pred_states, gt_states, pred_cam_pos, gt_cam_pos, alpha, fps):
    """Full report from world joints, state vectors and camera positions.

    ``pred_cam_pos`` is the up-to-scale estimate; ``alpha`` its metric scale.
    """
    pred_joints = np.asarray(pred_joints, dtype=np.float64)
    gt_joints = np.asarray(gt_joints, dtype=np.float64)
    return MetricReport(
        pa_mpjpe=pa_mpjpe(pred_joints, gt_joints),
        auc=auc_pck(pred_joints, gt_joints),
        w_mpjpe=w_mpjpe(pred_joints, gt_joints),
        wa_mpjpe=wa_mpjpe(pred_joints, gt_joints),
        rte=rte(pred_joints[:, 0], gt_joints[:, 0]),
        accel=accel_error(pred_joints, gt_joints, fps),
        ate=ate(pred_cam_pos, gt_cam_pos),
        ate_s=ate(pred_cam_pos, gt_cam_pos, estimated_scale=alpha),
        fid=fid(pred_states, gt_states),
    )

"""Sparse bundle adjustment with hand-region confidence masking.

Landmarks are parameterized by inverse depth along the ray of their first
observation (the anchor). Poses are camera-to-world. The 7-DoF similarity
gauge is fixed by holding pose 0 at identity and freezing one landmark's
inverse depth. Normal equations are reduced with a Schur complement on the
(diagonal) landmark block and solved with Levenberg-Marquardt damping.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels
from .errors import Diverged, PixelOutOfBounds, RankDeficient
from .geometry import RigidTransform, aa_to_matrix
from .motion import CameraTrajectory

# absolute damping floor; keeps blocks with no information solvable
_DAMP_FLOOR = 1e-9
_MIN_TRACKS = 6


@dataclass
class FeatureTrack:
    landmark_id: int
    frames: np.ndarray
    pixels: np.ndarray
    conf: np.ndarray
    is_dynamic: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.conf = np.asarray(self.conf, dtype=np.float64).reshape(-1)
        n = self.frames.size
        if n < 2:
            raise ValueError("a track needs at least two observations")
        if self.pixels.shape[0] != n or self.conf.shape[0] != n:
            raise ValueError("frames, pixels and conf must have equal length")
        if np.any(np.diff(self.frames) <= 0):
            raise ValueError("track frame indices must be strictly increasing")

    def copy(self, **kw):
        d = dict(landmark_id=self.landmark_id, frames=self.frames.copy(), pixels=self.pixels.copy(),
                 conf=self.conf.copy(), is_dynamic=self.is_dynamic)
        d.update(kw)
        return FeatureTrack(**d)


def mask_confidences(tracks, masks):
    """Multiply each observation's confidence by ``1 - M_t`` at its pixel.

    ``masks`` is indexable by frame and yields (H, W) binary arrays; the
    pixel is looked up at the nearest integer coordinates.
    """
    out = []
    for tr in tracks:
        cols = np.rint(tr.pixels[:, 0]).astype(np.int64)
        rows = np.rint(tr.pixels[:, 1]).astype(np.int64)
        conf = tr.conf.copy()
        for k, f in enumerate(tr.frames):
            m = masks[f]
            h, w = m.shape
            if not (0 <= rows[k] < h and 0 <= cols[k] < w):
                raise PixelOutOfBounds(
                    f"track {tr.landmark_id} frame {f}: pixel {tr.pixels[k].tolist()} outside {w}x{h} mask")
            conf[k] = conf[k] * (1.0 - float(m[rows[k], cols[k]]))
        out.append(tr.copy(conf=conf))
    return out


@dataclass
class BAProblem:
    tracks: list
    intrinsics: object
    init_poses: CameraTrajectory
    init_inverse_depths: np.ndarray

    def __post_init__(self):
        self.init_inverse_depths = np.asarray(self.init_inverse_depths, dtype=np.float64).reshape(-1)
        if len(self.tracks) != self.init_inverse_depths.size:
            raise ValueError("one inverse depth per track is required")
        if np.any(self.init_inverse_depths <= 0):
            raise ValueError("inverse depths must be positive")
        T = len(self.init_poses)
        for tr in self.tracks:
            if tr.frames[-1] >= T:
                raise ValueError(f"track {tr.landmark_id} references frame {tr.frames[-1]} >= {T}")
        self._flatten()

    def _flatten(self):
        K = self.intrinsics
        frames, anchors, lms, uvs, ws = [], [], [], [], []
        bearing = np.empty((len(self.tracks), 3))
        for l, tr in enumerate(self.tracks):
            u, v = tr.pixels[0]
            bearing[l] = ((u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0)
            n = tr.frames.size - 1
            frames.append(tr.frames[1:])
            anchors.append(np.full(n, tr.frames[0]))
            lms.append(np.full(n, l))
            uvs.append(tr.pixels[1:])
            ws.append(tr.conf[1:])
        self.bearing = bearing
        cat = (lambda xs, dt: np.ascontiguousarray(np.concatenate(xs).astype(dt)) if xs else np.zeros(0, dt))
        self.obs_frame = cat(frames, np.int64)
        self.obs_anchor = cat(anchors, np.int64)
        self.obs_lm = cat(lms, np.int64)
        self.obs_uv = np.ascontiguousarray(np.concatenate(uvs).reshape(-1, 2)) if uvs else np.zeros((0, 2))
        self.obs_w = cat(ws, np.float64)

    @property
    def n_frames(self):
        return len(self.init_poses)


@dataclass
class BASolution:
    poses: CameraTrajectory
    inverse_depths: np.ndarray
    final_rms_residual: float
    iterations: int
    cost_history: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    gauge_pose: RigidTransform = None

    def world_poses(self):
        """Poses re-expressed in the initial estimate's frame (undo the pose-0 gauge)."""
        return self.poses.left_compose(self.gauge_pose)


def _kernel_args(problem, Rs, ts, rho):
    return (np.ascontiguousarray(Rs), np.ascontiguousarray(ts), np.ascontiguousarray(rho),
            problem.obs_frame, problem.obs_anchor, problem.obs_lm,
            np.ascontiguousarray(problem.bearing), problem.obs_uv)


def reprojection_residuals(problem, poses, inverse_depths, backend=None):
    """Residuals (n_obs, 2) in pixels for non-anchor observations and the weighted RMS.

    Anchor observations are omitted: by construction their residual is zero.
    RMS is ``sqrt(sum w ||r||^2 / sum w)``; zero-weight observations do not
    contribute.
    """
    K = problem.intrinsics
    Rs = np.asarray(poses.R, dtype=np.float64)
    ts = np.asarray(poses.t, dtype=np.float64)
    res, _ = _kernels.get("ba_residuals", backend)(*_kernel_args(problem, Rs, ts, inverse_depths),
                                                   K.fx, K.fy, K.cx, K.cy)
    w = problem.obs_w
    wsum = float(np.sum(w))
    rms = float(np.sqrt(np.sum(w * np.sum(res * res, axis=1)) / wsum)) if wsum > 0 else 0.0
    return res, rms


def normal_equations(problem, Rs, ts, rho, backend=None):
    K = problem.intrinsics
    return _kernels.get("ba_normal_eq", backend)(
        *_kernel_args(problem, Rs, ts, rho), np.ascontiguousarray(problem.obs_w),
        K.fx, K.fy, K.cx, K.cy, len(problem.tracks))


def _cost(problem, Rs, ts, rho, backend):
    K = problem.intrinsics
    res, z = _kernels.get("ba_residuals", backend)(*_kernel_args(problem, Rs, ts, rho),
                                                   K.fx, K.fy, K.cx, K.cy)
    if z.size and np.min(z) <= 0:
        return np.inf
    return float(np.sum(problem.obs_w * np.sum(res * res, axis=1)))


def triangulate_inverse_depths(tracks, K, poses, fallback=None):
    """Linear least-squares inverse depth per track given fixed poses.

    Uses the weighted non-anchor observations; tracks without usable
    geometry get the median of the others (or ``fallback``).
    """
    rho = np.full(len(tracks), np.nan)
    for l, tr in enumerate(tracks):
        a = tr.frames[0]
        u, v = tr.pixels[0]
        b = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
        num = den = 0.0
        for k in range(1, tr.frames.size):
            w = tr.conf[k]
            if w <= 0:
                continue
            f = tr.frames[k]
            RfT = poses.R[f].T
            Q = RfT @ (poses.R[a] @ b)
            S = RfT @ (poses.t[a] - poses.t[f])
            xn = (tr.pixels[k, 0] - K.cx) / K.fx
            yn = (tr.pixels[k, 1] - K.cy) / K.fy
            for coef, rhs in ((S[0] - xn * S[2], xn * Q[2] - Q[0]), (S[1] - yn * S[2], yn * Q[2] - Q[1])):
                num += w * coef * rhs
                den += w * coef * coef
        if den > 1e-12:
            r = num / den
            if r > 0 and np.isfinite(r):
                rho[l] = r
    good = np.isfinite(rho)
    fill = float(np.median(rho[good])) if np.any(good) else (1.0 if fallback is None else fallback)
    rho[~good] = fill
    return rho


def _retract(Rs, ts, rho, dp, dl):
    n = Rs.shape[0] - 1
    d = dp.reshape(n, 6)
    R_new = Rs.copy()
    t_new = ts.copy()
    R_new[1:] = Rs[1:] @ aa_to_matrix(d[:, :3])
    t_new[1:] = ts[1:] + d[:, 3:]
    return R_new, t_new, rho + dl


def solve_ba(problem, max_iters=50, damping=1e-4, gauge_landmark=0, rel_tol=1e-10, backend=None):
    """Levenberg-Marquardt over poses 1..T-1 and all but one inverse depth."""
    T = problem.n_frames
    n_lm = len(problem.tracks)
    if T < 2:
        raise RankDeficient("need at least two frames")
    informative = np.zeros(n_lm, dtype=bool)
    informative[problem.obs_lm[problem.obs_w > 0]] = True
    if np.count_nonzero(informative) < _MIN_TRACKS:
        raise RankDeficient(f"only {np.count_nonzero(informative)} tracks carry weight; need {_MIN_TRACKS}")

    gauge = problem.init_poses.pose(0)
    rel = problem.init_poses.left_compose(gauge.inverse())
    Rs = rel.R.copy()
    Rs[0] = np.eye(3)
    ts = rel.t.copy()
    ts[0] = 0.0
    rho = problem.init_inverse_depths.copy()

    cost = _cost(problem, Rs, ts, rho, backend)
    if not np.isfinite(cost):
        raise Diverged("initial state has points behind a camera or non-finite residuals")
    lam = damping
    history = [cost]
    step_norms = []
    it = 0
    npar = 6 * (T - 1)
    for it in range(1, max_iters + 1):
        Hpp, Hpl, Hll, bp, bl, _, _ = normal_equations(problem, Rs, ts, rho, backend)
        Hpl = Hpl.copy()
        bl = bl.copy()
        Hpl[:, gauge_landmark] = 0.0
        bl[gauge_landmark] = 0.0
        accepted = False
        first_try = True
        while True:
            Hll_d = Hll * (1.0 + lam) + lam * _DAMP_FLOOR + _DAMP_FLOOR
            Hll_d[gauge_landmark] = 1.0
            inv_l = 1.0 / Hll_d
            S = Hpp + np.diag(lam * np.diag(Hpp) + lam * _DAMP_FLOOR + _DAMP_FLOOR)
            S -= (Hpl * inv_l) @ Hpl.T
            rhs = -bp + Hpl @ (bl * inv_l)
            try:
                cf = scipy.linalg.cho_factor(S, lower=True, check_finite=True)
                dp = scipy.linalg.cho_solve(cf, rhs)
            except (np.linalg.LinAlgError, ValueError):
                if lam > 1e10:
                    raise RankDeficient("reduced normal equations are singular even with heavy damping")
                lam *= 10.0
                continue
            dl = -(bl + Hpl.T @ dp) * inv_l
            dl[gauge_landmark] = 0.0
            step = float(np.sqrt(dp @ dp + dl @ dl))
            if not np.isfinite(step):
                raise Diverged("non-finite update")
            if first_try:
                # undamped-as-possible step size, reported per iteration
                step_norms.append(step)
                first_try = False
            R_new, t_new, rho_new = _retract(Rs, ts, rho, dp, dl)
            new_cost = _cost(problem, R_new, t_new, rho_new, backend)
            if new_cost < cost:
                accepted = True
                break
            if step < 1e-14 or lam > 1e12:
                break
            lam *= 10.0
        if not accepted:
            break
        decrease = (cost - new_cost) / cost if cost > 0 else 0.0
        Rs, ts, rho, cost = R_new, t_new, rho_new, new_cost
        history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if decrease < rel_tol:
            break

    _, rms = reprojection_residuals(problem, CameraTrajectory(Rs, ts, problem.init_poses.timestamps), rho, backend)
    return BASolution(poses=CameraTrajectory(Rs, ts, problem.init_poses.timestamps), inverse_depths=rho,
                      final_rms_residual=rms, iterations=it, cost_history=history,
                      step_norms=step_norms, gauge_pose=gauge)

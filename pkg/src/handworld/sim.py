"""Deterministic synthetic egocentric scenes.

A scene is a smooth camera path through a static environment (a far wall,
a finite mid-depth plane, a sphere and an optional near patch), a hand whose
camera-relative motion is a sum of low-frequency sinusoids, and everything
derived from them: frustum visibility, hand masks, relative/metric depth
keyframes, static and hand-attached feature tracks, and a perturbed
front-end initialization for bundle adjustment.

Every random quantity comes from a labeled Philox substream of the scene
seed, so adding a consumer does not perturb the others.
"""

import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .ba import FeatureTrack
from .compose import camera_to_world_motion
from .errors import InvalidSpec
from .geometry import (CameraIntrinsics, aa_to_matrix, aa_to_quat, matrix_to_aa,
                       quat_to_matrix, slerp)
from .hand import N_ARTICULATED, N_BETA, default_template, render_hand_mask
from .motion import CameraTrajectory, MotionSequence
from .scale import DepthFrame

FAR_WALL_Z = 5.0
MID_PLANE = dict(z=2.0, x=(-1.4, 0.1), y=(-1.2, 1.2))
SPHERE = dict(center=np.array([0.55, 0.05, 1.5]), radius=0.35)
NEAR_PATCH = dict(z=0.24, x=(-0.40, -0.06), y=(0.04, 0.40))


def substream(seed, label):
    """Independent generator for one named consumer of a scene seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class SceneSpec:
    seed: int = 0
    frames: int = 120
    fps: float = 30.0
    width: int = 128
    height: int = 96
    focal: float = 110.0
    # camera path
    n_cam_controls: int = 5
    cam_rot_amplitude_deg: float = 10.0
    cam_trans_amplitude: tuple = (0.30, 0.12, 0.04)
    # static scene
    n_landmarks: int = 220
    near_patch: bool = True
    alpha_true: float = 1.5
    # metric depth corruption
    depth_noise: float = 0.01
    outlier_fraction: float = 0.0
    outlier_multiplier: float = 10.0
    near_band: float = 0.3
    far_band: float = 4.0
    near_bias: float = 1.0
    far_bias: float = 1.0
    depth_stride: int = 5
    # tracks
    track_noise_px: float = 0.5
    confidence_min: float = 0.5
    hand_coverage: float = 0.25
    # hand
    with_hand: bool = True
    side: str = "right"
    hand_offscreen: float = 0.35
    hand_noise_trans: float = 0.004
    hand_noise_rot: float = 0.02
    mask_radius_px: float = 8.0
    # front-end initialization of bundle adjustment
    frontend_rot_noise_deg: float = 0.5
    frontend_trans_noise: float = 0.01

    def validate(self):
        fracs = {"outlier_fraction": self.outlier_fraction, "hand_coverage": self.hand_coverage,
                 "confidence_min": self.confidence_min}
        for name, v in fracs.items():
            if not 0.0 <= v <= 1.0:
                raise InvalidSpec(f"{name} must lie in [0, 1], got {v}")
        if self.hand_coverage >= 1.0:
            raise InvalidSpec("hand_coverage must be < 1")
        if not self.alpha_true > 0:
            raise InvalidSpec("alpha_true must be positive")
        if not self.fps > 0:
            raise InvalidSpec("fps must be positive")
        if self.frames < 3:
            raise InvalidSpec("need at least 3 frames")
        if self.width < 8 or self.height < 8 or self.focal <= 0:
            raise InvalidSpec("bad camera geometry")
        if self.depth_stride < 1 or self.n_landmarks < 6 or self.n_cam_controls < 2:
            raise InvalidSpec("depth_stride >= 1, n_landmarks >= 6 and n_cam_controls >= 2 required")
        if min(self.depth_noise, self.track_noise_px, self.hand_noise_trans, self.hand_noise_rot,
               self.frontend_rot_noise_deg, self.frontend_trans_noise) < 0:
            raise InvalidSpec("noise levels must be nonnegative")
        if self.side not in ("left", "right"):
            raise InvalidSpec("side must be 'left' or 'right'")
        return self

    def intrinsics(self):
        return CameraIntrinsics(self.focal, self.focal, self.width / 2.0 - 0.5, self.height / 2.0 - 0.5,
                                self.width, self.height)

    def to_dict(self):
        d = asdict(self)
        d["cam_trans_amplitude"] = list(self.cam_trans_amplitude)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown scene keys: {sorted(unknown)}")
        kw = dict(d)
        if "cam_trans_amplitude" in kw:
            kw["cam_trans_amplitude"] = tuple(float(x) for x in kw["cam_trans_amplitude"])
        try:
            spec = cls(**kw)
        except TypeError as e:
            raise InvalidSpec(str(e)) from e
        return spec.validate()

    def replace(self, **kw):
        return replace(self, **kw)


def zero_noise_spec(**kw):
    """A scene with every noise source off and the hand always in view."""
    base = dict(depth_noise=0.0, outlier_fraction=0.0, track_noise_px=0.0, hand_noise_trans=0.0,
                hand_noise_rot=0.0, frontend_rot_noise_deg=0.0, frontend_trans_noise=0.0,
                hand_offscreen=0.0)
    base.update(kw)
    return SceneSpec(**base)


@dataclass
class SceneBundle:
    spec: SceneSpec
    intrinsics: CameraIntrinsics
    gt_cams: CameraTrajectory
    slam_cams: CameraTrajectory
    init_cams: CameraTrajectory
    gt_hand_world: MotionSequence
    gt_hand_camera: MotionSequence
    hand_camera_obs: MotionSequence
    visible: np.ndarray
    masks: np.ndarray
    depth_indices: np.ndarray
    depth_frames: list
    tracks: list
    landmarks_world: np.ndarray = field(default=None)
    track_sources: np.ndarray = field(default=None)
    template: object = None


# ---------------------------------------------------------------------------
# camera path
# ---------------------------------------------------------------------------

def _catmull_rom(P, seg, u):
    n = P.shape[0]
    p0 = P[np.clip(seg - 1, 0, n - 1)]
    p1 = P[seg]
    p2 = P[np.clip(seg + 1, 0, n - 1)]
    p3 = P[np.clip(seg + 2, 0, n - 1)]
    u = u[:, None]
    return 0.5 * ((2 * p1) + (-p0 + p2) * u + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u ** 2
                  + (-p0 + 3 * p1 - 3 * p2 + p3) * u ** 3)


def pose_spline(control_R, control_t, n_frames):
    """SLERP on rotations and Catmull-Rom on translations through control poses."""
    n = control_R.shape[0]
    s = np.linspace(0.0, n - 1, n_frames)
    seg = np.minimum(np.floor(s).astype(int), n - 2)
    u = s - seg
    q = aa_to_quat(matrix_to_aa(control_R))
    R = quat_to_matrix(slerp(q[seg], q[seg + 1], u))
    t = _catmull_rom(control_t, seg, u)
    return R, t


def camera_path(spec, rng):
    n = spec.n_cam_controls
    amp = np.deg2rad(spec.cam_rot_amplitude_deg)
    aa = rng.uniform(-1.0, 1.0, (n, 3)) * amp * np.array([0.8, 1.0, 0.3])
    tr = rng.uniform(-1.0, 1.0, (n, 3)) * np.asarray(spec.cam_trans_amplitude)
    R, t = pose_spline(aa_to_matrix(aa), tr, spec.frames)
    return CameraTrajectory(R, t, np.arange(spec.frames) / spec.fps)


# ---------------------------------------------------------------------------
# hand motion
# ---------------------------------------------------------------------------

def _sinusoids(rng, T, fps, dims, amp, freq=(0.3, 1.2), n_terms=2):
    t = np.arange(T) / fps
    out = np.zeros((T,) + tuple(np.atleast_1d(dims)))
    flat = out.reshape(T, -1)
    for _ in range(n_terms):
        f = rng.uniform(*freq, flat.shape[1])
        ph = rng.uniform(0, 2 * np.pi, flat.shape[1])
        a = rng.uniform(0.3, 1.0, flat.shape[1])
        flat += a * np.sin(2 * np.pi * f * t[:, None] + ph)
    return out * np.asarray(amp) / n_terms


def _offscreen_bumps(rng, T, fps, amplitude):
    """Smooth excursions pushing the hand out of view (+x or +y in camera)."""
    out = np.zeros((T, 3))
    if amplitude <= 0:
        return out
    t = np.arange(T) / fps
    dur_total = T / fps
    n_bumps = max(1, int(round(dur_total / 3.0)))
    for k in range(n_bumps):
        dur = rng.uniform(0.6, 1.3)
        lo = k * dur_total / n_bumps + 0.3
        hi = (k + 1) * dur_total / n_bumps - dur - 0.3
        t0 = rng.uniform(lo, max(lo, hi))
        w = np.clip((t - t0) / dur, 0.0, 1.0)
        shape = np.sin(np.pi * w) ** 2
        axis = rng.integers(0, 2)
        out[:, axis] += amplitude * shape
    return out


def hand_camera_motion(spec, rng, T=None):
    """Camera-relative GT hand motion: (phi, theta, beta, gamma) arrays."""
    T = spec.frames if T is None else T
    fps = spec.fps
    gamma = np.array([0.03, 0.09, 0.40]) + _sinusoids(rng, T, fps, 3, [0.06, 0.04, 0.05])
    gamma = gamma + _offscreen_bumps(rng, T, fps, spec.hand_offscreen)
    base = aa_to_matrix(np.array([-0.6, 0.0, np.pi]) + rng.uniform(-0.2, 0.2, 3))
    wobble = _sinusoids(rng, T, fps, 3, [0.35, 0.35, 0.25])
    phi = matrix_to_aa(base @ aa_to_matrix(wobble))
    curl = rng.uniform(0.1, 0.6, 5)
    flex = _sinusoids(rng, T, fps, 5, [0.35] * 5, freq=(0.4, 1.5))
    theta = np.zeros((T, N_ARTICULATED, 3))
    for f in range(5):
        for k in range(3):
            lag = 0.7 ** k
            theta[:, 3 * f + k, 0] = curl[f] * (1 + 0.3 * k) + lag * flex[:, f]
        theta[:, 3 * f, 2] = 0.08 * np.sin(2 * np.pi * 0.5 * np.arange(T) / fps + f)
    beta = np.zeros((T, N_BETA))
    beta[:, :5] = rng.uniform(-0.15, 0.15, 5)
    return phi, theta, beta, gamma


def sample_motion(spec, seed, label="motion"):
    """Ground-truth cameras and camera/world hand motion without rendering."""
    cams = camera_path(spec, substream(seed, label + "/camera"))
    phi, theta, beta, gamma = hand_camera_motion(spec, substream(seed, label + "/hand"))
    cam_seq = MotionSequence(phi, theta, beta, gamma, np.ones(spec.frames, bool), "camera", spec.fps, spec.side)
    world = camera_to_world_motion(cam_seq, cams)
    return cams, cam_seq, world


# ---------------------------------------------------------------------------
# visibility and rendering
# ---------------------------------------------------------------------------

def frustum_visibility(joints_cam, K, margin_px=0.0, mode="any", min_depth=1e-6):
    """True when joints project inside the image grown by ``margin_px``.

    ``mode='any'`` needs one such joint, ``mode='all'`` needs every joint.
    """
    j = np.asarray(joints_cam, dtype=np.float64).reshape(-1, 3)
    z = j[:, 2]
    front = z > min_depth
    zs = np.where(front, z, 1.0)
    u = K.fx * j[:, 0] / zs + K.cx
    v = K.fy * j[:, 1] / zs + K.cy
    inside = front & (u >= -0.5 - margin_px) & (u <= K.width - 0.5 + margin_px) \
        & (v >= -0.5 - margin_px) & (v <= K.height - 0.5 + margin_px)
    if mode == "any":
        return bool(np.any(inside))
    if mode == "all":
        return bool(np.all(inside))
    raise ValueError("mode must be 'any' or 'all'")


def pixel_rays(K):
    """Camera-frame rays with unit z for every pixel center, shape (H, W, 3)."""
    u, v = np.meshgrid(np.arange(K.width, dtype=np.float64), np.arange(K.height, dtype=np.float64))
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def raycast_world(origin, dirs, near_patch=True):
    """Distance parameter of the first static-scene hit along ``origin + s*dirs``.

    ``origin`` broadcasts against ``dirs`` over leading axes.
    """
    origin = np.broadcast_to(np.asarray(origin, dtype=np.float64), dirs.shape)
    best = np.full(dirs.shape[:-1], np.inf)

    def plane(z0, xr=None, yr=None):
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (z0 - origin[..., 2]) / dz
        ok = np.isfinite(s) & (s > 1e-9)
        if xr is not None:
            x = origin[..., 0] + s * dirs[..., 0]
            y = origin[..., 1] + s * dirs[..., 1]
            ok &= (x >= xr[0]) & (x <= xr[1]) & (y >= yr[0]) & (y <= yr[1])
        return np.where(ok, s, np.inf)

    best = np.minimum(best, plane(FAR_WALL_Z))
    best = np.minimum(best, plane(MID_PLANE["z"], MID_PLANE["x"], MID_PLANE["y"]))
    if near_patch:
        best = np.minimum(best, plane(NEAR_PATCH["z"], NEAR_PATCH["x"], NEAR_PATCH["y"]))
    oc = origin - SPHERE["center"]
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(dirs * oc, axis=-1)
    c = np.sum(oc * oc, axis=-1) - SPHERE["radius"] ** 2
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        s = (-b - np.sqrt(disc)) / (2 * a)
    best = np.minimum(best, np.where((disc >= 0) & (s > 1e-9), s, np.inf))
    return best


def render_metric_depth(K, R, t, near_patch=True):
    """Noise-free z-depth of the static scene seen by camera (R, t)."""
    rays = pixel_rays(K)
    dirs = rays @ R.T
    return raycast_world(t, dirs, near_patch)  # unit-z rays: distance parameter == z-depth


def _sample_landmarks(spec, rng, n):
    pts = []
    n_sphere = n // 4
    n_mid = n // 3
    n_far = n - n_sphere - n_mid
    pts.append(np.column_stack([rng.uniform(*MID_PLANE["x"], n_mid), rng.uniform(*MID_PLANE["y"], n_mid),
                                np.full(n_mid, MID_PLANE["z"])]))
    pts.append(np.column_stack([rng.uniform(-3.0, 3.0, n_far), rng.uniform(-2.2, 2.2, n_far),
                                np.full(n_far, FAR_WALL_Z)]))
    d = rng.standard_normal((n_sphere, 3))
    d[:, 2] = -np.abs(d[:, 2])  # front hemisphere
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts.append(SPHERE["center"] + SPHERE["radius"] * d)
    return np.concatenate(pts)


def _observe(K, cams, X, margin=3.0):
    """Pixels and z-depths of one world point in every camera; ``ok`` marks in-view frames."""
    Xc = np.einsum("tji,tj->ti", cams.R, X - cams.t)
    z = Xc[:, 2]
    zs = np.where(z > 1e-6, z, 1.0)
    uv = np.column_stack([K.fx * Xc[:, 0] / zs + K.cx, K.fy * Xc[:, 1] / zs + K.cy])
    ok = (z > 0.05) & (uv[:, 0] >= margin) & (uv[:, 0] <= K.width - 1 - margin) \
        & (uv[:, 1] >= margin) & (uv[:, 1] <= K.height - 1 - margin)
    return uv, z, ok


def _camera_frame_joints(world_joints, cams):
    return np.einsum("tji,tkj->tki", cams.R, world_joints - cams.t[:, None, :])


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def generate(spec):
    """Build a full :class:`SceneBundle` from a spec; deterministic in ``spec.seed``."""
    spec.validate()
    seed = spec.seed
    K = spec.intrinsics()
    T = spec.frames
    template = default_template(spec.side)

    gt_cams = camera_path(spec, substream(seed, "camera"))
    alpha = spec.alpha_true
    slam_cams = CameraTrajectory(gt_cams.R.copy(), gt_cams.t / alpha, gt_cams.timestamps.copy())

    # hand
    phi, theta, beta, gamma = hand_camera_motion(spec, substream(seed, "hand"))
    ones = np.ones(T, dtype=bool)
    gt_cam_all = MotionSequence(phi, theta, beta, gamma, ones, "camera", spec.fps, spec.side)
    gt_world = camera_to_world_motion(gt_cam_all, gt_cams)
    joints_cam = gt_cam_all.joints(template)
    if spec.with_hand:
        visible = np.array([frustum_visibility(joints_cam[i], K) for i in range(T)])
    else:
        visible = np.zeros(T, dtype=bool)
    gt_hand_camera = gt_cam_all.replace(visible=visible.copy())
    gt_hand_world = gt_world.replace(visible=visible.copy())
    hand_obs = _noisy_hand_estimate(spec, gt_hand_camera, substream(seed, "hand_noise"))

    # masks from GT hand
    masks = np.zeros((T, K.height, K.width), dtype=np.uint8)
    if spec.with_hand:
        masks = hand_masks(K, joints_cam, spec.mask_radius_px, visible)

    # static tracks
    rng_lm = substream(seed, "landmarks")
    landmarks = _sample_landmarks(spec, rng_lm, spec.n_landmarks)
    rng_px = substream(seed, "track_noise")
    rng_conf = substream(seed, "confidence")
    tracks = []
    sources = []
    static_obs = 0
    for i, X in enumerate(landmarks):
        uv, z, ok = _observe(K, gt_cams, X)
        if np.any(ok):
            # drop frames where nearer static geometry occludes the point
            d = (X - gt_cams.t) / np.where(ok, z, 1.0)[:, None]
            s_hit = raycast_world(gt_cams.t, d, spec.near_patch)
            ok &= ~(s_hit < z * (1.0 - 1e-7))
        frs = np.flatnonzero(ok)
        if len(frs) < 2:
            continue
        pix = uv[frs]
        if spec.track_noise_px > 0:
            pix = pix + rng_px.normal(0.0, spec.track_noise_px, pix.shape)
        conf = rng_conf.uniform(spec.confidence_min, 1.0, len(frs))
        tracks.append(FeatureTrack(len(tracks), frs, pix, conf, False))
        sources.append(i)
        static_obs += len(frs)

    # hand-attached tracks
    if spec.with_hand and spec.hand_coverage > 0:
        target = spec.hand_coverage / (1.0 - spec.hand_coverage) * static_obs
        rng_dyn = substream(seed, "hand_tracks")
        world_joints = gt_hand_world.joints(template)
        bones = np.flatnonzero(template.parent >= 0)
        got = 0
        attempts = 0
        while got < target and attempts < 5000:
            attempts += 1
            child = rng_dyn.choice(bones)
            par = template.parent[child]
            s = rng_dyn.uniform(0.0, 1.0)
            P = (1 - s) * world_joints[:, par] + s * world_joints[:, child]
            uv, z, ok = _observe(K, gt_cams, P)
            frs = np.flatnonzero(ok & visible)
            if len(frs) < 2:
                continue
            pix = uv[frs]
            if spec.track_noise_px > 0:
                pix = pix + rng_dyn.normal(0.0, spec.track_noise_px, pix.shape)
            pix[:, 0] = np.clip(pix[:, 0], 0.0, K.width - 1.0)
            pix[:, 1] = np.clip(pix[:, 1], 0.0, K.height - 1.0)
            conf = rng_dyn.uniform(spec.confidence_min, 1.0, len(frs))
            tracks.append(FeatureTrack(len(tracks), frs, pix, conf, True))
            sources.append(-1)
            got += len(frs)

    # depth keyframes
    depth_indices = np.arange(0, T, spec.depth_stride)
    depth_frames = [_depth_frame(spec, K, gt_cams, joints_cam, masks, visible, f,
                                 substream(seed, f"depth/{f}")) for f in depth_indices]

    init_cams = _frontend_init(spec, slam_cams, substream(seed, "frontend"))
    return SceneBundle(spec=spec, intrinsics=K, gt_cams=gt_cams, slam_cams=slam_cams, init_cams=init_cams,
                       gt_hand_world=gt_hand_world, gt_hand_camera=gt_hand_camera, hand_camera_obs=hand_obs,
                       visible=visible, masks=masks, depth_indices=depth_indices, depth_frames=depth_frames,
                       tracks=tracks, landmarks_world=landmarks,
                       track_sources=np.asarray(sources, dtype=np.int64), template=template)


def hand_masks(K, joints_cam, radius_px, visible=None):
    """Per-frame masks from camera-frame joints (T, 21, 3)."""
    T = joints_cam.shape[0]
    masks = np.zeros((T, K.height, K.width), dtype=np.uint8)
    for f in range(T):
        if visible is not None and not visible[f]:
            continue
        j = joints_cam[f]
        front = j[:, 2] > 1e-3
        uv = np.full((j.shape[0], 2), np.nan)
        uv[front, 0] = K.fx * j[front, 0] / j[front, 2] + K.cx
        uv[front, 1] = K.fy * j[front, 1] / j[front, 2] + K.cy
        masks[f] = render_hand_mask(K, uv, radius_px)
    return masks


def _depth_frame(spec, K, cams, joints_cam, masks, visible, f, rng):
    D_true = render_metric_depth(K, cams.R[f], cams.t[f], spec.near_patch)
    rel = D_true / spec.alpha_true
    D = rel * spec.alpha_true  # exact d * alpha == D before corruption
    hand = masks[f].astype(bool)
    if spec.with_hand and visible[f] and np.any(hand):
        # the metric network sees the hand; SLAM depth there is unreliable background
        hand_z = float(np.median(joints_cam[f, :, 2]))
        D = np.where(hand & (hand_z < D), hand_z, D)
    if spec.near_bias != 1.0:
        D = np.where(D_true < spec.near_band, D * spec.near_bias, D)
    if spec.far_bias != 1.0:
        D = np.where(D_true > spec.far_band, D * spec.far_bias, D)
    if spec.depth_noise > 0:
        D = D + rng.normal(0.0, spec.depth_noise, D.shape)
    if spec.outlier_fraction > 0:
        out = rng.random(D.shape) < spec.outlier_fraction
        D = np.where(out, D * spec.outlier_multiplier, D)
    D = np.maximum(D, 1e-3)
    return DepthFrame(rel=rel, metric=D, hand_mask=hand)


def _noisy_hand_estimate(spec, gt_cam, rng):
    """Camera-frame 'network' estimates: noisy on visible frames, zero elsewhere."""
    T = len(gt_cam)
    phi = gt_cam.phi.copy()
    theta = gt_cam.theta.copy()
    beta = gt_cam.beta.copy()
    gamma = gt_cam.gamma.copy()
    if spec.hand_noise_trans > 0:
        gamma = gamma + rng.normal(0.0, spec.hand_noise_trans, gamma.shape)
    if spec.hand_noise_rot > 0:
        phi = matrix_to_aa(aa_to_matrix(phi) @ aa_to_matrix(rng.normal(0.0, spec.hand_noise_rot, phi.shape)))
        theta = theta + rng.normal(0.0, spec.hand_noise_rot, theta.shape)
    hidden = ~gt_cam.visible
    for arr in (phi, theta, beta, gamma):
        arr[hidden] = 0.0
    return gt_cam.replace(phi=phi, theta=theta, beta=beta, gamma=gamma)


def _frontend_init(spec, slam_cams, rng):
    T = len(slam_cams)
    rot_sigma = np.deg2rad(spec.frontend_rot_noise_deg)
    extent = float(np.max(np.linalg.norm(slam_cams.t - slam_cams.t.mean(axis=0), axis=1)))
    trans_sigma = spec.frontend_trans_noise * max(extent, 1e-9)
    R = slam_cams.R.copy()
    t = slam_cams.t.copy()
    if rot_sigma > 0:
        R = R @ aa_to_matrix(rng.normal(0.0, rot_sigma / np.sqrt(3), (T, 3)))
    if trans_sigma > 0:
        t = t + rng.normal(0.0, trans_sigma / np.sqrt(3), (T, 3))
    return CameraTrajectory(R, t, slam_cams.timestamps.copy())


def perturb_poses(cams, rng, rot_deg, trans_frac):
    """Perturb every pose but the first: rotations by ``rot_deg`` about random
    axes, translations by ``trans_frac`` of the trajectory extent."""
    T = len(cams)
    axes = rng.standard_normal((T, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    dR = aa_to_matrix(axes * np.deg2rad(rot_deg))
    dR[0] = np.eye(3)
    extent = float(np.max(np.linalg.norm(cams.t - cams.t[0], axis=1)))
    dirs = rng.standard_normal((T, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dt = dirs * trans_frac * extent
    dt[0] = 0.0
    return CameraTrajectory(cams.R @ dR, cams.t + dt, cams.timestamps.copy())


def static_only(tracks):
    return [tr for tr in tracks if not tr.is_dynamic]


def gt_inverse_depths(bundle):
    """Exact SLAM-unit inverse depths of each static track at its anchor frame (NaN for hand tracks)."""
    out = np.full(len(bundle.tracks), np.nan)
    cams = bundle.gt_cams
    for l, tr in enumerate(bundle.tracks):
        src = bundle.track_sources[l]
        if tr.is_dynamic or src < 0:
            continue
        a = tr.frames[0]
        z = float((bundle.landmarks_world[src] - cams.t[a]) @ cams.R[a][:, 2])
        out[l] = bundle.spec.alpha_true / z
    return out


def training_motions(n, frames=128, base_seed=0, label="train", spec=None):
    """Canonical GT hand motions for infiller training (no rendering)."""
    from .canonical import world_to_canonical

    spec = SceneSpec(frames=frames) if spec is None else spec.replace(frames=frames)
    out = []
    for i in range(n):
        _, _, world = sample_motion(spec, base_seed + i, label=label)
        out.append(world_to_canonical(world)[0])
    return out

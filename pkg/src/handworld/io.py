"""On-disk formats: TUM trajectories, motion/track JSON lines, 16-bit PGM, scene dirs."""

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ba import FeatureTrack
from .geometry import CameraIntrinsics, matrix_to_quat, quat_normalize, quat_to_matrix
from .hand import N_ARTICULATED, N_BETA, HandTemplate, default_template
from .motion import CameraTrajectory, MotionSequence
from .scale import DepthFrame

PGM_MAXVAL = 65535


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# TUM trajectories
# ---------------------------------------------------------------------------

def format_tum(cams):
    q = matrix_to_quat(cams.R)  # (w, x, y, z)
    lines = []
    for ts, t, qq in zip(cams.timestamps, cams.t, q):
        vals = [ts, t[0], t[1], t[2], qq[1], qq[2], qq[3], qq[0]]
        lines.append(" ".join(f"{v:.9g}" for v in vals))
    return "\n".join(lines) + "\n"


def write_tum(path, cams):
    atomic_write_text(path, format_tum(cams))


def parse_tum(text):
    rows = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"line {ln}: expected 8 fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError("empty trajectory")
    a = np.asarray(rows)
    q = quat_normalize(np.column_stack([a[:, 7], a[:, 4], a[:, 5], a[:, 6]]))
    return CameraTrajectory(quat_to_matrix(q), a[:, 1:4], a[:, 0])


def read_tum(path):
    return parse_tum(Path(path).read_text())


# ---------------------------------------------------------------------------
# motion and tracks
# ---------------------------------------------------------------------------

def format_motion(seq, template=None):
    head = {"type": "header", "frame_tag": seq.frame_tag, "fps": seq.fps, "side": seq.side,
            "frames": len(seq)}
    if template is not None:
        head["template"] = template.to_dict()
    lines = [dumps_json(head)]
    for t in range(len(seq)):
        lines.append(dumps_json({
            "t": t, "visible": bool(seq.visible[t]), "phi": seq.phi[t].tolist(),
            "theta": seq.theta[t].ravel().tolist(), "beta": seq.beta[t].tolist(),
            "gamma": seq.gamma[t].tolist()}))
    return "\n".join(lines) + "\n"


def write_motion(path, seq, template=None):
    atomic_write_text(path, format_motion(seq, template))


def parse_motion(text):
    """Returns ``(MotionSequence, HandTemplate or None)``."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty motion file")
    head = json.loads(lines[0])
    if head.get("type") != "header":
        raise ValueError("motion file must start with a header record")
    recs = [json.loads(ln) for ln in lines[1:]]
    if not recs:
        raise ValueError("motion file has no frames")
    recs.sort(key=lambda r: r["t"])
    if [r["t"] for r in recs] != list(range(len(recs))):
        raise ValueError("motion frame indices must be 0..T-1")
    T = len(recs)
    seq = MotionSequence(
        np.array([r["phi"] for r in recs]).reshape(T, 3),
        np.array([r["theta"] for r in recs]).reshape(T, N_ARTICULATED, 3),
        np.array([r["beta"] for r in recs]).reshape(T, N_BETA),
        np.array([r["gamma"] for r in recs]).reshape(T, 3),
        np.array([bool(r["visible"]) for r in recs]),
        head.get("frame_tag", "camera"), float(head.get("fps", 30.0)), head.get("side", "right"))
    template = HandTemplate.from_dict(head["template"]) if "template" in head else None
    return seq, template


def read_motion(path):
    return parse_motion(Path(path).read_text())


def write_tracks(path, tracks):
    lines = [dumps_json({"landmark_id": int(tr.landmark_id), "is_dynamic": bool(tr.is_dynamic),
                         "frames": tr.frames.tolist(), "pixels": tr.pixels.tolist(),
                         "conf": tr.conf.tolist()}) for tr in tracks]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_tracks(path):
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            out.append(FeatureTrack(r["landmark_id"], r["frames"], r["pixels"], r["conf"], r["is_dynamic"]))
    return out


# ---------------------------------------------------------------------------
# 16-bit PGM
# ---------------------------------------------------------------------------

def encode_pgm(values, scale=None):
    """P5 graymap, maxval 65535; stored value = round(x / scale).

    The default scale maps the largest finite value to 65535. Non-finite
    and negative inputs are stored as 0 (invalid).
    """
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("PGM images are 2-D")
    finite = np.isfinite(a) & (a >= 0)
    if scale is None:
        top = float(a[finite].max()) if np.any(finite) else 0.0
        scale = top / PGM_MAXVAL if top > 0 else 1.0
    q = np.zeros(a.shape, dtype=np.int64)
    q[finite] = np.rint(a[finite] / scale).astype(np.int64)
    if q.max(initial=0) > PGM_MAXVAL:
        raise ValueError("values exceed the 16-bit range at this scale")
    h, w = a.shape
    header = f"P5\n# scale {scale!r}\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii")
    return header + q.astype(">u2").tobytes()


def decode_pgm(data):
    """Returns ``(values * scale, raw_uint16, scale)``."""
    pos = 0
    tokens = []
    scale = 1.0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comment = data[pos + 1:end].decode("ascii").split()
            if len(comment) == 2 and comment[0] == "scale":
                scale = float(comment[1])
            pos = end + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1  # single whitespace before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"unsupported PGM type {magic}")
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise ValueError("truncated PGM raster")
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)
    return raw * scale, raw, scale


def write_pgm(path, values, scale=None):
    atomic_write_bytes(path, encode_pgm(values, scale))


def read_pgm(path):
    return decode_pgm(Path(path).read_bytes())[0]


# ---------------------------------------------------------------------------
# scene directories
# ---------------------------------------------------------------------------

@dataclass
class SceneData:
    """Everything a reconstruction or evaluation reads from a scene directory."""

    meta: dict
    intrinsics: CameraIntrinsics
    gt_cams: CameraTrajectory
    slam_cams: CameraTrajectory
    init_cams: CameraTrajectory
    gt_hand_world: MotionSequence
    hand_camera: MotionSequence
    template: HandTemplate
    tracks: list
    depth_indices: np.ndarray
    depth_frames: list
    masks: np.ndarray


def write_scene(bundle, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "cams_gt.tum", bundle.gt_cams)
    write_tum(out / "cams_slam.tum", bundle.slam_cams)
    write_tum(out / "cams_init.tum", bundle.init_cams)
    write_motion(out / "hand_world.jsonl", bundle.gt_hand_world, bundle.template)
    write_motion(out / "hand_camera.jsonl", bundle.hand_camera_obs, bundle.template)
    write_tracks(out / "tracks.jsonl", bundle.tracks)
    for f, fr in zip(bundle.depth_indices, bundle.depth_frames):
        write_pgm(out / "depth" / f"{f:04d}_rel.pgm", fr.rel)
        write_pgm(out / "depth" / f"{f:04d}_metric.pgm", fr.metric)
    for f, m in enumerate(bundle.masks):
        write_pgm(out / "masks" / f"{f:04d}.pgm", m, scale=1.0)
    meta = {"spec": bundle.spec.to_dict(), "intrinsics": bundle.intrinsics.to_dict(),
            "frames": int(bundle.spec.frames), "fps": float(bundle.spec.fps),
            "alpha_true": float(bundle.spec.alpha_true),
            "depth_indices": [int(i) for i in bundle.depth_indices]}
    atomic_write_text(out / "scene.meta", json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return out


def read_scene(scene_dir):
    d = Path(scene_dir)
    meta = json.loads((d / "scene.meta").read_text())
    K = CameraIntrinsics.from_dict(meta["intrinsics"])
    gt_world, template = read_motion(d / "hand_world.jsonl")
    hand_cam, _ = read_motion(d / "hand_camera.jsonl")
    template = template or default_template(gt_world.side)
    idx = np.asarray(meta["depth_indices"], dtype=np.int64)
    T = int(meta["frames"])
    masks = np.stack([read_pgm(d / "masks" / f"{f:04d}.pgm") > 0 for f in range(T)]).astype(np.uint8)
    frames = []
    for f in idx:
        rel = read_pgm(d / "depth" / f"{f:04d}_rel.pgm")
        met = read_pgm(d / "depth" / f"{f:04d}_metric.pgm")
        frames.append(DepthFrame(rel=rel, metric=met, hand_mask=masks[f].astype(bool)))
    init_path = d / "cams_init.tum"
    slam = read_tum(d / "cams_slam.tum")
    return SceneData(meta=meta, intrinsics=K, gt_cams=read_tum(d / "cams_gt.tum"), slam_cams=slam,
                     init_cams=read_tum(init_path) if init_path.exists() else slam,
                     gt_hand_world=gt_world, hand_camera=hand_cam, template=template,
                     tracks=read_tracks(d / "tracks.jsonl"), depth_indices=idx, depth_frames=frames,
                     masks=masks)

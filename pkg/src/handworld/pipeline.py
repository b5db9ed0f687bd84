"""Reconstruction and evaluation over a loaded scene.

reconstruct: masked bundle adjustment -> metric scale -> canonical hand
motion -> gap filling -> world-space hand motion.
"""

from dataclasses import dataclass

import numpy as np

from .ba import BAProblem, mask_confidences, solve_ba, triangulate_inverse_depths
from .canonical import camera_to_canonical, canonical_to_world
from .compose import apply_scale
from .infiller import detect_gaps, infill_long, interpolate_init, last_pose_fill
from .metrics import evaluate
from .scale import DEFAULT_BOUNDS, estimate_scale

INFILL_MODES = ("none", "lastpose", "lerp", "transformer")


@dataclass
class Reconstruction:
    cams_slam: object      # BA trajectory, SLAM units, expressed in the init frame
    alpha: float
    hand_world: object     # world-frame MotionSequence
    hand_canonical: object
    ba: object
    scale: object

    @property
    def cams_metric(self):
        return apply_scale(self.cams_slam, self.alpha)


def fill_gaps(cano, mode="lerp", model=None):
    if mode == "none" or np.all(cano.visible):
        return cano
    gaps = detect_gaps(cano)
    if mode == "lastpose":
        return last_pose_fill(cano, gaps)
    if mode == "lerp":
        return interpolate_init(cano, gaps)
    if mode == "transformer":
        return infill_long(model, cano, gaps)
    raise ValueError(f"unknown infill mode {mode!r}")


def run_ba(scene, mask=True, max_iters=50, backend=None):
    tracks = mask_confidences(scene.tracks, scene.masks) if mask else scene.tracks
    rho0 = triangulate_inverse_depths(tracks, scene.intrinsics, scene.init_cams)
    problem = BAProblem(tracks, scene.intrinsics, scene.init_cams, rho0)
    return solve_ba(problem, max_iters=max_iters, backend=backend)


def reconstruct(scene, mask=True, depth_band=True, infill="lerp", model=None, bounds=DEFAULT_BOUNDS,
                ba_iters=50, backend=None):
    if infill not in INFILL_MODES:
        raise ValueError(f"infill must be one of {INFILL_MODES}")
    sol = run_ba(scene, mask=mask, max_iters=ba_iters, backend=backend)
    cams = sol.world_poses()
    sres = estimate_scale(scene.depth_frames, bounds if depth_band else None, backend=backend)
    metric = apply_scale(cams, sres.alpha)
    cano, _, anchor = camera_to_canonical(scene.hand_camera, metric)
    filled = fill_gaps(cano, infill, model)
    world = canonical_to_world(filled, anchor)
    return Reconstruction(cams_slam=cams, alpha=sres.alpha, hand_world=world, hand_canonical=filled,
                          ba=sol, scale=sres)


def evaluate_outputs(cams_est, alpha, hand_est, scene):
    """Metric report of estimated outputs against a scene's ground truth."""
    gt_world = scene.gt_hand_world
    if len(hand_est) != len(gt_world) or len(cams_est) != len(scene.gt_cams):
        raise ValueError("estimate and ground truth differ in length")
    tpl = scene.template
    return evaluate(hand_est.joints(tpl), gt_world.joints(tpl), hand_est.vectors(), gt_world.vectors(),
                    cams_est.t, scene.gt_cams.t, alpha, gt_world.fps)

import numpy as np
import pytest

from handworld import sim
from handworld.errors import InvalidSpec
from handworld.geometry import check_rotation, project


@pytest.fixture(scope="module")
def bundle():
    return sim.generate(sim.SceneSpec(seed=1, frames=30))


def test_substreams_are_independent_and_reproducible():
    a = sim.substream(0, "camera").random(5)
    assert np.array_equal(a, sim.substream(0, "camera").random(5))
    assert not np.array_equal(a, sim.substream(0, "hand").random(5))
    assert not np.array_equal(a, sim.substream(1, "camera").random(5))


def test_generate_is_deterministic(bundle):
    again = sim.generate(sim.SceneSpec(seed=1, frames=30))
    assert np.array_equal(again.gt_cams.t, bundle.gt_cams.t)
    assert np.array_equal(again.hand_camera_obs.vectors(), bundle.hand_camera_obs.vectors())
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(again.tracks, bundle.tracks))


def test_shapes_and_rotations(bundle):
    T = bundle.spec.frames
    assert len(bundle.gt_cams) == len(bundle.slam_cams) == len(bundle.init_cams) == T
    check_rotation(bundle.gt_cams.R)
    assert np.allclose(bundle.gt_cams.t / bundle.spec.alpha_true, bundle.slam_cams.t)
    assert bundle.masks.shape == (T, bundle.spec.height, bundle.spec.width)


def test_static_tracks_reproject_to_landmarks():
    b = sim.generate(sim.zero_noise_spec(seed=4, frames=10))
    K = b.intrinsics
    for l, tr in enumerate(b.tracks):
        src = b.track_sources[l]
        if tr.is_dynamic:
            continue
        for f, uv in zip(tr.frames, tr.pixels):
            Xc = (b.landmarks_world[src] - b.gt_cams.t[f]) @ b.gt_cams.R[f]
            assert np.allclose(project(K, Xc), uv, atol=1e-9)


def test_hand_tracks_exist_and_are_masked(bundle):
    dyn = [t for t in bundle.tracks if t.is_dynamic]
    assert dyn
    n_obs = sum(t.frames.size for t in bundle.tracks)
    n_dyn = sum(t.frames.size for t in dyn)
    assert n_dyn / n_obs >= 0.2
    hits = [bundle.masks[f][int(round(v)), int(round(u))] for t in dyn for f, (u, v) in zip(t.frames, t.pixels)]
    assert np.mean(hits) > 0.9


def test_visibility_matches_frustum(bundle):
    J = bundle.gt_hand_camera.joints(bundle.template)
    vis = np.array([sim.frustum_visibility(j, bundle.intrinsics) for j in J])
    assert vis.any() and not vis.all()
    assert np.array_equal(vis, bundle.visible)
    assert np.all(bundle.hand_camera_obs.vectors()[~bundle.visible] == 0)


def test_zero_noise_depth_is_consistent():
    b = sim.generate(sim.zero_noise_spec(seed=5, frames=10))
    for fr in b.depth_frames:
        keep = fr.valid & ~fr.hand_mask
        assert np.allclose(fr.rel[keep] * b.spec.alpha_true, fr.metric[keep], rtol=1e-12)


def test_perturb_poses_keeps_first():
    b = sim.generate(sim.zero_noise_spec(seed=6, frames=6, with_hand=False))
    p = sim.perturb_poses(b.slam_cams, np.random.default_rng(0), 5.0, 0.05)
    assert np.array_equal(p.R[0], b.slam_cams.R[0]) and np.array_equal(p.t[0], b.slam_cams.t[0])
    check_rotation(p.R)


def test_spec_round_trip_and_validation():
    spec = sim.SceneSpec(seed=9, frames=12)
    assert sim.SceneSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(InvalidSpec):
        sim.SceneSpec.from_dict({"nope": 1})
    with pytest.raises(InvalidSpec):
        sim.SceneSpec(frames=1).validate()


def test_raycast_hits_far_wall():
    d = np.array([[0.0, 0.0, 1.0]])
    z = sim.raycast_world(np.array([0.0, 3.0, 0.0]), d)
    assert np.allclose(z, 5.0)


def test_training_motions_are_canonical():
    ms = sim.training_motions(2, frames=16)
    for m in ms:
        assert m.frame_tag == "canonical"
        assert np.array_equal(m.phi[0], np.zeros(3)) and np.array_equal(m.gamma[0], np.zeros(3))


def test_frustum_margin_changes_verdict_at_border():
    from handworld.geometry import CameraIntrinsics, project
    K = CameraIntrinsics(100.0, 100.0, 64.0, 48.0, 128, 96)
    # joints just past the right edge, within 20 px of it
    J = np.array([[0.7, 0.0, 1.0], [0.75, 0.05, 1.0]])
    u = project(K, J)[:, 0]
    assert np.all((u > K.width - 0.5) & (u < K.width - 0.5 + 20))
    assert not sim.frustum_visibility(J, K, 0.0)
    assert sim.frustum_visibility(J, K, 20.0)
    assert sim.frustum_visibility(np.array([[0.0, 0.0, 0.5]]), K)
    assert not sim.frustum_visibility(np.array([[0.0, 0.0, -0.5]]), K, 1000.0)

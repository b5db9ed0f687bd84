import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from handworld import infiller as inf
from handworld import sim
from handworld.errors import (CheckpointError, EmptyDataset, FrameTagMismatch, ModelUninitialized, NoContext,
                              WindowTooLong)
from handworld.geometry import aa_to_matrix, aa_to_quat, quat_angle
from handworld.motion import MotionSequence

T = 24


def constant_motion(seed, T=T):
    """Constant-velocity translation/shape and constant-angular-velocity rotations."""
    r = np.random.default_rng(seed)
    t = np.arange(T)[:, None]
    gamma = r.normal(size=3) + t * r.normal(0, 0.01, 3)
    beta = r.normal(0, 0.1, 10) + t * r.normal(0, 0.001, 10)
    axes = r.normal(size=(16, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    start = r.uniform(0.0, 0.5, 16)
    rate = r.uniform(-0.04, 0.04, 16)
    ang = start[None, :] + rate[None, :] * t  # stays inside (-pi, pi)
    rots = axes[None] * ang[..., None]
    return MotionSequence(rots[:, 0], rots[:, 1:], beta, gamma, np.ones(T, bool), "canonical")


def with_gaps(seq, hidden):
    vis = np.ones(len(seq), bool)
    vis[list(hidden)] = False
    return seq.replace(visible=vis)


def random_model(seed=0, window=32):
    m = inf.InfillerModel(d_model=16, n_layers=2, n_heads=2, d_ffn=24, window=window, seed=seed)
    r = np.random.default_rng(seed + 100)
    m.params["out_W"] = r.normal(0, 0.3, m.params["out_W"].shape)
    for n in m.param_names():
        if n.endswith("_b") or n.endswith("b1") or n.endswith("b2") or n[-2:] in ("bq", "bk", "bv", "bo"):
            m.params[n] = r.normal(0, 0.1, m.params[n].shape)
    return m


@given(st.integers(0, 10_000))
def test_lerp_slerp_recover_constant_velocity(seed):
    gt = constant_motion(seed)
    filled = inf.interpolate_init(with_gaps(gt, range(3, 15)))
    assert np.max(np.abs(filled.gamma - gt.gamma)) < 1e-9
    assert np.max(np.abs(filled.beta - gt.beta)) < 1e-9
    R_f = aa_to_matrix(np.concatenate([filled.phi[:, None], filled.theta], axis=1))
    R_g = aa_to_matrix(np.concatenate([gt.phi[:, None], gt.theta], axis=1))
    assert np.max(np.abs(R_f - R_g)) < 1e-9


def test_slerp_fill_has_constant_angular_step():
    gt = constant_motion(1)
    filled = inf.interpolate_init(with_gaps(gt, range(2, 20)))
    q = aa_to_quat(filled.phi)
    steps = [quat_angle(q[i], q[i + 1]) for i in range(1, 21)]
    assert np.ptp(steps) < 1e-9


def test_boundary_gaps_hold_anchor():
    gt = constant_motion(2)
    seq = with_gaps(gt, list(range(0, 4)) + list(range(20, 24)))
    for fill in (inf.interpolate_init, inf.last_pose_fill):
        out = fill(seq)
        assert np.array_equal(out.gamma[:4], np.repeat(gt.gamma[4:5], 4, axis=0))
        assert np.array_equal(out.gamma[20:], np.repeat(gt.gamma[19:20], 4, axis=0))


def test_last_pose_holds_previous_state():
    gt = constant_motion(3)
    out = inf.last_pose_fill(with_gaps(gt, range(5, 9)))
    assert np.array_equal(out.vectors()[5:9], np.repeat(gt.vectors()[4:5], 4, axis=0))


def test_visible_frames_bit_identical_through_all_paths():
    gt = constant_motion(4)
    seq = with_gaps(gt, [0, 1, 7, 8, 9, 15, 23])
    model = random_model(window=32)
    vis = seq.visible
    outs = [inf.last_pose_fill(seq), inf.interpolate_init(seq),
            inf.infill_refine(model, inf.interpolate_init(seq)), inf.infill_long(model, seq)]
    small = random_model(window=8)  # forces the windowed path
    outs.append(inf.infill_long(small, seq))
    for out in outs:
        assert np.array_equal(out.vectors()[vis], seq.vectors()[vis])
        assert np.array_equal(out.visible, seq.visible)


def test_refine_changes_only_gap_frames():
    gt = constant_motion(5)
    init = inf.interpolate_init(with_gaps(gt, range(6, 12)))
    out = inf.infill_refine(random_model(), init)
    diff = np.any(out.vectors() != init.vectors(), axis=1)
    assert diff[6:12].all() and not diff[:6].any() and not diff[12:].any()
    assert np.all(np.linalg.norm(out.vectors()[:, :48].reshape(-1, 3), axis=1) <= np.pi + 1e-12)


def test_detect_gaps():
    seq = with_gaps(constant_motion(0, T=10), [0, 1, 4, 9])
    g = inf.detect_gaps(seq)
    assert g.gaps == [(0, 1), (4, 4), (9, 9)]
    assert g.context == [(-1, 2), (3, 5), (8, -1)]
    assert np.array_equal(g.frame_mask(), ~seq.visible)


@given(st.integers(3, 80), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_mask_augment_constraints(T, frac, seed):
    seq = constant_motion(0, T=T)
    out = inf.mask_augment(seq, seed, frac)
    hidden = np.flatnonzero(~out.visible)
    assert out.visible[0] and out.visible[-1]
    L_max = inf.max_gap_length(T, frac)
    assert hidden.size <= max(L_max, 0)
    if hidden.size:
        assert np.all(np.diff(hidden) == 1)  # a single run
        assert np.all(out.vectors()[hidden] == 0)
    assert np.array_equal(out.vectors()[out.visible], seq.vectors()[out.visible])


def test_mask_augment_deterministic():
    seq = constant_motion(0, T=40)
    a = inf.mask_augment(seq, 7, 0.5)
    b = inf.mask_augment(seq, 7, 0.5)
    assert np.array_equal(a.visible, b.visible)


def test_no_context_raises():
    seq = constant_motion(0, T=6).replace(visible=np.zeros(6, bool))
    with pytest.raises(NoContext):
        inf.interpolate_init(seq)
    with pytest.raises(NoContext):
        inf.last_pose_fill(seq)


def test_refine_errors():
    seq = with_gaps(constant_motion(0, T=40), [3])
    with pytest.raises(ModelUninitialized):
        inf.infill_refine(None, seq)
    with pytest.raises(WindowTooLong):
        inf.infill_refine(random_model(window=32), seq)
    with pytest.raises(FrameTagMismatch):
        inf.infill_refine(random_model(window=64), seq.replace(frame_tag="world"))


def test_canonicalization_backward_matches_fd():
    r = np.random.default_rng(0)
    v = r.normal(0, 3.0, (50, 3))
    g = r.normal(size=(50, 3))
    c, wrapped, n = inf._canon_rows(v)
    assert wrapped.any()
    analytic = inf._canon_backward(v, wrapped, n, g)
    h = 1e-6
    num = np.zeros_like(v)
    for i in range(50):
        for k in range(3):
            vp, vm = v.copy(), v.copy()
            vp[i, k] += h
            vm[i, k] -= h
            num[i, k] = np.sum(g[i] * (inf._canon_rows(vp[i:i + 1])[0] - inf._canon_rows(vm[i:i + 1])[0])) / (2 * h)
    assert np.linalg.norm(analytic - num) / np.linalg.norm(num) < 1e-7


def test_loss_matches_hand_computation():
    r = np.random.default_rng(1)
    pred, gt = r.normal(0, 0.5, (6, 61)), r.normal(0, 0.5, (6, 61))
    mask = np.array([0, 1, 1, 0, 1, 0], bool)
    w = inf.InfillLossWeights()
    loss, _ = inf.infill_loss(pred, gt, mask, w)
    expect = np.mean([np.sum(w.column_weights() * np.abs(pred[i] - gt[i])) for i in np.flatnonzero(mask)])
    assert loss == pytest.approx(expect)
    assert inf.infill_loss(pred, gt, np.zeros(6, bool), w)[0] == 0.0


def test_training_gradients_match_finite_differences():
    model = random_model(seed=3)
    gts = [constant_motion(s, T=12) for s in (10, 11)]
    inits = [inf.interpolate_init(with_gaps(g, range(3, 8))) for g in gts]
    w = inf.InfillLossWeights()
    _, grads = inf.batch_loss(model, inits, gts, w)
    flat0 = model.flat_params()
    analytic = np.concatenate([grads[n].ravel() for n in model.param_names()])
    idx = np.random.default_rng(0).choice(flat0.size, 300, replace=False)
    h = 1e-6
    num = np.empty(idx.size)
    for j, i in enumerate(idx):
        f = flat0.copy()
        f[i] += h
        model.set_flat_params(f)
        lp, _ = inf.batch_loss(model, inits, gts, w, with_grad=False)
        f[i] -= 2 * h
        model.set_flat_params(f)
        lm, _ = inf.batch_loss(model, inits, gts, w, with_grad=False)
        num[j] = (lp - lm) / (2 * h)
    model.set_flat_params(flat0)
    a = analytic[idx]
    assert np.linalg.norm(a - num) / np.linalg.norm(num) < 1e-4


def test_batched_forward_equals_per_sequence():
    model = random_model()
    toks = np.stack([inf.tokens_of(with_gaps(constant_motion(s, T=10), [4])) for s in range(3)])
    batch = model.forward(toks)
    for b in range(3):
        assert np.allclose(batch[b], model.forward(toks[b]), atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    model = random_model()
    p = tmp_path / "m.hwif"
    model.save(p)
    back = inf.InfillerModel.load(p)
    assert back.config() == model.config()
    assert np.array_equal(back.flat_params(), model.flat_params())
    assert back.to_bytes() == model.to_bytes()


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-8], lambda b: b + b"\0"])
def test_corrupt_checkpoint_rejected(mutate):
    data = random_model().to_bytes()
    with pytest.raises(CheckpointError):
        inf.InfillerModel.from_bytes(mutate(data))


def test_training_is_deterministic_and_reduces_loss():
    data = sim.training_motions(8, frames=32)
    cfg = inf.InfillerConfig(d_model=16, n_layers=1, n_heads=2, d_ffn=16, window=32, steps=40, batch=4,
                             crop=32, lr=3e-3)
    a = inf.train_infiller(data, config=cfg)
    b = inf.train_infiller(data, config=cfg)
    assert a.to_bytes() == b.to_bytes()
    assert a.history[-1] < a.history[0]


def test_training_input_validation():
    with pytest.raises(EmptyDataset):
        inf.train_infiller([])
    with pytest.raises(FrameTagMismatch):
        inf.train_infiller([constant_motion(0).replace(frame_tag="world")])


@given(st.integers(0, 10_000))
def test_interpolation_is_time_reversal_equivariant(seed):
    seq = with_gaps(constant_motion(seed), [3, 4, 5, 11, 17, 18])
    fwd = inf.interpolate_init(seq).vectors()
    rev = inf.interpolate_init(seq.reversed()).vectors()[::-1]
    assert np.allclose(fwd, rev, atol=1e-9)


def test_gap_length_histogram_is_uniform():
    from scipy.stats import chisquare
    seq = constant_motion(0, T=40)
    L_max = inf.max_gap_length(40, 0.25)
    rng = np.random.default_rng(99)
    lengths = [int(np.sum(~inf.mask_augment(seq, rng, 0.25).visible)) for _ in range(10_000)]
    counts = np.bincount(lengths, minlength=L_max + 1)[1:]
    assert counts.size == L_max and np.min(lengths) >= 1
    assert chisquare(counts).pvalue > 1e-3


def test_zero_output_head_is_identity():
    m = random_model(3)
    m.params["out_W"] = np.zeros_like(m.params["out_W"])
    m.params["out_b"] = np.zeros_like(m.params["out_b"])
    init = inf.interpolate_init(with_gaps(constant_motion(4), range(6, 12)))
    out = inf.infill_refine(m, init)
    assert np.array_equal(out.vectors(), init.vectors())

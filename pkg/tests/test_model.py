from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillrank import autodiff as ad
from skillrank.autodiff import ShapeError, Tensor
from skillrank.data import FeatureClip
from skillrank.gradcheck import MODEL_TOL, run_loss_check, run_model_check
from skillrank.layers import gru_step
from skillrank.model import (
    AssessmentModel,
    ModelConfig,
    Variant,
    attend,
    build_context,
    forward,
    fuse_features,
    model_layout,
    score_frames,
    score_video,
    score_video_variant,
    squeeze,
    step_task,
    update_attention_state,
)

import oracles

TINY = ModelConfig.tiny()


def model(config=TINY, seed=0, scale=1.0):
    m = AssessmentModel.init(config, seed=seed)
    if scale != 1.0:
        m.params = {k: v * scale for k, v in m.params.items()}
    return m


def random_clip(config, T=10, hw=(6, 6), seed=0, vid="c"):
    rng = np.random.default_rng(seed)
    return FeatureClip(vid, config.stream_channels, rng.normal(size=(T, config.in_channels, *hw)))


def dyadic(rng, shape, scale=8):
    return rng.integers(-16, 17, size=shape) / scale


# -- config ------------------------------------------------------------------

def test_config_defaults_and_presets():
    assert ModelConfig().variant is Variant.FULL
    p = ModelConfig.paper_scale()
    assert (p.fused_channels, p.hidden, p.attend, p.segments) == (256, 128, 32, 25)
    assert p.stream_channels == (2048, 2048) and p.fusion_hidden == 512
    assert ModelConfig().grid(7, 7) == (6, 6)
    assert ModelConfig(fusion_padding=1).grid(7, 7) == (8, 8)


@pytest.mark.parametrize("kw", [dict(hidden=0), dict(attend=-1), dict(stream_channels=(8,)),
                                dict(stream_channels=(1, 2, 3)), dict(variant="bogus")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_model_check_names_offending_tensor():
    m = model()
    m.params["attend.W_xa"] = np.zeros((3, 3))
    with pytest.raises(ShapeError, match="attend.W_xa"):
        m.check()
    m = model()
    del m.params["fc.weight"]
    with pytest.raises(ShapeError, match="fc.weight"):
        m.check()


# -- fusion ------------------------------------------------------------------

def test_fusion_zero_weights_gives_bias_maps():
    m = model()
    m.params["fuse.conv1.weight"][:] = 0
    m.params["fuse.conv2.weight"][:] = 0
    m.params["fuse.conv2.bias"] = np.arange(8.0)
    rng = np.random.default_rng(0)
    x = fuse_features(m.bind(), Tensor(rng.normal(size=(3, 6, 6))), Tensor(rng.normal(size=(3, 6, 6)))).data
    assert x.shape == (8, 5, 5)
    assert np.array_equal(x, np.broadcast_to(np.arange(8.0)[:, None, None], x.shape))


def test_fusion_1x1_is_local():
    cfg = ModelConfig.tiny(fusion_kernel=1)
    m = model(cfg)
    rng = np.random.default_rng(1)
    f_s, f_t = rng.normal(size=(3, 5, 5)), rng.normal(size=(3, 5, 5))
    base = fuse_features(m.bind(), Tensor(f_s), Tensor(f_t)).data
    f_t2 = f_t.copy()
    f_t2[:, 2, 3] += 1.0
    moved = fuse_features(m.bind(), Tensor(f_s), Tensor(f_t2)).data
    changed = np.any(moved != base, axis=0)
    assert changed[2, 3] and changed.sum() == 1


def test_fusion_matches_composed_conv_oracle_exactly():
    rng = np.random.default_rng(2)
    m = model()
    for k in ("fuse.conv1.weight", "fuse.conv1.bias", "fuse.conv2.weight", "fuse.conv2.bias"):
        m.params[k] = dyadic(rng, m.params[k].shape)
    f_s, f_t = dyadic(rng, (3, 6, 6)), dyadic(rng, (3, 6, 6))
    got = fuse_features(m.bind(), Tensor(f_s), Tensor(f_t)).data
    p = {k: v.tolist() for k, v in m.params.items()}
    hidden = oracles.conv2d(np.concatenate([f_s, f_t]).tolist(), p["fuse.conv1.weight"], p["fuse.conv1.bias"])
    hidden = [[[max(v, 0.0) for v in row] for row in ch] for ch in hidden]
    want = oracles.conv2d(hidden, p["fuse.conv2.weight"], p["fuse.conv2.bias"])
    assert got.tolist() == want


def test_fusion_rejects_spatial_mismatch_and_single_stream_is_identity():
    m = model()
    with pytest.raises(ShapeError):
        fuse_features(m.bind(), Tensor(np.zeros((3, 6, 6))), Tensor(np.zeros((3, 5, 6))))
    fused = model(ModelConfig.tiny(stream_channels=(8,)))
    x = np.random.default_rng(3).normal(size=(8, 5, 5))
    assert np.array_equal(fuse_features(fused.bind(), Tensor(x)).data, x)
    assert fused.params.keys().isdisjoint({"fuse.conv1.weight", "fuse.conv2.weight"})


def test_fusion_channel_count():
    m = model(ModelConfig(stream_channels=(4, 4), fused_channels=12, fusion_hidden=6))
    out = fuse_features(m.bind(), Tensor(np.zeros((4, 7, 7))), Tensor(np.zeros((4, 7, 7))))
    assert out.shape == (12, 6, 6)


# -- squeeze / context -------------------------------------------------------

def test_squeeze_examples():
    assert np.array_equal(squeeze(Tensor(np.full((3, 2, 2), 1.5))).data, [3.0] * 3)
    assert squeeze(Tensor(np.array([[[0.0, 4.0]]]))).data.tolist() == [6.0]


def test_squeeze_gradient_routes_to_argmax_and_uniformly():
    x = np.random.default_rng(4).normal(size=(2, 3, 3))
    tape = ad.Tape()
    leaf = tape.leaf(x, name="x")
    g = ad.backward(tape, ad.sum_all(squeeze(leaf)))[leaf]
    want = np.full_like(x, 1 / 9)
    for c in range(2):
        r, s = np.unravel_index(np.argmax(x[c]), (3, 3))
        want[c, r, s] += 1.0
    assert np.allclose(g, want, rtol=0, atol=1e-15)
    res = ad.grad_check(lambda p: ad.sum_all(ad.mul(squeeze(p["x"]), Tensor([0.3, -1.1]))), {"x": x})
    assert res.max_error < 1e-6


def test_build_context():
    assert build_context(Tensor([1.0, 2.0]), Tensor([3.0])).data.tolist() == [1.0, 2.0, 3.0]
    with pytest.raises(ShapeError):
        build_context(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 1))))


def test_context_at_first_step_has_zero_tail_and_length_c_plus_d():
    m = model()
    _, tr = score_video(random_clip(TINY), m)
    assert all(c.shape == (TINY.fused_channels + TINY.hidden,) for c in tr.context)
    assert np.array_equal(tr.context[0][TINY.fused_channels:], np.zeros(TINY.hidden))
    assert np.array_equal(tr.context[0][:TINY.fused_channels], tr.xbar[0])
    assert np.array_equal(tr.context[2][TINY.fused_channels:], tr.h_task[1])


# -- recurrent states --------------------------------------------------------

def zero_model(config=TINY):
    m = model(config)
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    return m


def test_attention_state_zero_fixed_point_and_delegation():
    zero = zero_model().bind()
    c = Tensor(np.random.default_rng(5).normal(size=TINY.fused_channels + TINY.hidden))
    assert np.array_equal(update_attention_state(zero, c, Tensor(np.zeros(16))).data, np.zeros(16))
    net = model().bind()
    h = Tensor(np.random.default_rng(6).normal(size=16))
    assert np.array_equal(update_attention_state(net, c, h).data, gru_step(net.gru("att_rnn"), c, h).data)


def test_task_state_zero_fixed_point_and_delegation():
    zero = zero_model().bind()
    v = Tensor(np.random.default_rng(7).normal(size=TINY.fused_channels))
    assert np.array_equal(step_task(zero, v, Tensor(np.zeros(16))).data, np.zeros(16))
    net = model().bind()
    h = Tensor(np.random.default_rng(8).normal(size=16))
    assert np.array_equal(step_task(net, v, h).data, gru_step(net.gru("task_rnn"), v, h).data)


def test_states_depend_on_first_frame():
    m = model(seed=1)
    clip = random_clip(TINY, T=4, seed=9)
    _, base = score_video(clip, m, indices=[0, 1, 2, 3])
    data = clip.data.copy()
    data[0] += 0.5
    _, moved = score_video(FeatureClip("c", clip.stream_channels, data), m, indices=[0, 1, 2, 3])
    assert not np.allclose(base.h_att[3], moved.h_att[3])
    assert not np.allclose(base.h_task[3], moved.h_task[3])


# -- attention ---------------------------------------------------------------

def test_attend_constant_map_gives_uniform_weights():
    net = model(seed=2).bind()
    x = Tensor(np.broadcast_to(np.random.default_rng(10).normal(size=(8, 1, 1)), (8, 5, 5)).copy())
    alpha, v = attend(net, x, Tensor(np.random.default_rng(11).normal(size=16)))
    assert np.allclose(alpha.data, 1 / 25, rtol=0, atol=1e-15)
    assert np.allclose(v.data, x.data[:, 0, 0], rtol=1e-14)


def attention_oracle(params, x, h):
    p = {k: v.tolist() for k, v in params.items()}
    return oracles.attention(x.tolist(), h.tolist(), p["attend.W_xa"], p["attend.b_xa"],
                             p["attend.W_ha"], p["attend.b_ha"], p["attend.omega"][0])


def test_attend_matches_loop_oracle():
    m = model(seed=3)
    rng = np.random.default_rng(12)
    x, h = rng.normal(size=(8, 5, 5)), rng.normal(size=16)
    alpha, v = attend(m.bind(), Tensor(x), Tensor(h))
    logits, alpha_ref, _ = attention_oracle(m.params, x, h)
    assert np.allclose(alpha.data, alpha_ref, rtol=1e-12, atol=0)
    # pooling given the weights is exact: same terms, same order
    assert v.data.tolist() == oracles.weighted_sum(x.tolist(), alpha.data.tolist())
    # a uniform shift of every logit leaves the weights alone
    shifted = oracles.softmax([a + 3.7 for a in logits])
    assert np.allclose(shifted, alpha_ref, rtol=1e-13, atol=0)


def test_attend_batched_equals_single():
    m = model(seed=4)
    rng = np.random.default_rng(13)
    x, h = rng.normal(size=(3, 8, 5, 5)), rng.normal(size=(3, 16))
    alpha, v = attend(m.bind(), Tensor(x), Tensor(h))
    for b in range(3):
        a1, v1 = attend(m.bind(), Tensor(x[b]), Tensor(h[b]))
        assert np.allclose(alpha.data[b], a1.data, rtol=1e-14, atol=1e-16)
        assert np.allclose(v.data[b], v1.data, rtol=1e-14, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 20.0), st.floats(0.1, 10.0))
def test_alpha_simplex_and_pooled_hull(seed, x_scale, p_scale):
    m = model(seed=seed % 1000, scale=p_scale)
    frames = x_scale * np.random.default_rng(seed).normal(size=(2, 4, 6, 6, 6))
    _, tr = score_frames(m, frames, trace=True)
    for t in range(4):
        alpha = tr.alpha[t]
        assert np.all((alpha >= 0) & (alpha <= 1))
        assert np.all(np.abs(alpha.sum(axis=-1) - 1) <= 1e-6)


# -- full forward ------------------------------------------------------------

def test_score_zero_params_equals_fc_bias():
    m = zero_model()
    clip = random_clip(TINY)
    assert score_video(clip, m)[0] == 0.0
    m.params["fc.bias"] = np.array([0.7])
    assert score_video(clip, m)[0] == 0.7
    assert score_video(random_clip(TINY, seed=5), m)[0] == 0.7


def test_trace_shapes():
    clip = random_clip(TINY, T=20)
    s, tr = score_video(clip, model())
    assert len(tr) == len(tr.alpha) == len(tr.xbar) == len(tr.pooled) == TINY.segments
    assert tr.grid == (5, 5)
    assert all(a.shape == (25,) for a in tr.alpha)
    assert all(h.shape == (16,) for h in tr.h_att + tr.h_task)
    assert all(v.shape == (8,) for v in tr.pooled)
    assert tr.score == s


def test_frame_order_matters():
    m = model(seed=5)
    clip = random_clip(TINY, T=4, seed=14)
    fwd = score_video(clip, m, indices=[0, 1, 2, 3])[0]
    rev = score_video(clip, m, indices=[3, 2, 1, 0])[0]
    assert fwd != rev


def test_empty_clip_rejected():
    with pytest.raises(ValueError, match="T>=1"):
        FeatureClip("e", TINY.stream_channels, np.zeros((0, 6, 6, 6)))


def test_wrong_channel_count_rejected():
    with pytest.raises(ShapeError):
        score_frames(model(), np.zeros((1, 4, 5, 6, 6)))


def test_causality_truncated_prefix_reproduces_trace():
    m = model(seed=6)
    frames = np.random.default_rng(15).normal(size=(1, 4, 6, 6, 6))
    _, full = score_frames(m, frames, trace=True)
    for t in range(1, 4):
        _, part = score_frames(m, frames[:, :t], trace=True)
        for name in ("xbar", "context", "h_att", "alpha", "pooled", "h_task"):
            for i in range(t):
                assert np.array_equal(getattr(part, name)[i], getattr(full, name)[i])


def test_scoring_is_deterministic_and_batch_independent():
    m = model(seed=7)
    frames = np.random.default_rng(16).normal(size=(3, 4, 6, 6, 6))
    a, _ = score_frames(m, frames)
    b, _ = score_frames(m, frames)
    assert a.tobytes() == b.tobytes()
    for i in range(3):
        assert abs(score_frames(m, frames[i:i + 1])[0][0] - a[i]) < 1e-13


def test_inference_records_nothing():
    m = model()
    s, _ = forward(m.bind(), np.zeros((1, 4, 6, 6, 6)))
    assert s.tape is None


# -- variants ----------------------------------------------------------------

def test_full_variant_delegates_to_score_video():
    m = model(seed=8)
    clip = random_clip(TINY, seed=17)
    assert score_video_variant(clip, m, "full") == score_video(clip, m)[0]


def test_no_attention_equals_full_on_spatially_constant_input():
    m = model(seed=9)
    rng = np.random.default_rng(18)
    data = np.broadcast_to(rng.normal(size=(6, 6, 1, 1)), (6, 6, 6, 6)).copy()
    clip = FeatureClip("k", TINY.stream_channels, data)
    full = score_video_variant(clip, m, Variant.FULL)
    plain = score_video_variant(clip, m, Variant.NO_ATTENTION)
    assert abs(full - plain) < 1e-12


def test_spatial_permutation_invariance_on_fused_clips():
    cfg = ModelConfig.tiny(stream_channels=(8,))
    rng = np.random.default_rng(19)
    data = rng.normal(size=(6, 8, 5, 5))
    perm = rng.permutation(25)
    shuffled = data.reshape(6, 8, 25)[:, :, perm].reshape(6, 8, 5, 5)
    clip, clip_p = FeatureClip("a", (8,), data), FeatureClip("a", (8,), shuffled)
    plain = model(replace(cfg, variant=Variant.NO_ATTENTION), seed=10)
    assert abs(score_video(clip, plain)[0] - score_video(clip_p, plain)[0]) < 1e-12
    # attention pooling is itself a set function of the locations, so Full is
    # invariant too once no convolution mixes neighbouring cells
    full = model(cfg, seed=10)
    assert abs(score_video(clip, full)[0] - score_video(clip_p, full)[0]) < 1e-12


def test_spatial_permutation_changes_two_stream_scores():
    rng = np.random.default_rng(20)
    data = rng.normal(size=(6, 6, 6, 6))
    perm = rng.permutation(36)
    shuffled = data.reshape(6, 6, 36)[:, :, perm].reshape(6, 6, 6, 6)
    for v in (Variant.FULL, Variant.NO_ATTENTION):
        m = model(ModelConfig.tiny(variant=v), seed=11)
        a = score_video(FeatureClip("a", (3, 3), data), m)[0]
        b = score_video(FeatureClip("a", (3, 3), shuffled), m)[0]
        assert a != b


def gru_count(n_in, d):
    return 3 * (n_in * d + d * d + d)


@pytest.mark.parametrize("variant", list(Variant))
def test_parameter_accounting(variant):
    c, d, a, k, cin, hid = 8, 16, 8, 2, 6, 8
    cfg = ModelConfig.tiny(variant=variant)
    fusion = cin * hid * k * k + hid + hid * c + c
    attn = a * c + a + a * d + a + a
    att_state = {Variant.FULL: gru_count(c + d, d), Variant.XBAR_ONLY: gru_count(c, d),
                 Variant.HTASK_ONLY: gru_count(d, d), Variant.NO_RNN_ATT: (c + d) * d + d,
                 Variant.NO_ATTENTION: 0}[variant]
    expected = fusion + gru_count(c, d) + d + 1 + att_state + (attn if variant.has_attention else 0)
    m = model(cfg)
    assert m.num_parameters() == expected
    if variant is Variant.NO_ATTENTION:
        assert not any(k.startswith(("attend.", "att_rnn.", "att_fc.")) for k in m.params)
    assert list(m.params) == list(model_layout(cfg))


def test_fc_bias_flag():
    m = model(ModelConfig.tiny(fc_bias=False))
    assert "fc.bias" not in m.params
    assert np.isfinite(score_video(random_clip(TINY), m)[0])


def test_with_variant_keeps_shared_tensors():
    m = model(seed=12)
    other = m.with_variant(Variant.XBAR_ONLY, seed=99)
    assert np.array_equal(other.params["task_rnn.W_z"], m.params["task_rnn.W_z"])
    assert other.params["att_rnn.W_z"].shape == (16, 8)
    other.check()


# -- gradient checks ---------------------------------------------------------

@pytest.mark.parametrize("variant", [Variant.FULL, Variant.NO_ATTENTION, Variant.NO_RNN_ATT,
                                     Variant.XBAR_ONLY])
def test_model_gradient_check(variant):
    outcome = run_model_check(1, ModelConfig.tiny(variant=variant))
    assert set(outcome.result.errors) == set(model_layout(ModelConfig.tiny(variant=variant)))
    assert outcome.tol == MODEL_TOL
    assert outcome.passed, outcome.line()


def test_model_gradient_check_htask_only():
    # this variant's attention-GRU gradients are ~1e-9 at fresh init; central
    # differences at 1e-5 sit at the float64 noise floor there, while a 1e-3
    # step adds truncation error on the fusion weights.  Each group is checked
    # at the step that resolves it; the analytic side does not depend on the step.
    config = ModelConfig.tiny(variant=Variant.HTASK_ONLY)
    fine = run_model_check(1, config).result.errors
    wide = run_model_check(1, config, step=1e-3).result.errors
    for name in model_layout(config):
        err = wide[name] if name.startswith("att_rnn.") else fine[name]
        assert err < MODEL_TOL, (name, fine[name], wide[name])


def test_loss_gradient_check():
    # the pairwise loss at the standard step; att_rnn.U_z sits near 2e-4 here
    # because its gradient entries are ~1e-8 and the loss differences at a
    # 1e-5 step are resolved only to float64 round-off
    outcome = run_loss_check(1)
    assert outcome.passed, outcome.line()


def test_loss_gradient_check_wider_step_diagnostic():
    # the same analytic gradients agree with central differences once the step
    # lifts the loss differences above round-off
    outcome = run_loss_check(1, step=1e-4)
    errors = dict(outcome.result.errors)
    assert errors.pop("fc.bias (exact zero)") == 0.0
    assert errors.keys() == set(model_layout(TINY)) - {"fc.bias"}
    assert outcome.passed, outcome.line()

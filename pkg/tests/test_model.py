import numpy as np
import pytest

from caranet import tensor as T
from caranet.model import (ARAStage, AxialAttention, CaraNet, CaraNetConfig,
                           CFPBlock, Conv2d, ParamStore, PartialDecoder,
                           cfp_dilation_rates, receptive_field_probe,
                           reverse_map)
from caranet.tensor import Tensor, grad_check


def make_image(rng, n, h, w, dtype=np.float32):
    return Tensor(rng.uniform(0.0, 1.0, (n, 3, h, w)).astype(dtype))


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ValueError, match="divisible by 16"):
        CaraNetConfig(input_size=(60, 64))
    with pytest.raises(ValueError, match="multiple of 4"):
        CaraNetConfig(base_channels=6)
    with pytest.raises(ValueError, match="cfp_rate"):
        CaraNetConfig(cfp_rate=-1)


def test_cfp_rates_from_knob():
    assert cfp_dilation_rates(8) == [1, 2, 4, 8]
    assert cfp_dilation_rates(0) == [1, 1, 1, 1]
    assert cfp_dilation_rates(16) == [2, 4, 8, 16]
    assert cfp_dilation_rates(4) == [1, 1, 2, 4]


# ---------------------------------------------------------------------------
# encoder shapes (resolution formula h/2^(i-1))


@pytest.mark.parametrize("hw,expect", [
    (352, {3: 88, 5: 22}),
    (256, {5: 16}),
    (64, {3: 16, 4: 8, 5: 4}),
])
def test_encoder_level_extents(hw, expect, rng):
    net = CaraNet(CaraNetConfig(input_size=(hw, hw)))
    feats = net.encoder(make_image(rng, 1, hw, hw))
    all_feats = feats.as_list()
    for i, f in enumerate(all_feats, 1):
        assert f.shape[2:] == (hw // 2 ** (i - 1), hw // 2 ** (i - 1))
    for lvl, ext in expect.items():
        assert all_feats[lvl - 1].shape[2] == ext
    chans = [f.shape[1] for f in all_feats]
    assert chans == sorted(chans)  # non-decreasing with depth


def test_encoder_rejects_indivisible():
    net = CaraNet(CaraNetConfig(input_size=(64, 64)))
    with pytest.raises(ValueError, match="divisible"):
        net.encoder(Tensor(np.zeros((1, 3, 60, 60), dtype=np.float32)))


# ---------------------------------------------------------------------------
# partial decoder


def _pd_inputs(rng, c3, c4, c5, e3):
    f3 = Tensor(rng.uniform(-1, 1, (1, c3, e3, e3)).astype(np.float32))
    f4 = Tensor(rng.uniform(-1, 1, (1, c4, e3 // 2, e3 // 2)).astype(np.float32))
    f5 = Tensor(rng.uniform(-1, 1, (1, c5, e3 // 4, e3 // 4)).astype(np.float32))
    return f3, f4, f5


def test_partial_decoder_output_extent(rng):
    store = ParamStore(0)
    pd = PartialDecoder(store, 16, 32, 32, 8)
    out = pd(*_pd_inputs(rng, 16, 32, 32, 88))
    assert out.shape == (1, 1, 88, 88)
    out = pd(*_pd_inputs(rng, 16, 32, 32, 16))
    assert out.shape == (1, 1, 16, 16)


def test_partial_decoder_zero_inputs_uniform(rng):
    store = ParamStore(0)
    pd = PartialDecoder(store, 8, 8, 8, 4)
    z = lambda c, e: Tensor(np.zeros((1, c, e, e), dtype=np.float32))
    out = pd(z(8, 16), z(8, 8), z(8, 4))
    assert float(out.data.max()) == float(out.data.min())


def test_partial_decoder_ratio_violation(rng):
    store = ParamStore(0)
    pd = PartialDecoder(store, 8, 8, 8, 4)
    f3, f4, _ = _pd_inputs(rng, 8, 8, 8, 16)
    bad_f5 = Tensor(np.zeros((1, 8, 3, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="4:2:1"):
        pd(f3, f4, bad_f5)


# ---------------------------------------------------------------------------
# CFP block


def test_cfp_preserves_shape_and_zero_maps_to_zero(rng):
    store = ParamStore(0)
    cfp = CFPBlock(store, "cfp", 8, 8)
    x = Tensor(rng.uniform(-1, 1, (2, 8, 6, 6)).astype(np.float32))
    assert cfp(x).shape == x.shape
    zero = Tensor(np.zeros((1, 8, 6, 6), dtype=np.float32))
    np.testing.assert_array_equal(cfp(zero).data, 0.0)


def test_cfp_channel_divisibility():
    with pytest.raises(ValueError, match="divisible"):
        CFPBlock(ParamStore(0), "cfp", 6, 8)


def test_cfp_footprint_exceeds_3_within_55():
    store = ParamStore(3)
    cfp = CFPBlock(store, "cfp", 8, 8)
    probe = receptive_field_probe(cfp, 8, 64, seed=0)
    assert not probe.truncated
    assert probe.height > 3 and probe.width > 3
    assert probe.height <= 55 and probe.width <= 55


def test_cfp_gradient_check_desk_width(rng):
    store = ParamStore(1)
    cfp = CFPBlock(store, "cfp", 8, 8)
    x = rng.uniform(-1, 1, (1, 8, 6, 6))
    err = grad_check(lambda t: T.tsum(T.mul(cfp(t), cfp(t))), Tensor(x))
    assert err < 1e-3


# ---------------------------------------------------------------------------
# axial attention


def test_axial_attention_preserves_shape(rng):
    att = AxialAttention(ParamStore(0), "att", 8)
    x = Tensor(rng.uniform(-1, 1, (1, 8, 6, 6)).astype(np.float32))
    assert att(x).shape == x.shape


def _zero_qk_identity_v(att, channels):
    for axis in ("h", "w"):
        cq, ck, cv = att.qkv[axis]
        for conv in (cq, ck):
            conv.w.value.data[:] = 0.0
            conv.b.value.data[:] = 0.0
        cv.w.value.data[:] = np.eye(channels, dtype=np.float32)[:, :, None, None]
        cv.b.value.data[:] = 0.0


def _rms_norm_np(x, eps=1e-6):
    ms = (x.astype(np.float64) ** 2).mean(axis=(1, 2, 3), keepdims=True)
    return x / np.sqrt(ms + eps)


def test_axial_attention_zero_qk_closed_form(rng):
    att = AxialAttention(ParamStore(0), "att", 4)
    _zero_qk_identity_v(att, 4)
    x = rng.uniform(-1, 1, (2, 4, 5, 3)).astype(np.float32)
    got_h = att.attend(Tensor(x), "h")
    v = _rms_norm_np(x)  # identity value conv on the normalized input
    expected = 0.5 * v.sum(axis=2, keepdims=True) * np.ones_like(x)
    np.testing.assert_allclose(got_h.data, expected, rtol=0, atol=1e-5)
    got = att(Tensor(x))
    yn = _rms_norm_np(expected.astype(np.float32))
    full = 0.5 * yn.sum(axis=3, keepdims=True) * np.ones_like(x)
    np.testing.assert_allclose(got.data, full, rtol=0, atol=1e-4)


def test_axial_attention_1x1_degenerate(rng):
    att = AxialAttention(ParamStore(0), "att", 4)
    x = rng.uniform(-1, 1, (1, 4, 1, 1)).astype(np.float32)
    xn = Tensor(_rms_norm_np(x).astype(np.float32))
    q, k, v = (conv(xn) for conv in att.qkv["h"])
    weight = 1.0 / (1.0 + np.exp(-(q.data * k.data).sum() / 2.0))
    assert 0.0 < weight < 1.0
    got = att.attend(Tensor(x), "h")
    np.testing.assert_allclose(got.data, weight * v.data, rtol=0, atol=1e-5)


# ---------------------------------------------------------------------------
# reverse attention


def test_reverse_map_values():
    s = Tensor(np.array([[[[0.0, 20.0]]]]))
    r = reverse_map(s)
    assert r.data[0, 0, 0, 0] == pytest.approx(0.5)
    assert r.data[0, 0, 0, 1] < 1e-8


def test_reverse_plus_sigmoid_is_one(rng):
    s = Tensor(rng.uniform(-30, 30, (1, 1, 5, 5)))
    total = T.add(reverse_map(s), T.sigmoid(s))
    np.testing.assert_allclose(total.data, 1.0, rtol=0, atol=1e-6)


def test_ara_identities_with_synthetic_r(rng):
    aa = rng.uniform(-2, 2, (1, 4, 5, 5))
    r = (rng.uniform(0, 1, (1, 1, 5, 5)) < 0.5).astype(np.float64)
    ara = T.mul(Tensor(aa), T.expand_axis(Tensor(r), 1, 4)).data
    np.testing.assert_array_equal(ara[:, :, r[0, 0] == 0.0], 0.0)
    np.testing.assert_array_equal(ara[:, :, r[0, 0] == 1.0], aa[:, :, r[0, 0] == 1.0])


def test_monotone_suppression():
    logits = np.linspace(-10.0, 10.0, 21)
    mags = []
    for s in logits:
        r = reverse_map(Tensor(np.full((1, 1, 1, 1), s))).data[0, 0, 0, 0]
        mags.append(abs(2.5) * r)  # |AA| held fixed at 2.5
    assert all(mags[i + 1] <= mags[i] for i in range(len(mags) - 1))


def _randomize_head(stage, rng):
    stage.head.w.value.data[:] = rng.uniform(-0.5, 0.5, stage.head.w.value.shape).astype(np.float32)


def test_ara_stage_confident_previous_passes_through(rng):
    stage = ARAStage(ParamStore(0), "st", 4)
    _randomize_head(stage, rng)
    feat = Tensor(rng.uniform(-1, 1, (1, 4, 8, 8)).astype(np.float32))
    s_prev = Tensor(np.full((1, 1, 4, 4), 40.0, dtype=np.float32))
    _, s = stage(feat, s_prev)
    np.testing.assert_allclose(s.data, 40.0, rtol=0, atol=1e-4)


def test_ara_stage_neutral_previous_halves_attention(rng):
    stage = ARAStage(ParamStore(0), "st", 4)
    _randomize_head(stage, rng)
    feat = Tensor(rng.uniform(-1, 1, (1, 4, 8, 8)).astype(np.float32))
    s_prev = Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32))
    _, s = stage(feat, s_prev)
    aa = stage.att(feat)
    expected = stage.head(T.scale(aa, 0.5)).data
    np.testing.assert_allclose(s.data, expected, rtol=0, atol=1e-5)


def test_ara_stage_extents_from_coarser_global_map(rng):
    stage = ARAStage(ParamStore(0), "st", 4)
    feat = Tensor(rng.uniform(-1, 1, (1, 4, 22, 22)).astype(np.float32))
    s_g = Tensor(rng.uniform(-1, 1, (1, 1, 88, 88)).astype(np.float32))
    _, s5 = stage(feat, s_g)
    assert s5.shape == (1, 1, 22, 22)


# ---------------------------------------------------------------------------
# full network


def test_forward_extents_352(rng):
    net = CaraNet(CaraNetConfig(input_size=(352, 352)))
    preds = net.forward(make_image(rng, 1, 352, 352))
    assert preds.s_g.shape == (1, 1, 88, 88)
    assert preds.s5.shape == (1, 1, 22, 22)
    assert preds.s4.shape == (1, 1, 44, 44)
    assert preds.s3.shape == (1, 1, 88, 88)
    assert preds.final.shape == (1, 1, 352, 352)


def test_forward_bit_determinism(rng):
    img = make_image(rng, 1, 64, 64)
    a = CaraNet(CaraNetConfig(seed=7)).forward(img)
    b = CaraNet(CaraNetConfig(seed=7)).forward(img)
    assert np.array_equal(a.final.data, b.final.data)
    assert np.array_equal(a.s_g.data, b.s_g.data)


@pytest.mark.parametrize("use_cfp,use_ara", [(False, False), (False, True), (True, False)])
def test_ablation_variants_forward_and_train(use_cfp, use_ara, rng):
    from caranet.train import Adam, multiscale_step

    net = CaraNet(CaraNetConfig(input_size=(32, 32), use_cfp=use_cfp, use_ara=use_ara))
    imgs = rng.uniform(0, 1, (4, 3, 32, 32)).astype(np.float32)
    masks = (rng.uniform(0, 1, (4, 1, 32, 32)) < 0.1).astype(np.float32)
    opt = Adam(net.parameters())
    losses = multiscale_step(net, opt, imgs, masks, (1.0,))
    assert np.isfinite(losses).all()


def test_to_dtype_float64_forward(rng):
    net = CaraNet(CaraNetConfig(input_size=(32, 32))).to_dtype(np.float64)
    preds = net.forward(make_image(rng, 1, 32, 32, dtype=np.float64))
    assert preds.final.dtype == np.float64


# ---------------------------------------------------------------------------
# receptive field probe


def test_probe_single_conv():
    store = ParamStore(0)
    conv = Conv2d(store, "c", 1, 1, 3, padding=1)
    probe = receptive_field_probe(conv, 1, 16, seed=1)
    assert probe.as_tuple() == (3, 3) and not probe.truncated


def test_probe_dilated_conv():
    store = ParamStore(0)
    conv = Conv2d(store, "c", 1, 1, 3, padding=8, dilation=8)
    probe = receptive_field_probe(conv, 1, 40, seed=1)
    assert probe.as_tuple() == (17, 17)


def test_probe_reports_truncation():
    store = ParamStore(0)
    conv = Conv2d(store, "c", 1, 1, 3, padding=8, dilation=8)
    probe = receptive_field_probe(conv, 1, 16, seed=1)
    assert probe.truncated

from dataclasses import replace

import numpy as np
import pytest

from rwcnet import tensor as T
from rwcnet.config import NetworkConfig, StageConfig, apply_ablation, smoke_config
from rwcnet.correlation import local_cost_volume
from rwcnet.model import (
    context_encode,
    feature_encode,
    gru_step,
    init_params,
    multiscale_forward,
    prepare_stage,
    run_stage,
    subnetwork_forward,
)
from rwcnet.params import ParameterSet
from rwcnet.spatial import Volume3D, upsample_field, warp
from rwcnet.tensor import Tensor

from oracles import gradcheck


def tiny_net(**kw):
    stages = (StageConfig(1.0, 3, 1.0, 1, 10),)
    base = dict(full_extent=(6, 6, 6), stages=stages, feature_channels=2, hidden_channels=4, radius=1, dropout_p=0.0)
    base.update(kw)
    return NetworkConfig(**base)


def randomize(params, rng, scale=0.3):
    """Give every weight (including the zero-init head) random values."""
    for _, t in params.items():
        t.data = (rng.normal(size=t.shape) * scale).astype(t.dtype)
    return params


def zero(params):
    for _, t in params.items():
        t.data = np.zeros_like(t.data)
    return params


def vol(rng, shape=(16, 16, 16)):
    return Volume3D(rng.random((1, *shape)).astype(np.float32), (1.5, 1.5, 1.5))


# -- encoders ------------------------------------------------------------


def test_feature_encoder_zero_weights_and_shape():
    net = smoke_config().network
    params = init_params(net)
    img = np.random.default_rng(0).random((1, 16, 16, 16)).astype(np.float32)
    assert feature_encode(img, params, "stage0").shape == (8, 16, 16, 16)
    assert not feature_encode(img, zero(params), "stage0").data.any()


def test_feature_encoder_training_without_dropout_equals_eval():
    params = init_params(smoke_config().network)
    img = np.random.default_rng(0).random((1, 8, 8, 8)).astype(np.float32)
    a = feature_encode(img, params, "stage0", 0.0, training=True, rng=np.random.default_rng(0)).data
    b = feature_encode(img, params, "stage0", 0.0, training=False).data
    assert a.tobytes() == b.tobytes()


def test_context_encoder_zero_weights_shape_and_bounds():
    params = init_params(smoke_config().network)
    img = np.random.default_rng(0).random((1, 16, 16, 16)).astype(np.float32)
    h = context_encode(img, params, "stage0").data
    assert h.shape == (16, 16, 16, 16)
    assert np.abs(h).max() < 1
    assert not context_encode(img, zero(params), "stage0").data.any()


def test_context_encoder_adds_cached_state_inside_tanh():
    params = zero(init_params(smoke_config().network))
    cached = np.full((16, 4, 4, 4), 0.3, np.float32)
    h = context_encode(np.zeros((1, 4, 4, 4), np.float32), params, "stage1", Tensor(cached)).data
    np.testing.assert_allclose(h, np.tanh(0.3), rtol=1e-6)


# -- GRU -----------------------------------------------------------------


def gru_params(h_ch=4, x_ch=3, seed=0):
    net = tiny_net(hidden_channels=h_ch)
    params = init_params(net, seed)
    # rebuild gates for the requested input width
    rng = np.random.default_rng(seed)
    for g in "zrq":
        params[f"stage0.gru.conv{g}.weight"].data = rng.normal(size=(h_ch, h_ch + x_ch, 3, 3, 3)) * 0.2
    return params


def test_gru_zero_weights():
    params = zero(gru_params())
    h = np.random.default_rng(0).uniform(-1, 1, (4, 4, 4, 4)).astype(np.float32)
    x = np.random.default_rng(1).normal(size=(3, 4, 4, 4)).astype(np.float32)
    h2, dd = gru_step(Tensor(h), Tensor(x), params, "stage0")
    np.testing.assert_allclose(h2.data, 0.5 * h, rtol=1e-6)
    assert not dd.data.any()


def test_gru_zero_head_and_bounded_hidden():
    params = gru_params()
    rng = np.random.default_rng(2)
    h = Tensor(rng.uniform(-0.999, 0.999, (4, 4, 4, 4)))
    x = Tensor(rng.normal(size=(3, 4, 4, 4)) * 5)
    for _ in range(5):
        h, dd = gru_step(h, x, params, "stage0")
        assert np.abs(h.data).max() < 1
        assert not dd.data.any()


def test_gru_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        gru_step(T.zeros((4, 3, 3, 3)), T.zeros((2, 3, 3, 3)), gru_params(), "stage0")


@pytest.mark.parametrize("seed", range(5))
def test_gru_gradients(seed):
    rng = np.random.default_rng(seed)
    params = randomize(gru_params(seed=seed), rng)
    names = ["stage0.gru.convz.weight", "stage0.gru.convq.weight", "stage0.head.conv2.weight"]
    h0 = rng.uniform(-0.9, 0.9, (4, 3, 3, 3))
    x0 = rng.normal(size=(3, 3, 3, 3))
    proj_h, proj_d = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=(3, 3, 3, 3))

    def fn(h, x, *ws):
        p = ParameterSet({**{n: Tensor(t.data) for n, t in params.items()}, **dict(zip(names, ws))})
        h2, dd = gru_step(h, x, p, "stage0")
        return T.sum(T.mul(h2, Tensor(proj_h))) + T.sum(T.mul(dd, Tensor(proj_d)))

    arrays = [h0, x0] + [params[n].data for n in names]
    assert gradcheck(fn, arrays) < 1e-4


# -- sub-network ---------------------------------------------------------


def test_untrained_subnetwork_returns_initial_field_exactly():
    net = smoke_config().network
    params = init_params(net)
    rng = np.random.default_rng(0)
    f, m = rng.random((2, 1, 8, 8, 8)).astype(np.float32)
    d0 = rng.normal(size=(3, 8, 8, 8)).astype(np.float32)
    h0 = context_encode(m, params, "stage0")
    d, h = subnetwork_forward(f, m, h0, Tensor(d0), params, 0, net)
    assert d.data.tobytes() == d0.tobytes()
    assert np.abs(h.data).max() < 1


def test_single_step_equals_manual_composition():
    net = tiny_net()
    rng = np.random.default_rng(3)
    params = randomize(init_params(net), rng)
    f, m = rng.random((2, 1, 6, 6, 6))
    d0 = rng.normal(size=(3, 6, 6, 6)) * 0.5
    with T.precision(np.float64):
        h0 = context_encode(m, params, "stage0")
        d, h = subnetwork_forward(f, m, h0, Tensor(d0), params, 0, net, steps=1)
        ff, fm = feature_encode(f, params, "stage0"), feature_encode(m, params, "stage0")
        cv = local_cost_volume(ff, warp(fm, Tensor(d0)), 1)
        h_ref, dd = gru_step(h0, T.concat([cv, Tensor(d0), Tensor(m)]), params, "stage0")
    np.testing.assert_allclose(d.data, d0 + dd.data, atol=1e-12)
    np.testing.assert_allclose(h.data, h_ref.data, atol=1e-12)


def test_subnetwork_needs_a_step():
    net = tiny_net()
    params = init_params(net)
    z = np.zeros((1, 6, 6, 6), np.float32)
    with pytest.raises(ValueError):
        subnetwork_forward(z, z, T.zeros((4, 6, 6, 6)), T.zeros((3, 6, 6, 6)), params, 0, net, steps=0)


def test_no_corr_input_width():
    net = apply_ablation(smoke_config(), "no_corr").network
    assert net.gru_input_channels == 2 * net.feature_channels + 3 + 1
    params = init_params(net)
    assert params["stage0.gru.convz.weight"].shape[1] == net.hidden_channels + 2 * 8 + 4
    rng = np.random.default_rng(0)
    f, m = rng.random((2, 1, 8, 8, 8)).astype(np.float32)
    d, _ = subnetwork_forward(f, m, context_encode(m, params, "stage0"), T.zeros((3, 8, 8, 8)), params, 0, net)
    assert d.shape == (3, 8, 8, 8)


@pytest.mark.parametrize("seed", range(5))
def test_subnetwork_gradients(seed):
    net = tiny_net(full_extent=(4, 4, 4))
    rng = np.random.default_rng(seed)
    params = randomize(init_params(net, seed), rng, 0.2)
    # a small head keeps the step-1 field inside (0.1, 0.5): no lattice crossings under perturbation
    params["stage0.head.conv2.weight"].data *= 0.02
    f, m = rng.random((2, 1, 4, 4, 4))
    # non-integer initial field keeps trilinear sampling away from lattice kinks
    d0 = rng.uniform(0.2, 0.4, (3, 4, 4, 4))
    proj = rng.normal(size=(3, 4, 4, 4))
    name = "stage0.feat.conv1.weight"

    def fn(w):
        p = ParameterSet({**{n: Tensor(t.data) for n, t in params.items()}, name: w})
        h0 = context_encode(Tensor(m), p, "stage0")
        d, _ = subnetwork_forward(Tensor(f), Tensor(m), h0, Tensor(d0), p, 0, net, steps=2)
        return T.sum(T.mul(d, Tensor(proj)))

    # whole-network check: a 1e-5 step, since 1e-3 can straddle a leaky-ReLU kink
    # somewhere in the encoder stack (per-op checks above use the 1e-3 step)
    assert gradcheck(fn, [params[name].data], eps=1e-5) < 1e-4


# -- multiscale ----------------------------------------------------------


def test_untrained_network_is_identity_registration():
    cfg = smoke_config().network
    rng = np.random.default_rng(0)
    fixed, moving = vol(rng, (32, 32, 32)), vol(rng, (32, 32, 32))
    res = multiscale_forward(fixed, moving, init_params(cfg), cfg)
    assert res.field.shape == (3, 32, 32, 32)
    assert not res.field.any()
    assert warp(moving, res.field).data.tobytes() == moving.data.tobytes()
    assert [max(s) for s in res.step_max_delta] == [0.0, 0.0]


def trained_like(cfg, seed=0):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    for name in params.names():
        if name.endswith("head.conv2.weight"):
            params[name].data = (rng.normal(size=params[name].shape) * 0.05).astype(np.float32)
    return params


def test_single_resolution_equals_quarter_scale_subnetwork():
    cfg = apply_ablation(smoke_config(), "single_res").network
    params = trained_like(cfg)
    rng = np.random.default_rng(1)
    fixed, moving = vol(rng, (32, 32, 32)), vol(rng, (32, 32, 32))
    res = multiscale_forward(fixed, moving, params, cfg)
    f4 = fixed.data.reshape(1, 8, 4, 8, 4, 8, 4).mean(axis=(2, 4, 6))
    m4 = moving.data.reshape(1, 8, 4, 8, 4, 8, 4).mean(axis=(2, 4, 6))
    with T.no_grad():
        h0 = context_encode(m4, params, "stage0")
        d, _ = subnetwork_forward(f4, m4, h0, T.zeros((3, 8, 8, 8)), params, 0, cfg)
        expected = upsample_field(d, 4).data
    assert res.field.shape == (3, 32, 32, 32)
    assert np.abs(expected).max() > 0
    np.testing.assert_array_equal(res.field, expected)


def test_patch_order_does_not_change_stage_field():
    cfg = smoke_config().network
    params = trained_like(cfg)
    rng = np.random.default_rng(2)
    fixed, moving = vol(rng, (32, 32, 32)), vol(rng, (32, 32, 32))
    prior = rng.normal(size=(3, 8, 8, 8)).astype(np.float32)
    hidden = rng.uniform(-1, 1, (16, 8, 8, 8)).astype(np.float32)
    inputs = prepare_stage(fixed, moving, 1, cfg, prior, hidden, 0.25)
    a, ha = run_stage(inputs, params, 1, cfg)
    b, hb = run_stage(inputs, params, 1, cfg, order=list(rng.permutation(8)))
    assert a.tobytes() == b.tobytes() and ha.tobytes() == hb.tobytes()


def test_final_field_is_sum_of_upsampled_stage_contributions():
    cfg = smoke_config().network
    params = trained_like(cfg, 3)
    rng = np.random.default_rng(3)
    fixed, moving = vol(rng, (32, 32, 32)), vol(rng, (32, 32, 32))
    # double precision: the identity is about the bookkeeping, not float32 rounding
    with T.precision(np.float64):
        res = multiscale_forward(fixed, moving, params, cfg)
        total = sum(upsample_field(f, int(round(1 / s))).data for f, s in zip(res.stage_fields, res.stage_scales))
    assert np.abs(res.field).max() > 0
    assert np.abs(total - res.field).max() < 1e-5
    assert len(res.step_max_delta) == 2 and len(res.step_max_delta[0]) == 12


def test_hidden_states_stay_bounded_across_stages():
    cfg = smoke_config().network
    params = trained_like(cfg, 4)
    rng = np.random.default_rng(4)
    fixed, moving = vol(rng, (32, 32, 32)), vol(rng, (32, 32, 32))
    running = hidden = scale = None
    for s in range(2):
        inputs = prepare_stage(fixed, moving, s, cfg, running, hidden, scale)
        contribution, hidden = run_stage(inputs, params, s, cfg)
        assert np.abs(hidden).max() < 1
        running = inputs.prior_field + contribution
        scale = cfg.stages[s].scale


def test_concat_hidden_merge_variant():
    cfg = replace(smoke_config().network, hidden_merge="concat")
    params = init_params(cfg)
    assert "stage1.merge.weight" in params and "stage0.merge.weight" not in params
    rng = np.random.default_rng(0)
    res = multiscale_forward(vol(rng, (32, 32, 32)), vol(rng, (32, 32, 32)), params, cfg)
    assert not res.field.any()


def test_geometry_is_checked_before_any_work():
    cfg = smoke_config().network
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="incompatible"):
        multiscale_forward(vol(rng, (32, 32, 34)), vol(rng, (32, 32, 34)), init_params(cfg), cfg)

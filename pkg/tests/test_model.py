import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdcnet.model import (LayerSpec, ModelConfig, ModelParams, build_cost_volume, count_params,
                           extract_features, forward, layer_plan, match_features, recover_scale,
                           residual_pair, soft_argmin)
from msdcnet.tensor import Tensor, no_grad

from conftest import naive_cost_volume

TINY = dict(base_channels=4, max_disparity=16, levels_3d=2)


def test_config_rejects_bad_disparity():
    with pytest.raises(ValueError, match="multiple of 4"):
        ModelConfig(max_disparity=30)


def test_variant_aliases():
    assert ModelConfig(variant="2d").variant == "single_scale_2d"
    with pytest.raises(ValueError, match="unknown variant"):
        ModelConfig(variant="huge")


# ---------------------------------------------------------------- cost volume

def test_cost_volume_hand_example():
    a, b, c, p, q, r = 1.0, 2.0, 3.0, 4.0, 5.0, 6.0
    left = Tensor(np.array([a, b, c]).reshape(1, 1, 1, 3))
    right = Tensor(np.array([p, q, r]).reshape(1, 1, 1, 3))
    vol = build_cost_volume(left, right, 8).data
    assert vol.shape == (1, 2, 2, 1, 3)
    np.testing.assert_array_equal(vol[0, :, 0, 0].T, [[a, p], [b, q], [c, r]])
    np.testing.assert_array_equal(vol[0, :, 1, 0].T, [[a, 0], [b, p], [c, q]])


def test_cost_volume_zero_shift_is_concatenation(rng):
    l, r = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3, 4, 5))
    vol = build_cost_volume(Tensor(l), Tensor(r), 12).data
    np.testing.assert_array_equal(vol[:, :, 0], np.concatenate([l, r], axis=1))


@settings(max_examples=30, deadline=None)
@given(F=st.integers(1, 3), H=st.integers(1, 6), W=st.integers(1, 8), nd=st.integers(1, 4),
       seed=st.integers(0, 2 ** 16))
def test_cost_volume_matches_naive_loop(F, H, W, nd, seed):
    rng = np.random.default_rng(seed)
    l, r = rng.standard_normal((1, F, H, W)), rng.standard_normal((1, F, H, W))
    got = build_cost_volume(Tensor(l), Tensor(r), 4 * nd).data
    np.testing.assert_array_equal(got, naive_cost_volume(l, r, 4 * nd))


def test_cost_volume_rejects_bad_disparity():
    t = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError, match="multiple of 4"):
        build_cost_volume(t, t, 6)


# ---------------------------------------------------------------- soft argmin

def test_soft_argmin_uniform_cost():
    assert np.all(soft_argmin(Tensor(np.zeros((1, 4, 2, 2)))).data == 1.5)


def test_soft_argmin_near_one_hot():
    c = np.full((1, 4, 1, 1), 20.0)
    c[0, 2] = -20.0
    assert abs(soft_argmin(Tensor(c)).data.item() - 2) < 1e-6


def test_soft_argmin_hand_softmax():
    c = np.array([0.0, -math.log(3)]).reshape(1, 2, 1, 1)
    assert soft_argmin(Tensor(c)).data.item() == pytest.approx(0.75, abs=1e-15)


def test_soft_argmin_shift_invariant_and_in_range(rng):
    c = rng.standard_normal((2, 8, 3, 4)) * 10
    base = soft_argmin(Tensor(c)).data
    assert np.abs(soft_argmin(Tensor(c + 123.25)).data - base).max() < 1e-9
    assert base.min() >= 0 and base.max() <= 7


# ---------------------------------------------------------------- 2D / 3D stages

def test_extract_features_siamese_bit_identical(rng):
    net = ModelParams.initialize(ModelConfig(**TINY), seed=3)
    img = rng.random((1, 3, 32, 64)).astype(np.float32)
    with no_grad():
        lf, rf = extract_features(Tensor(img), Tensor(img.copy()), net, training=True)
    assert lf.shape == (1, 4, 8, 16)
    assert np.array_equal(lf.data, rf.data)


def test_extract_features_rejects_indivisible():
    net = ModelParams.initialize(ModelConfig(**TINY), seed=0)
    img = Tensor(np.zeros((1, 3, 30, 64), dtype=np.float32))
    with pytest.raises(ValueError, match="divisible by 8"):
        extract_features(img, img, net)


def test_match_features_preserves_shape_and_identity_at_zero_init(rng):
    cfg = ModelConfig(base_channels=2, max_disparity=16, levels_3d=2, zero_init_residual=True,
                      dtype="float64")
    net = ModelParams.initialize(cfg, seed=0)
    vol = Tensor(rng.standard_normal((1, 4, 4, 8, 8)))
    assert match_features(vol, net).shape == vol.shape
    # residual branch contributes nothing: each pair returns its input
    x = net.apply("m3d.in", vol, True)
    np.testing.assert_array_equal(residual_pair("m3d.enc0.res0", x, net, True).data, x.data)


def test_match_features_rejects_indivisible(rng):
    net = ModelParams.initialize(ModelConfig(base_channels=2, max_disparity=16, levels_3d=3,
                                             dtype="float64"), seed=0)
    with pytest.raises(ValueError, match="divisible by 4"):
        match_features(Tensor(rng.standard_normal((1, 4, 4, 6, 8))), net)


def test_recover_scale_shape_and_zero_weights():
    cfg = ModelConfig(base_channels=2, max_disparity=16, levels_3d=2, dtype="float64")
    net = ModelParams.initialize(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 4, 4, 3, 5)))
    assert recover_scale(x, net).shape == (1, 16, 12, 20)
    for k, p in net.named():
        if k.startswith("rec.") and k.endswith((".weight", ".bias")):
            p.data[...] = 0
    assert not recover_scale(x, net).data.any()


def test_forward_range_and_variants(rng):
    left = rng.random((1, 3, 32, 64)).astype(np.float32)
    right = rng.random((1, 3, 32, 64)).astype(np.float32)
    for variant in ("full", "single_scale_2d", "single_scale_3d", "single_scale_both"):
        net = ModelParams.initialize(ModelConfig(variant=variant, **TINY), seed=1)
        with no_grad():
            d = forward(left, right, net).data
        assert d.shape == (1, 32, 64) and np.all(np.isfinite(d))
        assert d.min() >= 0 and d.max() <= 15


def test_forward_deterministic(rng):
    left = rng.random((1, 3, 32, 64))
    net = ModelParams.initialize(ModelConfig(**TINY), seed=1)
    a = forward(left, left[..., ::-1].copy(), net).data
    net2 = ModelParams.initialize(ModelConfig(**TINY), seed=1)
    b = forward(left, left[..., ::-1].copy(), net2).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- parameter counts

def test_single_conv_param_count():
    assert LayerSpec("c", 2, 1, 2, 3, bn=False, relu=False).param_count() == 20


def test_count_params_matches_initialized_scalars():
    for variant in ("full", "2d", "3d", "both"):
        cfg = ModelConfig(variant=variant, **TINY)
        assert count_params(cfg) == ModelParams.initialize(cfg).scalar_count()


def test_count_independent_of_image_size():
    # weights carry no spatial extent; the same params run on two image sizes
    net = ModelParams.initialize(ModelConfig(**TINY), seed=0)
    for h, w in ((16, 32), (32, 96)):
        with no_grad():
            assert forward(np.zeros((1, 3, h, w)), np.zeros((1, 3, h, w)), net).shape == (1, h, w)
    assert net.scalar_count() == count_params(ModelConfig(**TINY))


def test_full_config_layer_structure():
    cfg = ModelConfig()
    plan = layer_plan(cfg)
    dsfe = [s for s in plan if s.name.startswith("dsfe.")]
    msff = [s for s in plan if s.name.startswith("msff.")]
    dense3x3 = [s for s in dsfe if s.k == 3 and ".dense." in s.name]
    assert len(dense3x3) == 3 * 16
    assert len(msff) == 1 + 16 + 4 + 1
    chans = sorted({s.cout for s in plan if s.name.startswith("m3d.down")})
    assert chans == [64, 128, 256]
    names = [s.name for s in plan]
    assert len(names) == len(set(names))

from fractions import Fraction

import numpy as np
import pytest

from panforge import tensor as tc
from panforge.errors import ConfigError, ShapeError
from panforge.layers import LayerSpec, init_params, layer_forward
from panforge.networks import (D_TAPS, build_discrim_net, build_transform_net, discrim_forward,
                               parse_multiplier, transform_forward)
from panforge.tensor import Tensor

# per-layer (channels, spatial side) of T at 256 x 256, full width
T_SHAPES_256 = {
    1: (64, 128), 2: (128, 64), 3: (256, 32), 4: (512, 16), 5: (512, 8), 6: (512, 4),
    7: (512 + 512, 8), 8: (256 + 512, 16), 9: (128 + 256, 32), 10: (64 + 128, 64),
    11: (64, 128), 12: (3, 256),
}


@pytest.fixture(scope="module")
def tiny_nets():
    T = build_transform_net((64, 64), Fraction(1, 16), seed=3)
    D = build_discrim_net((64, 64), Fraction(1, 16), seed=4)
    return T, D


def test_layer_spec_rejects_unknown_step():
    with pytest.raises(ValueError):
        LayerSpec("conv", 3, 4, ("conv", "dropout"))


def test_init_statistics():
    p = init_params(LayerSpec("conv", 64, 64, ("conv", "bn")), seed=0)
    w = p.weight.data
    assert abs(w.mean()) < 2e-3 and abs(w.std() - 0.02) < 1e-3
    assert np.all(p.bias.data == 0) and np.all(p.gamma.data == 1) and np.all(p.beta.data == 0)
    assert np.all(p.running_mean.data == 0) and np.all(p.running_var.data == 1)


def test_layer_forward_names_layer_on_channel_mismatch():
    p = init_params(LayerSpec("conv", 3, 4, ("conv",), index=7), seed=0)
    with pytest.raises(ShapeError, match="layer 7"):
        layer_forward(p, Tensor(np.zeros((1, 5, 8, 8), np.float32)))


def test_layer_applies_steps_in_order():
    # lrelu before the conv must see the raw input: a negative input is scaled by 0.2 first
    spec = LayerSpec("conv", 1, 1, ("lrelu", "conv"), kernel=1, stride=1, padding=0)
    p = init_params(spec, seed=0)
    p.weight.data[...] = 1.0
    out = layer_forward(p, Tensor(np.full((1, 1, 2, 2), -1.0, np.float32)))
    np.testing.assert_allclose(out.data, -0.2)


def test_transform_full_width_shapes_at_256():
    T = build_transform_net((256, 256), 1, seed=0)
    x = Tensor(np.zeros((1, 3, 256, 256), np.float32))
    with tc.no_grad():
        out, hidden = transform_forward(T, x, "train", return_hidden=True)
    for i, (c, side) in T_SHAPES_256.items():
        assert hidden[i].shape == (1, c, side, side), f"layer {i}"
    assert out.shape == (1, 3, 256, 256)


def test_discrim_flatten_dim_and_taps_at_256():
    D = build_discrim_net((256, 256), 1, seed=0)
    assert D.flatten_dim == 512
    with tc.no_grad():
        prob, feats = discrim_forward(D, Tensor(np.zeros((2, 3, 256, 256), np.float32)))
    assert prob.shape == (2, 1) and len(feats) == 4


def test_tap_spatial_sizes_at_64(tiny_nets):
    _, D = tiny_nets
    with tc.no_grad():
        _, feats = discrim_forward(D, Tensor(np.zeros((1, 3, 64, 64), np.float32)))
    assert [f.shape[-1] for f in feats] == [64, 16, 8, 4]
    assert D_TAPS == (1, 4, 6, 8)


def test_output_ranges(tiny_nets, rng):
    T, D = tiny_nets
    x = Tensor(rng.uniform(-1, 1, (2, 3, 64, 64)).astype(np.float32))
    with tc.no_grad():
        y = transform_forward(T, x)
        p, _ = discrim_forward(D, y)
    assert np.all(np.abs(y.data) <= 1) and np.all((p.data > 0) & (p.data < 1))


@pytest.mark.parametrize("size", [(63, 64), (96, 64), (0, 64)])
def test_transform_rejects_sizes_not_divisible_by_64(size):
    with pytest.raises(ConfigError) as err:
        build_transform_net(size)
    assert err.value.field == "size"


def test_discrim_rejects_wrong_image_size(tiny_nets):
    _, D = tiny_nets
    with pytest.raises(ShapeError):
        discrim_forward(D, Tensor(np.zeros((1, 3, 128, 128), np.float32)))


@pytest.mark.parametrize("value,expected", [(0.25, Fraction(1, 4)), ("1/16", Fraction(1, 16)), (1, Fraction(1))])
def test_parse_multiplier(value, expected):
    assert parse_multiplier(value) == expected


@pytest.mark.parametrize("bad", ["x", 0, 1.5, "-1/4"])
def test_parse_multiplier_rejects(bad):
    with pytest.raises(ConfigError):
        parse_multiplier(bad)


def test_width_multiplier_scales_channels():
    T = build_transform_net((64, 64), Fraction(1, 4))
    assert [p.spec.out_ch for p in T.layers] == [16, 32, 64, 128, 128, 128, 128, 64, 32, 16, 16, 3]


def test_parameter_enumeration_is_stable():
    a = [n for n, _ in build_transform_net(seed=0).parameters()]
    b = [n for n, _ in build_transform_net(seed=5).parameters()]
    assert a == b and len(set(a)) == len(a)
    assert a[:4] == ["T.1.weight", "T.1.bias", "T.2.weight", "T.2.bias"]


def test_same_seed_same_weights():
    a, b = build_discrim_net(seed=9), build_discrim_net(seed=9)
    for (_, x), (_, y) in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(x.data, y.data)


def test_infer_mode_is_deterministic_and_batch_independent(tiny_nets, rng):
    T, _ = tiny_nets
    x = rng.uniform(-1, 1, (3, 3, 64, 64)).astype(np.float32)
    with tc.no_grad():
        full = transform_forward(T, Tensor(x), "infer").data
        single = transform_forward(T, Tensor(x[1:2]), "infer").data
    np.testing.assert_allclose(full[1:2], single, atol=1e-6)

"""The transformation network T and the discriminative network D.

T is a 12-layer encoder-decoder: six stride-2 3x3 convolutions down, six
stride-2 4x4 transposed convolutions up, with decoder layers 7-10
concatenating the mirrored encoder outputs of layers 5, 4, 3 and 2.

D is eight 3x3 convolutions alternating stride 1 and 2, a 3x3 stride-2
squeeze to 8 channels and a sigmoid unit. The outputs of layers 1, 4, 6
and 8 are exposed as the perceptual feature taps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from panforge import tensor as tc
from panforge.errors import ConfigError, ShapeError
from panforge.layers import LayerParams, LayerSpec, init_params, layer_forward
from panforge.tensor import Tensor

T_ENCODER = (64, 128, 256, 512, 512, 512)
T_DECODER = (512, 256, 128, 64, 64)
T_SKIPS = {7: 5, 8: 4, 9: 3, 10: 2}

D_CHANNELS = (64, 128, 128, 256, 256, 512, 512, 512)
D_STRIDES = (1, 2, 1, 2, 1, 2, 1, 2)
D_SQUEEZE = 8
D_TAPS = (1, 4, 6, 8)


def parse_multiplier(value) -> Fraction:
    """Accept 0.25, "1/4", Fraction(1, 4)..."""
    try:
        frac = Fraction(value).limit_denominator(1 << 16) if not isinstance(value, str) \
            else Fraction(value.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"width multiplier {value!r} is not a number", field="width_mult") from exc
    if not 0 < frac <= 1:
        raise ConfigError(f"width multiplier must lie in (0, 1], got {value!r}", field="width_mult")
    return frac


def scaled(channels, multiplier):
    return max(1, int(round(channels * float(multiplier))))


def _check_size(input_size, divisor, what):
    h, w = input_size
    if h <= 0 or w <= 0 or h % divisor or w % divisor:
        raise ConfigError(
            f"{what} input size {h}x{w} invalid: height and width must be positive multiples of {divisor}",
            field="size")


@dataclass
class _Net:
    input_size: tuple
    width_multiplier: Fraction
    layers: list = field(default_factory=list)
    prefix: str = ""

    def parameters(self):
        """(name, tensor) pairs in a stable order."""
        return [(f"{self.prefix}.{p.spec.index}.{name}", t)
                for p in self.layers for name, t in p.parameters()]

    def buffers(self):
        return [(f"{self.prefix}.{p.spec.index}.{name}", t)
                for p in self.layers for name, t in p.buffers()]

    def state(self):
        return self.parameters() + self.buffers()

    def set_requires_grad(self, flag):
        for _, t in self.parameters():
            t.requires_grad = flag

    def zero_grad(self):
        for _, t in self.parameters():
            t.grad = None

    def layer(self, index) -> LayerParams:
        return self.layers[index - 1]


class TransformNet(_Net):
    skips = T_SKIPS


class DiscrimNet(_Net):
    taps = D_TAPS

    @property
    def flatten_dim(self):
        return self.layers[-1].spec.in_ch


def transform_specs(multiplier):
    enc = [scaled(c, multiplier) for c in T_ENCODER]
    dec = [scaled(c, multiplier) for c in T_DECODER]
    specs = []
    in_ch = 3
    for i, out_ch in enumerate(enc, start=1):
        if i == 1:
            steps = ("conv", "lrelu")
        elif i == 2:
            steps = ("conv", "bn")
        elif i == 6:
            steps = ("lrelu", "conv", "bn", "lrelu")
        else:
            steps = ("lrelu", "conv", "bn")
        specs.append(LayerSpec("conv", in_ch, out_ch, steps, kernel=3, stride=2, padding=1, index=i))
        in_ch = out_ch
    for i, out_ch in enumerate(dec, start=7):
        if i in T_SKIPS:
            steps = ("deconv", "bn", "concat", "relu")
        else:
            steps = ("deconv", "bn", "relu")
        specs.append(LayerSpec("deconv", in_ch, out_ch, steps, kernel=4, stride=2, padding=1, index=i))
        in_ch = out_ch + (enc[T_SKIPS[i] - 1] if i in T_SKIPS else 0)
    specs.append(LayerSpec("deconv", in_ch, 3, ("deconv", "tanh"), kernel=4, stride=2, padding=1, index=12))
    return specs


def discrim_specs(input_size, multiplier):
    specs = []
    in_ch = 3
    for i, (c, s) in enumerate(zip(D_CHANNELS, D_STRIDES), start=1):
        out_ch = scaled(c, multiplier)
        steps = ("conv", "lrelu") if i == 1 else ("conv", "bn", "lrelu")
        specs.append(LayerSpec("conv", in_ch, out_ch, steps, kernel=3, stride=s, padding=1, index=i))
        in_ch = out_ch
    specs.append(LayerSpec("conv", in_ch, D_SQUEEZE, ("conv", "lrelu"), kernel=3, stride=2, padding=1, index=9))
    h, w = input_size
    flat = D_SQUEEZE * (h // 32) * (w // 32)
    specs.append(LayerSpec("fc", flat, 1, ("fc", "sigmoid"), index=10))
    return specs


def build_transform_net(input_size=(64, 64), width_multiplier=Fraction(1, 4), seed=0,
                        dtype=tc.DEFAULT_DTYPE) -> TransformNet:
    input_size = tuple(int(v) for v in input_size)
    _check_size(input_size, 64, "transformation network")
    m = parse_multiplier(width_multiplier)
    if 64 * m < 1:
        raise ConfigError("width multiplier too small: 64 * multiplier must be >= 1", field="width_mult")
    rng = np.random.default_rng(seed)
    layers = [init_params(s, rng=rng, dtype=dtype) for s in transform_specs(m)]
    return TransformNet(input_size, m, layers, prefix="T")


def build_discrim_net(input_size=(64, 64), width_multiplier=Fraction(1, 4), seed=0,
                      dtype=tc.DEFAULT_DTYPE) -> DiscrimNet:
    input_size = tuple(int(v) for v in input_size)
    _check_size(input_size, 32, "discriminative network")
    m = parse_multiplier(width_multiplier)
    rng = np.random.default_rng(seed)
    layers = [init_params(s, rng=rng, dtype=dtype) for s in discrim_specs(input_size, m)]
    return DiscrimNet(input_size, m, layers, prefix="D")


def _check_image(x: Tensor, size=None, what="network"):
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"{what} expects an N x 3 x H x W batch, got {x.shape}")
    if size is not None and tuple(x.shape[2:]) != tuple(size):
        raise ShapeError(f"{what} was built for {size[0]}x{size[1]} images, got {x.shape}")


def transform_forward(net: TransformNet, x: Tensor, mode="train", return_hidden=False):
    _check_image(x, what="transformation network")
    h, w = x.shape[2:]
    if h % 64 or w % 64:
        raise ShapeError(f"transformation network needs sizes divisible by 64, got {x.shape}")
    hidden = {}
    for i in range(1, 7):
        x = layer_forward(net.layer(i), x, mode)
        hidden[i] = x
    for i in range(7, 13):
        skip = hidden[T_SKIPS[i]] if i in T_SKIPS else None
        x = layer_forward(net.layer(i), x, mode, skip=skip)
        hidden[i] = x
    return (x, hidden) if return_hidden else x


def discrim_forward(net: DiscrimNet, img: Tensor, mode="train"):
    """Return (probability of shape (N, 1), [tap1, tap4, tap6, tap8])."""
    _check_image(img, net.input_size, what="discriminative network")
    feats = []
    x = img
    for p in net.layers:
        x = layer_forward(p, x, mode)
        if p.spec.index in D_TAPS:
            feats.append(x)
    return x, feats

"""Table-row layer assemblies built from tensor primitives.

A layer is described by a :class:`LayerSpec` whose ``steps`` list the ops
in the exact order they appear in the architecture row, e.g.
``("lrelu", "conv", "bn")``. A ``"concat"`` step joins the skip tensor
handed to :func:`layer_forward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from panforge import tensor as tc
from panforge.errors import ShapeError
from panforge.tensor import Tensor

INIT_STD = 0.02

_ACTIVATIONS = ("relu", "lrelu", "tanh", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | deconv | fc
    in_ch: int
    out_ch: int
    steps: tuple
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    index: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "deconv", "fc"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for step in self.steps:
            if step not in (self.kind, "bn", "concat", *_ACTIVATIONS):
                raise ValueError(f"layer {self.index}: step {step!r} not valid for a {self.kind} layer")

    @property
    def has_bn(self):
        return "bn" in self.steps


@dataclass
class LayerParams:
    spec: LayerSpec
    weight: Tensor
    bias: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running_mean: Tensor | None = None
    running_var: Tensor | None = None

    def parameters(self):
        """Learnable tensors in a fixed order: weight, bias[, gamma, beta]."""
        out = [("weight", self.weight), ("bias", self.bias)]
        if self.gamma is not None:
            out += [("gamma", self.gamma), ("beta", self.beta)]
        return out

    def buffers(self):
        if self.running_mean is None:
            return []
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


def init_params(spec: LayerSpec, seed=None, rng=None, dtype=tc.DEFAULT_DTYPE) -> LayerParams:
    """Kernels ~ N(0, 0.02), zero biases, unit gamma, zero beta, stats (0, 1)."""
    if rng is None:
        rng = np.random.default_rng(seed)
    if spec.kind == "conv":
        wshape = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
    elif spec.kind == "deconv":
        wshape = (spec.in_ch, spec.out_ch, spec.kernel, spec.kernel)
    else:
        wshape = (spec.in_ch, spec.out_ch)
    weight = Tensor(rng.normal(0.0, INIT_STD, size=wshape).astype(dtype), requires_grad=True)
    bias = Tensor(np.zeros(spec.out_ch, dtype=dtype), requires_grad=True)
    params = LayerParams(spec, weight, bias)
    if spec.has_bn:
        params.gamma = Tensor(np.ones(spec.out_ch, dtype=dtype), requires_grad=True)
        params.beta = Tensor(np.zeros(spec.out_ch, dtype=dtype), requires_grad=True)
        params.running_mean = Tensor(np.zeros(spec.out_ch, dtype=dtype))
        params.running_var = Tensor(np.ones(spec.out_ch, dtype=dtype))
    return params


def layer_forward(params: LayerParams, x: Tensor, mode="train", skip: Tensor | None = None) -> Tensor:
    spec = params.spec
    expected = spec.in_ch
    if spec.kind == "fc":
        got = int(np.prod(x.shape[1:]))
    else:
        got = x.shape[1] if x.ndim == 4 else None
    if got != expected:
        raise ShapeError(f"layer {spec.index}: expected {expected} input channels, got input shape {x.shape}")
    training = mode == "train"
    for step in spec.steps:
        if step == "conv":
            x = tc.conv2d(x, params.weight, params.bias, spec.stride, spec.padding)
        elif step == "deconv":
            x = tc.conv_transpose2d(x, params.weight, params.bias, spec.stride, spec.padding)
        elif step == "fc":
            x = tc.fully_connected(tc.flatten(x), params.weight, params.bias)
        elif step == "bn":
            x = tc.batchnorm(x, params.gamma, params.beta, params.running_mean, params.running_var,
                             training=training)
        elif step == "concat":
            if skip is None:
                raise ShapeError(f"layer {spec.index}: concat step needs a skip tensor")
            x = tc.concat_channels(x, skip)
        else:
            x = tc.activation(x, step)
    return x

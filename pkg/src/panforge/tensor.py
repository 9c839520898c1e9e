"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a node to the active :class:`Graph`. A node
keeps the op tag, its input tensors and a closure holding whatever saved
activations its backward rule needs. Nodes are appended in execution order,
so walking the list backwards is a valid reverse topological order.

The active graph and the grad-enabled flag live in context variables, so
separate threads or asyncio tasks each get their own tape.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from panforge.errors import ContractError, NumericalError, ShapeError, UnusableStateError

DEFAULT_DTYPE = np.float32

LRELU_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_CLAMP = 1e-7


class Tensor:
    """An ndarray plus gradient bookkeeping.

    ``data`` holds the values with their shape; ``values`` is the flat
    row-major view of the same buffer.
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.reshape(-1)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Node(NamedTuple):
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Graph:
    """Append-only tape of recorded ops."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward):
        output.node_id = len(self.nodes)
        output._graph = self
        self.nodes.append(Node(op, tuple(inputs), output, backward))
        return output

    def reset(self):
        self.nodes.clear()

    def first_nonfinite(self):
        """Return the first node whose output holds NaN or Inf, or None."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.data)):
                return node
        return None


_graph_var: contextvars.ContextVar[Graph | None] = contextvars.ContextVar("panforge_graph", default=None)
_grad_var = contextvars.ContextVar("panforge_grad_enabled", default=True)
_debug_var = contextvars.ContextVar("panforge_debug", default=False)


def current_graph() -> Graph:
    g = _graph_var.get()
    if g is None:
        g = Graph()
        _graph_var.set(g)
    return g


@contextlib.contextmanager
def graph_scope():
    """Run a block on a fresh tape, discarding it afterwards."""
    g = Graph()
    token = _graph_var.set(g)
    try:
        yield g
    finally:
        g.reset()
        _graph_var.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_var.set(False)
    try:
        yield
    finally:
        _grad_var.reset(token)


def grad_enabled():
    return _grad_var.get()


@contextlib.contextmanager
def debug_mode(enabled=True):
    """Check every op output for NaN/Inf while the block runs."""
    token = _debug_var.set(enabled)
    try:
        yield
    finally:
        _debug_var.reset(token)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op, data, inputs, backward):
    out = Tensor(data)
    if _debug_var.get() and not np.all(np.isfinite(data)):
        raise NumericalError(f"op '{op}' produced non-finite values", op=op)
    if _grad_var.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_graph().record(op, inputs, out, backward)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backprop(loss: Tensor, graph: Graph | None = None):
    """Propagate d(loss)/d(node) into ``.grad`` of everything upstream.

    Leaf gradients accumulate across calls until cleared; the tape is reset
    afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph if graph is not None else loss._graph
    if graph is None or loss.node_id is None or loss.node_id >= len(graph.nodes) \
            or graph.nodes[loss.node_id].output is not loss:
        raise ContractError("loss is not recorded in the given graph")

    nodes = graph.nodes[: loss.node_id + 1]
    loss.grad = np.ones_like(loss.data)
    for node in reversed(nodes):
        g = node.output.grad
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            inp.grad = gi if inp.grad is None else inp.grad + gi

    for node in nodes:
        for t in (node.output, *node.inputs):
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
    graph.reset()
    if _graph_var.get() is graph:
        _graph_var.set(Graph())


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), backward)


def sum_all(x):
    shape, dtype = x.shape, x.dtype
    return _make("sum", np.asarray(x.data.sum(), dtype=dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean_all(x):
    shape, dtype, n = x.shape, x.dtype, x.size
    return _make("mean", np.asarray(x.data.mean(), dtype=dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=dtype),))


def reshape(x, shape):
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def slice_channels(x, start, stop):
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, start:stop] = g
        return (out,)

    return _make("slice_channels", x.data[:, start:stop].copy(), (x,), backward)


def square(x):
    xd = x.data
    return _make("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def log(x):
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x, lo, hi):
    """Clip to [lo, hi]; the gradient is zero where clipping happened."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make("clamp", np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# activations


def relu(x):
    xd = x.data
    mask = xd > 0
    return _make("relu", xd * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=LRELU_SLOPE):
    xd = x.data
    out = np.maximum(xd, xd * slope) if 0 <= slope <= 1 else np.minimum(xd, xd * slope)

    def backward(g):
        scale = (xd > 0) * (1.0 - slope)
        scale += slope
        return (g * scale.astype(g.dtype, copy=False),)

    return _make("lrelu", out, (x,), backward)


def tanh(x):
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    xd = x.data
    y = (0.5 * (1.0 + np.tanh(0.5 * xd))).astype(xd.dtype)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def activation(x, kind, slope=LRELU_SLOPE):
    if kind == "relu":
        return relu(x)
    if kind == "lrelu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# convolution
#
# Image tensors keep the N x C x H x W logical shape, but conv, deconv,
# batchnorm and concat emit arrays whose memory is laid out N, H, W, C (the
# NCHW array is a transposed view). Patch extraction then copies contiguous
# channel runs, which is what makes im2col cheap here.


def _cl(a):
    """Channel-last view (N, H, W, C) of a logical NCHW array."""
    return a.transpose(0, 2, 3, 1)


def _cf(a):
    """Logical NCHW view of a channel-last array."""
    return a.transpose(0, 3, 1, 2)


def _pad_cl(a, p):
    if p == 0:
        return a
    n, h, w, c = a.shape
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=a.dtype)
    out[:, p:p + h, p:p + w, :] = a
    return out


def _im2col(xp, kh, kw, stride, ho, wo):
    """Patches of a channel-last image as an (N*ho*wo, kh*kw*C) matrix."""
    n, c = xp.shape[0], xp.shape[3]
    sn, sh, sw, sc = xp.strides
    win = as_strided(xp, (n, ho, wo, kh, kw, c),
                     (sn, sh * stride, sw * stride, sh, sw, sc), writeable=False)
    return win.reshape(n * ho * wo, kh * kw * c)


def _col2im_numpy(cols, shape, stride):
    n, ho, wo, kh, kw, c = cols.shape
    out = np.zeros(shape, dtype=cols.dtype)
    hs, ws = stride * ho, stride * wo
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + hs:stride, j:j + ws:stride, :] += cols[:, :, :, i, j, :]
    return out


try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

if numba is not None:
    @numba.njit(cache=True, nogil=True)
    def _col2im_kernel(cols, out, stride):
        n, ho, wo, kh, kw, c = cols.shape
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    for i in range(kh):
                        for j in range(kw):
                            dst = out[b, y * stride + i, x * stride + j]
                            src = cols[b, y, x, i, j]
                            for ch in range(c):
                                dst[ch] += src[ch]

    def _col2im(cols, shape, stride):
        """Scatter-add (N, ho, wo, kh, kw, C) patches into a channel-last image."""
        out = np.zeros(shape, dtype=cols.dtype)
        _col2im_kernel(np.ascontiguousarray(cols), out, stride)
        return out
else:  # pragma: no cover
    _col2im = _col2im_numpy


def conv2d(x, kernel, bias, stride=1, padding=0):
    """Zero-padded cross-correlation; input (N, Cin, H, W), kernel (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d input {x.shape} smaller than kernel {kernel.shape} with padding {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match {cout} output channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = _pad_cl(_cl(x.data), padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = _cf(out.reshape(n, ho, wo, cout))

    def backward(g):
        gmat = _cl(g).reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (gmat @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = _col2im(dcols, xp.shape, stride)
            if padding:
                gxp = gxp[:, padding:padding + h, padding:padding + w, :]
            gx = _cf(gxp)
        if kernel.requires_grad:
            gw = (cols.T @ gmat).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make("conv2d", out, inputs, backward)


def conv_transpose2d(x, kernel, bias, stride=1, padding=0):
    """Transposed convolution: the data-gradient of :func:`conv2d` run forwards.

    ``kernel`` is laid out (Cin, Cout, kh, kw).
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d bias {bias.shape} does not match {cout} output channels")
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hp - 2 * padding, wp - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d output would be empty for input {x.shape}, padding {padding}")

    xmat = _cl(x.data).reshape(n * h * w, cin)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cin, kh * kw * cout)
    cols = (xmat @ wmat).reshape(n, h, w, kh, kw, cout)
    full = _col2im(cols, (n, hp, wp, cout), stride)
    out = full[:, padding:padding + ho, padding:padding + wo, :]
    if bias is not None:
        out = out + bias.data
    elif padding:
        out = np.ascontiguousarray(out)
    out = _cf(out)

    def backward(g):
        gp = _pad_cl(_cl(g), padding)
        gcols = _im2col(gp, kh, kw, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _cf((gcols @ wmat.T).reshape(n, h, w, cin))
        if kernel.requires_grad:
            gw = (xmat.T @ gcols).reshape(cin, kh, kw, cout).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = _cl(g).sum(axis=(0, 1, 2))
        return gx, gw, gb

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make("conv_transpose2d", out, inputs, backward)


# ---------------------------------------------------------------------------
# normalization, dense, structural


def batchnorm(x, gamma, beta, running_mean=None, running_var=None, training=True,
              momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch's population statistics are used and the
    running buffers (plain Tensors) are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm affine params {gamma.shape}/{beta.shape} do not match {c} channels")
    xh = _cl(x.data)
    m = n * h * w
    if training:
        if m < 1:
            raise ShapeError("batchnorm needs at least one element per channel")
        mean = xh.mean(axis=(0, 1, 2))
        centered = xh - mean
        var = (centered * centered).mean(axis=(0, 1, 2))
        if running_mean is not None:
            running_mean.data = (momentum * running_mean.data + (1 - momentum) * mean).astype(running_mean.dtype)
        if running_var is not None:
            running_var.data = (momentum * running_var.data + (1 - momentum) * var).astype(running_var.dtype)
    else:
        if running_mean is None or running_var is None or running_mean.data.size != c \
                or running_var.data.size != c:
            raise UnusableStateError("batchnorm in infer mode needs populated running statistics")
        mean, var = running_mean.data.astype(xh.dtype), running_var.data.astype(xh.dtype)
        centered = xh - mean
    invstd = (1.0 / np.sqrt(var + eps)).astype(xh.dtype)
    xhat = centered * invstd
    out = _cf(xhat * gamma.data + beta.data)

    def backward(g):
        gh = _cl(g)
        gg = (gh * xhat).sum(axis=(0, 1, 2)) if gamma.requires_grad else None
        gbeta = gh.sum(axis=(0, 1, 2)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = gh * gamma.data
            if training:
                s1 = gxhat.sum(axis=(0, 1, 2))
                s2 = (gxhat * xhat).sum(axis=(0, 1, 2))
                gx = _cf((invstd / m) * (m * gxhat - s1 - xhat * s2))
            else:
                gx = _cf(gxhat * invstd)
        return gx, gg, gbeta

    return _make("batchnorm", out, (x, gamma, beta), backward)


def concat_channels(a, b):
    if a.ndim != 4 or b.ndim != 4 or a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching batch/spatial extents, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = _cf(np.concatenate([_cl(a.data), _cl(b.data)], axis=3))

    def backward(g):
        gh = _cl(g)
        return _cf(gh[..., :ca]), _cf(gh[..., ca:])

    return _make("concat_channels", out, (a, b), backward)


def fully_connected(x, weight, bias):
    """``x @ weight + bias`` for x of shape (N, F) and weight (F, K)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected feature mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make("fully_connected", out, inputs, backward)


def reduce_mean_abs_diff(a, b):
    """Mean of |a - b| over every element; subgradient 0 at ties."""
    if a.shape != b.shape:
        raise ShapeError(f"reduce_mean_abs_diff shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)
    out = np.asarray(np.abs(diff).mean(), dtype=diff.dtype)

    def backward(g):
        ga = g * sign / n
        return ga, -ga

    return _make("mean_abs_diff", out, (a, b), backward)


def mean_squared_diff(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mean_squared_diff shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=diff.dtype)

    def backward(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _make("mean_squared_diff", out, (a, b), backward)


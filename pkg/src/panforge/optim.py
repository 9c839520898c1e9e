"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from panforge.errors import ContractError, ShapeError

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        state.m = [np.zeros_like(t.data) for _, t in params]
        state.v = [np.zeros_like(t.data) for _, t in params]
        return state


def _update_numpy(p, g, m, v, lr, b1, b2, eps, corr1, corr2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= (lr / corr1) * m / (np.sqrt(v / corr2) + eps)


if numba is not None:
    @numba.njit(cache=True, nogil=True)
    def _update(p, g, m, v, lr, b1, b2, eps, corr1, corr2):
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * (gi * gi)
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / corr1) / (np.sqrt(vi / corr2) + eps)
else:  # pragma: no cover
    _update = _update_numpy


def adam_step(params, state: AdamState):
    """Apply one Adam update to ``params``, a list of (name, Tensor) pairs.

    Parameters and moment buffers are updated in place.
    """
    missing = [name for name, t in params if t.grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {', '.join(missing)}")
    if len(params) != len(state.m):
        raise ShapeError(f"adam_step: {len(params)} parameters but {len(state.m)} moment buffers")
    for i, (name, p) in enumerate(params):
        if p.grad.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: gradient/moments for {name} do not match parameter shape {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for i, (_, p) in enumerate(params):
        if not p.data.flags.c_contiguous or not p.data.flags.writeable:
            p.data = np.array(p.data, order="C")
        g = np.ascontiguousarray(p.grad, dtype=p.dtype)
        _update(p.data.reshape(-1), g.reshape(-1), state.m[i].reshape(-1), state.v[i].reshape(-1),
                state.lr, b1, b2, state.eps, corr1, corr2)

import numpy as np
import pytest

from panforge import tensor as tc
from panforge.tensor import Tensor


def numeric_grad(f, arrays, i, step=1e-4):
    """Central differences of scalar f(*arrays) w.r.t. arrays[i]."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        fp = f(*arrays)
        x[idx] = old - step
        fm = f(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(op, arrays, seed=0, step=1e-4):
    """Compare backprop and central differences for ``op`` in float64.

    ``op`` maps Tensors to a Tensor; it is reduced to a scalar with a fixed
    random projection. Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    proj = {}

    def scalar_loss(*arrs):
        ts = [Tensor(a.copy()) for a in arrs]
        with tc.no_grad():
            out = op(*ts).data
        if "r" not in proj:
            proj["r"] = np.random.default_rng(seed).normal(size=out.shape)
        return float((out * proj["r"]).sum())

    scalar_loss(*arrays)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with tc.graph_scope():
        out = op(*ts)
        loss = tc.sum_all(tc.mul(out, Tensor(proj["r"])))
        tc.backprop(loss)
    worst = 0.0
    for i, t in enumerate(ts):
        num = numeric_grad(scalar_loss, arrays, i, step)
        worst = max(worst, rel_err(t.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", "call") == "call":
                lines += [v for k, v in getattr(rep, "user_properties", []) if k == "verdict"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

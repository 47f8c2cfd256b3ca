import numpy as np
import pytest

from seenn import numerics as nx


@pytest.fixture(autouse=True)
def float64_and_seed():
    nx.set_precision(64)
    nx.seed(0)
    nx.get_tape().clear()
    yield
    nx.set_precision(64)
    nx.get_tape().clear()


def numeric_grad(f, arr, h=1e-4):
    """Central differences of the scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    """Largest absolute deviation, scaled by the larger gradient magnitude."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def analytic_grad(build, tensors):
    """Backpropagate ``build()`` (scalar Tensor) and return each tensor's grad."""
    for t in tensors:
        t.grad = None
    nx.get_tape().clear()
    out = build()
    out.backward()
    return [t.grad.copy() for t in tensors]

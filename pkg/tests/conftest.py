import numpy as np
import pytest

from sedmamba.tensor import Tensor


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = fn()
        x[i] = old - eps
        down = fn()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_grads(build, arrays: dict[str, np.ndarray], eps: float = 1e-6) -> dict[str, float]:
    """Compare autodiff against finite differences for a scalar graph.

    ``build(tensors)`` maps a dict of leaf tensors to a scalar Tensor. The
    leaves wrap the given arrays without copying, so perturbing an array
    perturbs the next forward pass.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    for k in leaves:
        leaves[k].data = arrays[k]
    build(leaves).backward()
    errors = {}
    for k, arr in arrays.items():
        num = numeric_grad(lambda: build({n: Tensor(a) for n, a in arrays.items()}).item(), arr, eps)
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arr)
        errors[k] = rel_error(analytic, num)
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

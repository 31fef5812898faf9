import numpy as np
import pytest

from kdlab import tensor as T


def numeric_grad(f, arrays, eps=1e-3):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. each array (float64)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f(*arrays)
            a[i] = old - eps
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    scale = np.maximum(scale, 1e-2)
    return float(np.max(np.abs(analytic - numeric) / scale))


def gradcheck(build, *arrays, eps=1e-3):
    """Compare reverse-mode gradients of ``build(*tensors)`` with finite differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    build(*tensors).backward()

    def f(*arrs):
        with T.no_grad():
            return build(*[T.Tensor(a, dtype=np.float64) for a in arrs]).item()

    numeric = numeric_grad(f, arrays, eps)
    return max(max_rel_err(t.grad, n) for t, n in zip(tensors, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

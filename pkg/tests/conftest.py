import numpy as np
import pytest

import vit2img.tensor as T
from vit2img.tensor import Tensor


def numeric_gradient(fn, arrays, h=1e-5):
    """Central finite differences of a scalar-valued fn over numpy arrays."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(*arrays)
            flat[i] = orig - h
            lo = fn(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def check_gradients(op, arrays, rtol=1e-4, h=1e-5, seed=0):
    """Compare autodiff grads of sum(op(*xs) * R) against central differences."""
    rng = np.random.default_rng(seed)
    probe = None

    def scalarize(*arrs):
        nonlocal probe
        with T.no_grad():
            out = op(*[Tensor(a) for a in arrs])
        if probe is None:
            probe = rng.normal(size=out.shape)
        return float((out.data * probe).sum())

    expected = numeric_gradient(scalarize, [a.copy() for a in arrays], h=h)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    loss = T.sum_(T.mul(out, Tensor(probe)))
    T.backward(loss)
    for t, exp_g in zip(tensors, expected):
        scale = max(np.abs(exp_g).max(), 1.0)
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, exp_g, rtol=rtol, atol=rtol * scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

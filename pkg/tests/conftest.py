import numpy as np
import pytest

from hydrodcm import tensor as T


def numeric_gradients(build, params, step=1e-5):
    """Central finite differences of the scalar build() w.r.t. each param."""
    grads = []
    for p in params:
        flat = p.data.ravel()
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = build().item()
            flat[i] = orig - step
            f_minus = build().item()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g.reshape(p.data.shape))
    return grads


def assert_gradients_match(build, params, rtol=1e-4, atol=1e-7, step=1e-5):
    """Backward pass against the finite-difference oracle, elementwise.

    `build` must construct a fresh scalar graph from the params each call.
    """
    for p in params:
        p.grad = None
    out = build()
    T.backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    numeric = numeric_gradients(build, params, step)
    for p, a, n in zip(params, analytic, numeric):
        err = np.abs(a - n)
        tol = atol + rtol * np.maximum(np.abs(a), np.abs(n))
        worst = np.argmax(err - tol)
        assert np.all(err <= tol), (
            f"gradient mismatch (shape {p.data.shape}): analytic "
            f"{a.ravel()[worst]:.8g} vs numeric {n.ravel()[worst]:.8g}")


@pytest.fixture
def rng_factory():
    from hydrodcm.rng import Rng

    return Rng

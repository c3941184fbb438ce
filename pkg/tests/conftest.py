import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from demtg.autodiff import Tape, Tensor

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def numeric_grad(fn, arrays, eps=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every entry of every array."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            g[idx] = (fn(*plus) - fn(*minus)) / (2 * eps)
        grads.append(g)
    return grads


def tape_grad(build, arrays):
    """Tape gradients of scalar ``build(*tensors)`` w.r.t. fresh leaves made from ``arrays``."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*leaves)
    tape.backward(out)
    return [np.zeros(l.shape) if l.grad is None else l.grad for l in leaves]


def rel_err(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(1e-6, np.maximum(np.abs(a), np.abs(n)))))


def check_grad(build, arrays, tol, eps=1e-5):
    analytic = tape_grad(build, arrays)
    numeric = numeric_grad(lambda *xs: build(*[Tensor(x) for x in xs]).item(), arrays, eps)
    worst = max(rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst <= tol, f"relative error {worst:.3e} > {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

"""Central finite-difference oracle for ndcore gradients."""

from typing import Callable

import numpy as np

from core.ndcore import Parameter, Tensor, backward, no_grad


def numerical_grad(fn: Callable[[np.ndarray], float], x: np.ndarray,
                   eps: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        step = np.zeros_like(x)
        step[idx] = eps
        grad[idx] = (fn(x + step) - fn(x - step)) / (2.0 * eps)
    return grad


def check_gradient(build: Callable[[Tensor], Tensor], value: np.ndarray, rtol: float = 1e-4,
                   atol: float = 1e-6, eps: float = 1e-6) -> None:
    """Compare backward() of scalar `build(x)` with central differences at `value`."""
    param = Parameter(value, name="x")
    analytic = backward(build(param))[param]

    def evaluate(v: np.ndarray) -> float:
        with no_grad():
            return build(Tensor(v)).item()

    np.testing.assert_allclose(analytic, numerical_grad(evaluate, value, eps), rtol=rtol,
                               atol=atol)

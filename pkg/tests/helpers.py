"""Shared test utilities: finite-difference oracles and comparison helpers."""

import numpy as np

from duosent.tensor import Tensor


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x (64-bit).

    Independent of the autodiff engine: f receives plain float64 arrays and
    must return a float.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise relative error with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def check_gradient(build_scalar, x: np.ndarray, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare autodiff gradient against central differences.

    `build_scalar` maps a float64 Tensor to a scalar Tensor. Returns the
    relative error (asserted < tol).
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True, dtype=np.float64)
    out = build_scalar(leaf)
    out.backward()
    analytic = leaf.grad

    numeric = finite_difference(lambda a: build_scalar(Tensor(a, dtype=np.float64)).item(), x, h=h)
    err = rel_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel error {err:.3e} >= {tol}"
    return err

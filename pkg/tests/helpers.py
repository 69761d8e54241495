"""Shared test utilities: finite-difference oracles and error metrics."""

import numpy as np


def central_diff(f, x, step=1e-5):
    """Central finite differences of a scalar function of an array.

    Perturbs entries of a private copy of `x` one at a time; `f` must not
    mutate its argument.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(x)
        flat[i] = orig - step
        f_minus = f(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def rel_err(got, want):
    """Max absolute deviation relative to the reference's scale."""
    got, want = np.asarray(got, dtype=float), np.asarray(want, dtype=float)
    scale = max(np.abs(want).max(), 1e-12) if want.size else 1e-12
    return float(np.abs(got - want).max() / scale)

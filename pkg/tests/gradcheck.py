"""Central finite-difference helpers shared by the gradient test suites."""

import numpy as np


def central_grad(f, x, eps=1e-6):
    """Componentwise central difference of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    xf = x.reshape(-1)
    for k in range(xf.size):
        xp = xf.copy()
        xm = xf.copy()
        xp[k] += eps
        xm[k] -= eps
        flat[k] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * eps)
    return out


def central_laplacian(f, x, eps=1e-4):
    """Sum of second central differences over every component."""
    x = np.asarray(x, dtype=float)
    xf = x.reshape(-1)
    f0 = f(x)
    acc = 0.0
    for k in range(xf.size):
        xp = xf.copy()
        xm = xf.copy()
        xp[k] += eps
        xm[k] -= eps
        acc += (f(xp.reshape(x.shape)) - 2.0 * f0 + f(xm.reshape(x.shape))) / eps**2
    return acc


def max_rel_err(approx, exact, floor=1e-12):
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    scale = np.maximum(np.abs(exact), floor)
    return float(np.max(np.abs(approx - exact) / scale))

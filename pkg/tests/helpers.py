"""Finite-difference oracles and small utilities shared by the test suite.

The library implements all derivatives in closed form; these helpers provide
the independent numerical checks.
"""
import numpy as np


def central_gradient(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def central_hessian(f, x, h=1e-4):
    """Central-difference Hessian of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ei = np.zeros(n); ei[i] = h
            ej = np.zeros(n); ej[j] = h
            H[i, j] = (f(x + ei + ej) - f(x + ei - ej)
                       - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return H


def central_third(f, x, h=1e-3):
    """Central-difference third derivative tensor of a scalar function."""
    x = np.asarray(x, dtype=float)
    n = x.size
    T = np.zeros((n, n, n))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                ei = np.zeros(n); ei[i] = h
                ej = np.zeros(n); ej[j] = h
                ek = np.zeros(n); ek[k] = h
                T[i, j, k] = (
                    f(x + ei + ej + ek) - f(x + ei + ej - ek)
                    - f(x + ei - ej + ek) + f(x + ei - ej - ek)
                    - f(x - ei + ej + ek) + f(x - ei + ej - ek)
                    + f(x - ei - ej + ek) - f(x - ei - ej - ek)
                ) / (8 * h**3)
    return T


def central_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of a vector function of a vector."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.zeros((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        J[:, j] = (np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2 * h)
    return J


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return np.max(np.abs(a - b)) / denom


def random_interior_points(rng, n, c, spread=2.0):
    """Random strictly interior simplex points via softmax of Gaussians."""
    from sigmaflow.simplex import softmax
    return softmax(spread * rng.standard_normal((n, c)))

"""Closed-form information geometry of the open probability simplex.

Conventions
-----------
A point of the simplex over ``c`` categories is a length-``c`` vector
``p = (p_0, ..., p_{c-1})`` with strictly positive entries summing to one;
``p_0`` is the reference category.  Exponential coordinates are length
``c - 1`` vectors ``theta`` with

    theta_i = log(p_i / p_0),        i = 1, ..., c-1.

The tangent space ``T_0`` is the zero-sum hyperplane of R^c; its orthogonal
projection is ``project_tangent``.  ``softmax`` maps ``T_0`` (or any raw
vector, shift-invariantly) onto the simplex, with inverse
``softmax_inv(p) = project_tangent(log p)``.

All functions operate on the last axis and broadcast over leading axes, so a
field of ``N`` simplex points is simply an ``(N, c)`` array.

The Fisher-Rao metric in theta-coordinates is the Hessian of the
log-partition function,

    g_ij = d_i d_j psi = delta_ij p_i - p_i p_j,

optionally regularized to ``g + eps * I``.  All derivatives of the metric
used here (Christoffel symbols, the convexity-bound matrix ``b_matrix``, the
sphere-map pushforward) are implemented in closed form; finite differences
appear only in the test suite.
"""
from __future__ import annotations

import numpy as np

from .errors import GeometryDomainError

Array = np.ndarray

#: Positivity floor below which a probability entry counts as a boundary
#: point for the operations that must reject the boundary.
BOUNDARY_TOL = 1e-300


def _require_finite(x: Array, name: str) -> Array:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise GeometryDomainError(f"{name} contains non-finite entries")
    return x


def _require_interior(p: Array) -> Array:
    p = _require_finite(p, "p")
    if np.any(p <= BOUNDARY_TOL):
        raise GeometryDomainError("point lies on the simplex boundary")
    return p


def softmax(v: Array, axis: int = -1) -> Array:
    """Map a raw vector to the simplex; invariant under adding a constant."""
    v = _require_finite(v, "v")
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v: Array, axis: int = -1) -> Array:
    """Numerically stable ``log(softmax(v))``."""
    v = _require_finite(v, "v")
    m = np.max(v, axis=axis, keepdims=True)
    z = v - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_inv(p: Array, axis: int = -1) -> Array:
    """Inverse of ``softmax`` into ``T_0``: ``project_tangent(log p)``."""
    p = _require_interior(p)
    lp = np.log(p)
    return lp - np.mean(lp, axis=axis, keepdims=True)


def project_tangent(x: Array, axis: int = -1) -> Array:
    """Orthogonal projection onto the zero-sum hyperplane ``T_0``."""
    x = np.asarray(x, dtype=float)
    return x - np.mean(x, axis=axis, keepdims=True)


def to_theta(p: Array) -> Array:
    """Exponential coordinates ``theta_i = log(p_i / p_0)``, length c-1."""
    p = _require_interior(p)
    return np.log(p[..., 1:]) - np.log(p[..., :1])


def to_prob(theta: Array) -> Array:
    """Inverse chart: length-c probability vector from theta (stable)."""
    theta = _require_finite(theta, "theta")
    z = np.concatenate([np.zeros(theta.shape[:-1] + (1,)), theta], axis=-1)
    return softmax(z)


def log_partition(theta: Array) -> Array:
    """Log-partition function ``psi(theta) = log(1 + sum_i exp(theta_i))``.

    Satisfies ``psi(theta) >= max(0, max_i theta_i)`` and
    ``d_i psi = p_i``.
    """
    theta = _require_finite(theta, "theta")
    z = np.concatenate([np.zeros(theta.shape[:-1] + (1,)), theta], axis=-1)
    m = np.max(z, axis=-1)
    return m + np.log(np.sum(np.exp(z - m[..., None]), axis=-1))


def neg_entropy(p: Array) -> Array:
    """Negative entropy ``sum_i p_i log p_i`` with the ``0 log 0 = 0`` limit.

    Accepts boundary points (zero entries) since diagnostics must evaluate
    near-converged states; interior values lie in ``[-log c, 0)``.
    """
    p = _require_finite(p, "p")
    if np.any(p < 0):
        raise GeometryDomainError("negative probability entry")
    safe = np.where(p > 0.0, p, 1.0)
    return np.sum(p * np.log(safe), axis=-1)


def neg_entropy_theta(theta: Array) -> Array:
    """Negative entropy from theta via the Legendre relation
    ``phi = p_i theta^i - psi(theta)``."""
    theta = _require_finite(theta, "theta")
    p = to_prob(theta)
    return np.sum(p[..., 1:] * theta, axis=-1) - log_partition(theta)


def entropy(p: Array) -> Array:
    """Shannon entropy ``H(p) = -neg_entropy(p)`` in nats."""
    return -neg_entropy(p)


def fisher_metric(theta: Array, epsilon: float = 0.0) -> Array:
    """Fisher-Rao metric tensor in theta-coordinates, shape (..., c-1, c-1).

    ``g_ij = delta_ij p_i - p_i p_j + epsilon delta_ij``; symmetric, smallest
    eigenvalue >= epsilon.
    """
    theta = _require_finite(theta, "theta")
    if epsilon < 0:
        raise GeometryDomainError("epsilon must be >= 0")
    p = to_prob(theta)[..., 1:]
    k = p.shape[-1]
    g = -p[..., :, None] * p[..., None, :]
    idx = np.arange(k)
    g[..., idx, idx] += p + epsilon
    return g


def metric_derivative(theta: Array) -> Array:
    """Coordinate derivative ``d_k g_ij`` of the Fisher-Rao metric.

    Index order ``[..., i, j, k]``.  Equals the third derivative of the
    log-partition function, hence fully symmetric under index permutation.
    """
    theta = _require_finite(theta, "theta")
    p = to_prob(theta)[..., 1:]
    k = p.shape[-1]
    eye = np.eye(k)
    dg = 2.0 * np.einsum("...i,...j,...k->...ijk", p, p, p)
    dg -= np.einsum("ij,...i,...k->...ijk", eye, p, p)
    dg -= np.einsum("ik,...i,...j->...ijk", eye, p, p)
    dg -= np.einsum("jk,...i,...j->...ijk", eye, p, p)
    dg += np.einsum("ij,jk,...i->...ijk", eye, eye, p)
    return dg


def christoffel_lowered(theta: Array) -> Array:
    """Lowered Christoffel symbols ``Gamma_ijk = (1/2) d_i d_j d_k psi``.

    Identical for the plain and the epsilon-regularized metric, since the
    regularization is constant.
    """
    return 0.5 * metric_derivative(theta)


def christoffel(theta: Array, alpha: float = 0.0, epsilon: float = 0.0) -> Array:
    """Christoffel symbols of the alpha-connection, index order [..., i, j, k]
    for Gamma^i_jk; symmetric in (j, k).

    The index is raised with the inverse of the regularized metric
    ``g + epsilon I`` and the whole tensor scales as ``(1 - alpha)``; alpha=1
    gives the flat exponential connection (all zeros), alpha=0 the
    Levi-Civita connection.
    """
    theta = _require_finite(theta, "theta")
    low = christoffel_lowered(theta)
    if alpha == 1.0:
        return np.zeros_like(low)
    g_eps = fisher_metric(theta, epsilon)
    # SPD factorization as the explicit invertibility check: failure must
    # surface as a linear-algebra error, never as silent regularization.
    np.linalg.cholesky(g_eps)
    k = low.shape[-1]
    raised = np.linalg.solve(g_eps, low.reshape(low.shape[:-2] + (k * k,)))
    return (1.0 - alpha) * raised.reshape(low.shape)


def replicator(p: Array) -> Array:
    """Replicator matrix ``R_p = Diag(p) - p (x) p``, shape (..., c, c).

    Symmetric, rows sum to zero, and ``R_p @ project_tangent = R_p``; also the
    Jacobian of ``softmax`` at ``softmax_inv(p)``.
    """
    p = _require_finite(p, "p")
    k = p.shape[-1]
    R = -p[..., :, None] * p[..., None, :]
    idx = np.arange(k)
    R[..., idx, idx] += p
    return R


def apply_replicator(p: Array, y: Array) -> Array:
    """Row-wise product ``R_p y`` without materializing the matrices."""
    dot = np.sum(p * y, axis=-1, keepdims=True)
    return p * (y - dot)


def softmax_jacobian(v: Array) -> Array:
    """Jacobian of ``softmax`` at ``v``; equals ``replicator(softmax(v))``."""
    return replicator(softmax(v))


def sphere_map(p: Array) -> Array:
    """Isometric immersion ``p -> 2 sqrt(p)`` onto the radius-2 sphere."""
    p = _require_finite(p, "p")
    if np.any(p < 0):
        raise GeometryDomainError("negative probability entry")
    return 2.0 * np.sqrt(p)


def sphere_map_jacobian(p: Array) -> Array:
    """Pushforward of the sphere map composed with the theta-chart.

    Returns the (..., c, c-1) Jacobian ``J`` of ``theta -> 2 sqrt(to_prob(theta))``
    at ``theta(p)``; columns are images of the theta-coordinate directions, so
    ``g_ij w^i w^j = ||J w||^2`` exactly (isometry).
    """
    p = _require_interior(p)
    sq = np.sqrt(p)
    J = -sq[..., :, None] * p[..., None, 1:]
    idx = np.arange(p.shape[-1] - 1)
    J[..., idx + 1, idx] += sq[..., 1:]
    return J


def b_matrix(theta: Array) -> Array:
    """Convexity-bound matrix ``B_ij = g_ij + (1/2) theta^k d_k g_ij``.

    Symmetric; its spectrum lies in ``[b_lower(c), b_upper(c)]`` uniformly
    over theta.
    """
    theta = _require_finite(theta, "theta")
    g = fisher_metric(theta)
    p = to_prob(theta)[..., 1:]
    k = p.shape[-1]
    tl = np.einsum("...ij,...j->...i", g, theta)  # lowered theta
    A = -tl[..., :, None] * p[..., None, :] - p[..., :, None] * tl[..., None, :]
    idx = np.arange(k)
    A[..., idx, idx] += tl
    return g + 0.5 * A


def b_lower(c: int) -> float:
    """Uniform lower spectral bound of ``b_matrix`` for c categories."""
    return -(c**2 - 1) / (2.0 * np.e)


def b_upper(c: int) -> float:
    """Uniform upper spectral bound of ``b_matrix`` for c categories."""
    return 0.5 * (1.0 + (c**2 - 1) / np.e)


def theta_to_tangent(theta: Array) -> Array:
    """Tangent representation ``v = project_tangent((0, theta))`` (length c)."""
    theta = _require_finite(theta, "theta")
    z = np.concatenate([np.zeros(theta.shape[:-1] + (1,)), theta], axis=-1)
    return project_tangent(z)


def tangent_to_theta(v: Array) -> Array:
    """Inverse of ``theta_to_tangent``: ``theta_i = v_i - v_0``."""
    v = _require_finite(v, "v")
    return v[..., 1:] - v[..., :1]

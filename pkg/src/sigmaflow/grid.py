"""Discretization of the 2-torus: derivative stencils, metric fields, and
assembly of the metric-dependent Laplace-Beltrami operator.

Grid layout
-----------
Nodes of an ``H x W`` doubly periodic grid are indexed row-major,
``a = i * W + j`` with row ``i`` (y-direction) and column ``j``
(x-direction).  Grid spacing is fixed to one; physical scaling is absorbed
into the metric.

Derivatives use the 3x3 mask ``(1/8) [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]``
for the x-direction and its transpose for the y-direction, with periodic
wrap-around.

The Laplace-Beltrami operator of a per-node symmetric positive definite
metric ``h`` is assembled as ``L = Q E`` where ``E`` discretizes the
divergence form ``d_mu(sqrt|h| h^{mu nu} d_nu .)`` with coefficients averaged
at half-grid points (second-order central scheme on the 3x3 neighborhood)
and ``Q`` is the diagonal ``1 / sqrt|h|``.  ``E`` is symmetric, rows sum to
zero, and ``L`` annihilates constants; ``L`` is negative semi-definite in the
``Q``-weighted inner product.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, GeometryDomainError

Array = np.ndarray


@dataclass(frozen=True)
class TorusGrid:
    """Doubly periodic H x W grid with unit spacing."""

    H: int
    W: int

    def __post_init__(self):
        if self.H < 3 or self.W < 3:
            raise GeometryDomainError("grid needs H >= 3 and W >= 3 for stencil support")

    @property
    def n_nodes(self) -> int:
        return self.H * self.W

    def to_2d(self, x: Array) -> Array:
        """Reshape a node-major array (N, ...) to (H, W, ...)."""
        x = np.asarray(x)
        return x.reshape((self.H, self.W) + x.shape[1:])

    def to_flat(self, x: Array) -> Array:
        """Reshape an (H, W, ...) array back to node-major (N, ...)."""
        x = np.asarray(x)
        return x.reshape((self.n_nodes,) + x.shape[2:])

    def neighbor_columns(self, di: int, dj: int) -> Array:
        """Column index of the (di, dj)-shifted neighbor for every node."""
        i, j = np.divmod(np.arange(self.n_nodes), self.W)
        return ((i + di) % self.H) * self.W + (j + dj) % self.W


def _min_eig_2x2(a: Array, b: Array, c: Array) -> Array:
    half_tr = 0.5 * (a + c)
    rad = np.sqrt((0.5 * (a - c)) ** 2 + b**2)
    return half_tr - rad


def _max_eig_2x2(a: Array, b: Array, c: Array) -> Array:
    half_tr = 0.5 * (a + c)
    rad = np.sqrt((0.5 * (a - c)) ** 2 + b**2)
    return half_tr + rad


class MetricField:
    """Per-node 2x2 symmetric positive definite tensor field on a torus grid.

    ``interpretation`` records whether the stored matrices are the metric
    ``h`` itself or its inverse ``h^{-1}``; conversions happen through
    :meth:`inverse` / :meth:`as_interpretation` so no caller ever has to
    guess.  The uniform spectral lower bound over all nodes is recorded in
    ``min_eig``.
    """

    __slots__ = ("grid", "mats", "interpretation", "min_eig")

    def __init__(self, grid: TorusGrid, mats: Array, interpretation: str,
                 validate: bool = True):
        mats = np.asarray(mats, dtype=float)
        if mats.shape != (grid.n_nodes, 2, 2):
            raise GeometryDomainError(
                f"metric field must have shape ({grid.n_nodes}, 2, 2), got {mats.shape}")
        if interpretation not in ("h", "hinv"):
            raise GeometryDomainError("interpretation must be 'h' or 'hinv'")
        self.grid = grid
        self.mats = mats
        self.interpretation = interpretation
        if validate:
            asym = np.abs(mats[:, 0, 1] - mats[:, 1, 0])
            scale = 1.0 + np.abs(mats).max()
            if asym.max() > 1e-12 * scale:
                node = int(asym.argmax())
                raise AssemblyError(f"metric at node {node} is not symmetric", node)
        eigs = _min_eig_2x2(mats[:, 0, 0], mats[:, 0, 1], mats[:, 1, 1])
        self.min_eig = float(eigs.min())
        if validate and self.min_eig <= 0.0:
            node = int(eigs.argmin())
            raise AssemblyError(
                f"metric at node {node} is not positive definite "
                f"(min eigenvalue {eigs[node]:.3e})", node)

    @classmethod
    def from_entries(cls, grid: TorusGrid, a: Array, b: Array, c: Array,
                     interpretation: str, validate: bool = True) -> "MetricField":
        """Build from the three independent entries [[a, b], [b, c]]."""
        a = grid.to_flat(np.asarray(a, float)) if np.asarray(a).ndim == 2 else np.asarray(a, float)
        b = grid.to_flat(np.asarray(b, float)) if np.asarray(b).ndim == 2 else np.asarray(b, float)
        c = grid.to_flat(np.asarray(c, float)) if np.asarray(c).ndim == 2 else np.asarray(c, float)
        mats = np.empty((grid.n_nodes, 2, 2))
        mats[:, 0, 0] = a
        mats[:, 0, 1] = b
        mats[:, 1, 0] = b
        mats[:, 1, 1] = c
        return cls(grid, mats, interpretation, validate=validate)

    @property
    def entries(self) -> tuple[Array, Array, Array]:
        """The (a, b, c) entry arrays, node-major."""
        return self.mats[:, 0, 0], self.mats[:, 0, 1], self.mats[:, 1, 1]

    def det(self) -> Array:
        a, b, c = self.entries
        return a * c - b * b

    def inverse(self) -> "MetricField":
        """Pointwise inverse with the interpretation flag flipped."""
        a, b, c = self.entries
        d = self.det()
        flipped = "hinv" if self.interpretation == "h" else "h"
        return MetricField.from_entries(self.grid, c / d, -b / d, a / d,
                                        flipped, validate=False)

    def as_interpretation(self, interpretation: str) -> "MetricField":
        if interpretation == self.interpretation:
            return self
        return self.inverse()

    def det_h(self) -> Array:
        """Determinant of the metric h (regardless of stored interpretation)."""
        d = self.det()
        return d if self.interpretation == "h" else 1.0 / d

    def eigenvalues(self) -> tuple[Array, Array]:
        """(min, max) eigenvalue per node of the stored matrices."""
        a, b, c = self.entries
        return _min_eig_2x2(a, b, c), _max_eig_2x2(a, b, c)


def identity_metric(grid: TorusGrid, scale: float = 1.0) -> MetricField:
    """Spatially constant metric ``h = scale * I``."""
    mats = np.tile(scale * np.eye(2), (grid.n_nodes, 1, 1))
    return MetricField(grid, mats, "h", validate=False)


# ---------------------------------------------------------------------------
# derivative stencils
# ---------------------------------------------------------------------------

_DX_TAPS = [(-1, 1, 0.125), (0, 1, 0.25), (1, 1, 0.125),
            (-1, -1, -0.125), (0, -1, -0.25), (1, -1, -0.125)]
_DY_TAPS = [(1, -1, 0.125), (1, 0, 0.25), (1, 1, 0.125),
            (-1, -1, -0.125), (-1, 0, -0.25), (-1, 1, -0.125)]


def _stencil_matrix(grid: TorusGrid, taps) -> sp.csr_matrix:
    n = grid.n_nodes
    rows = np.tile(np.arange(n), len(taps))
    cols = np.concatenate([grid.neighbor_columns(di, dj) for di, dj, _ in taps])
    data = np.concatenate([np.full(n, w) for _, _, w in taps])
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def derivative_operators(grid: TorusGrid) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse first-derivative operators (D1, D2) for the x- and y-direction.

    Both annihilate constants exactly and wrap periodically.
    """
    return _stencil_matrix(grid, _DX_TAPS), _stencil_matrix(grid, _DY_TAPS)


# ---------------------------------------------------------------------------
# Laplace-Beltrami assembly
# ---------------------------------------------------------------------------

def divergence_coefficients(h_field: MetricField) -> tuple[Array, Array, Array, Array]:
    """Coefficients of the divergence form: the (H, W) entry arrays of
    ``sqrt|h| h^{-1}`` (va, vb, vc) plus the diagonal ``q = 1/sqrt|h|``."""
    g = h_field.grid
    hinv = h_field.as_interpretation("hinv")
    a, b, c = (g.to_2d(e) for e in hinv.entries)
    det_h = g.to_2d(h_field.det_h())
    if np.any(det_h <= 0):
        node = int(np.argmax(g.to_flat(det_h) <= 0))
        raise AssemblyError(f"metric at node {node} has non-positive determinant", node)
    sqrt_det = np.sqrt(det_h)
    return sqrt_det * a, sqrt_det * b, sqrt_det * c, 1.0 / sqrt_det


def assemble_laplace_beltrami(
    h_field: MetricField,
) -> tuple[sp.csr_matrix, Array, sp.csr_matrix]:
    """Assemble ``L = Q E`` for the given metric field.

    Returns ``(L, q, E)`` where ``q`` is the node-major diagonal of ``Q``.
    ``E`` is exactly symmetric; off-diagonal coefficients are arithmetic
    half-grid averages of the divergence-form coefficients, and the diagonal
    is the negated off-diagonal row sum so constants are annihilated.
    """
    g = h_field.grid
    va, vb, vc, q2d = divergence_coefficients(h_field)

    def sxp(x):  # sample east neighbor: value at (i, j+1)
        return np.roll(x, -1, axis=1)

    def sxm(x):
        return np.roll(x, 1, axis=1)

    def syp(x):  # sample south neighbor: value at (i+1, j)
        return np.roll(x, -1, axis=0)

    def sym(x):
        return np.roll(x, 1, axis=0)

    coeffs = {
        (0, 1): 0.5 * (va + sxp(va)),
        (0, -1): 0.5 * (va + sxm(va)),
        (1, 0): 0.5 * (vc + syp(vc)),
        (-1, 0): 0.5 * (vc + sym(vc)),
        (1, 1): 0.25 * (sxp(vb) + syp(vb)),
        (-1, -1): 0.25 * (sxm(vb) + sym(vb)),
        (1, -1): -0.25 * (sxm(vb) + syp(vb)),
        (-1, 1): -0.25 * (sxp(vb) + sym(vb)),
    }
    diag = -sum(coeffs.values())

    n = g.n_nodes
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    data = [g.to_flat(diag)]
    for (di, dj), w in coeffs.items():
        rows.append(np.arange(n))
        cols.append(g.neighbor_columns(di, dj))
        data.append(g.to_flat(w))
    E = sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n))
    q = g.to_flat(q2d)
    L = sp.csr_matrix(sp.diags(q) @ E)
    return L, q, E


def pairing(h_inv_field: MetricField, F: Array,
            derivs: tuple[sp.csr_matrix, sp.csr_matrix] | None = None) -> Array:
    """Metric-weighted squared gradient ``h^{mu nu} (D_mu F)(D_nu F)`` per
    node and channel.

    ``F`` is node-major ``(N, k)`` (or ``(N,)``); every entry of the result
    is nonnegative since it is the quadratic form of an SPD matrix.
    """
    g = h_inv_field.grid
    F = np.asarray(F, dtype=float)
    squeeze = F.ndim == 1
    if squeeze:
        F = F[:, None]
    if F.shape[0] != g.n_nodes:
        raise GeometryDomainError(
            f"field has {F.shape[0]} rows, grid has {g.n_nodes} nodes")
    if derivs is None:
        derivs = derivative_operators(g)
    D1, D2 = derivs
    hinv = h_inv_field.as_interpretation("hinv")
    a, b, c = (e[:, None] for e in hinv.entries)
    d1, d2 = D1 @ F, D2 @ F
    out = a * d1 * d1 + 2.0 * b * d1 * d2 + c * d2 * d2
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# metric constructors
# ---------------------------------------------------------------------------

def metric_params_raw(params: Array) -> tuple[Array, Array, Array]:
    """Inverse-metric entries (a, b, c) from raw per-node parameters (..., 3).

    Per node, ``h^{-1} = (1/v) R(ang) diag(lam, 1/lam) R(ang)^T`` with
    ``lam = sigmoid(x) + 0.01``, ``ang = (pi/2) tanh(y)``,
    ``v = sigmoid(z) + 0.01``; eigenvalues are exactly
    ``{lam / v, 1 / (lam v)}``, so the result is uniformly SPD.
    """
    params = np.asarray(params, dtype=float)
    x, y, z = params[..., 0], params[..., 1], params[..., 2]
    lam = 1.0 / (1.0 + np.exp(-x)) + 0.01
    ang = 0.5 * np.pi * np.tanh(y)
    v = 1.0 / (1.0 + np.exp(-z)) + 0.01
    cs, sn = np.cos(ang), np.sin(ang)
    ilam = 1.0 / lam
    a = (lam * cs * cs + ilam * sn * sn) / v
    b = (lam - ilam) * sn * cs / v
    c = (lam * sn * sn + ilam * cs * cs) / v
    return a, b, c


def metric_from_params(grid: TorusGrid, params: Array) -> MetricField:
    """Inverse-metric field from an (N, 3) (or (H, W, 3)) parameter array."""
    params = np.asarray(params, dtype=float)
    if params.ndim == 3:
        params = grid.to_flat(params)
    if params.shape != (grid.n_nodes, 3):
        raise GeometryDomainError(
            f"expected ({grid.n_nodes}, 3) parameters, got {params.shape}")
    if not np.all(np.isfinite(params)):
        raise GeometryDomainError("parameters contain non-finite entries")
    a, b, c = metric_params_raw(params)
    return MetricField.from_entries(grid, a, b, c, "hinv", validate=False)


def gaussian_kernel(sigma: float) -> Array:
    """Truncated normalized Gaussian taps with radius ceil(3 sigma)."""
    if sigma <= 0:
        return np.array([1.0])
    r = int(np.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_periodic(field2d: Array, sigma: float) -> Array:
    """Separable periodic Gaussian smoothing of an (H, W) array."""
    k = gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    if r == 0:
        return np.array(field2d, dtype=float)
    out = np.zeros_like(field2d, dtype=float)
    for t, w in zip(range(-r, r + 1), k):
        out += w * np.roll(field2d, -t, axis=0)
    out2 = np.zeros_like(out)
    for t, w in zip(range(-r, r + 1), k):
        out2 += w * np.roll(out, -t, axis=1)
    return out2


_EDGE_FNS = {
    "exp": lambda s: np.exp(-s),
    "rational": lambda s: 1.0 / (1.0 + s),
}


def structure_tensor(grid: TorusGrid, field: Array, rho: float,
                     sigma: float) -> Array:
    """Smoothed outer-product gradient tensor, shape (N, 2, 2).

    Channels are presmoothed with a periodic Gaussian at scale ``sigma``,
    stencil gradients form the per-channel outer product, and the summed
    tensor entries are smoothed at scale ``rho``.
    """
    if rho < 0 or sigma < 0:
        raise GeometryDomainError("rho and sigma must be >= 0")
    F = np.asarray(field, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[0] != grid.n_nodes:
        raise GeometryDomainError("field rows do not match grid nodes")
    D1, D2 = derivative_operators(grid)
    j11 = np.zeros((grid.H, grid.W))
    j12 = np.zeros_like(j11)
    j22 = np.zeros_like(j11)
    for ch in range(F.shape[1]):
        u = smooth_periodic(grid.to_2d(F[:, ch]), sigma)
        d1 = grid.to_2d(D1 @ grid.to_flat(u))
        d2 = grid.to_2d(D2 @ grid.to_flat(u))
        j11 += d1 * d1
        j12 += d1 * d2
        j22 += d2 * d2
    j11 = grid.to_flat(smooth_periodic(j11, rho))
    j12 = grid.to_flat(smooth_periodic(j12, rho))
    j22 = grid.to_flat(smooth_periodic(j22, rho))
    J = np.empty((grid.n_nodes, 2, 2))
    J[:, 0, 0] = j11
    J[:, 0, 1] = j12
    J[:, 1, 0] = j12
    J[:, 1, 1] = j22
    return J


def structure_tensor_metric(grid: TorusGrid, field: Array, rho: float,
                            sigma: float, edge_fn="exp") -> MetricField:
    """Structure-tensor preset for the state-to-metric operator.

    The eigenvalues of :func:`structure_tensor` are mapped through
    ``edge_fn`` (``exp(-s)`` or ``1/(1+s)``) and the tensor reassembled.
    The output is an SPD inverse-metric field: strong gradients produce
    small diffusivity across the edge direction.
    """
    fn = _EDGE_FNS[edge_fn] if isinstance(edge_fn, str) else edge_fn
    J = structure_tensor(grid, field, rho, sigma)
    w, V = np.linalg.eigh(J)
    mu = fn(np.maximum(w, 0.0))
    mats = np.einsum("nij,nj,nkj->nik", V, mu, V)
    mats = 0.5 * (mats + np.swapaxes(mats, 1, 2))
    return MetricField(grid, mats, "hinv", validate=False)


def metric_diagnostics(h_field: MetricField) -> tuple[Array, Array]:
    """Per-node (anisotropy, scale) of a metric field.

    ``scale = 1 / sqrt|h|``.  Anisotropy is the log-Euclidean deviator norm
    of the unit-determinant part ``A = h^{-1} sqrt|h|``: with eigenvalues
    ``l1 >= l2`` of ``A`` it equals ``|log(l1 / l2)| / sqrt(2)``, zero exactly
    on isotropic tensors and monotone in the eigenvalue ratio.
    """
    hinv = h_field.as_interpretation("hinv")
    a, b, c = hinv.entries
    det_h = h_field.det_h()
    sqrt_det = np.sqrt(det_h)
    lo = _min_eig_2x2(a, b, c) * sqrt_det
    hi = _max_eig_2x2(a, b, c) * sqrt_det
    anisotropy = np.abs(np.log(hi / lo)) / np.sqrt(2.0)
    scale = 1.0 / sqrt_det
    return anisotropy, scale

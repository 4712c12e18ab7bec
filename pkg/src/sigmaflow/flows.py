"""Right-hand sides and geometric integrators for simplex-valued flows on the
discrete torus, plus convergence diagnostics.

State representation
--------------------
An assignment field is an ``(N, c)`` matrix with simplex rows.  Numerical
integration runs in the tangent parametrization ``V = softmax_inv(S)``
(rows in the zero-sum space ``T_0``), which keeps every intermediate state
strictly inside the simplex by construction; ``softmax`` is applied only at
sampling points and at the end of a run.

Flow families
-------------
``sigma``      dV/dt = P0( L_h V + (1-alpha)/2 <D log S, D log S>_h + m^2 V )
               with S = softmax(V) and the metric h refreshed from the
               configured source at every right-hand-side evaluation
               (or once per step when ``metric_refresh='step'``).
``s_flow``     dS/dt = R_S( L_Omega S + S ) with the graph Laplacian
               L_Omega = Omega - I, integrated as dV/dt = P0(L_Omega S + S).
``spherical``  explicit discrete tension field on unit-norm rows with an
               Euler-plus-projection update.

The mass term ``m^2`` drives states toward simplex vertices (hard
labelings); with ``m^2 = 0`` the flow is pure geometric diffusion and the
functional ``lyapunov`` decays to its minimum at spatially constant states.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import simplex
from .errors import (CapabilityError, DivergenceError, GeometryDomainError,
                     StepUnderflowError)
from .grid import (MetricField, TorusGrid, assemble_laplace_beltrami,
                   derivative_operators, identity_metric, metric_from_params,
                   structure_tensor_metric)
from .simplex import (apply_replicator, b_upper, entropy, log_softmax,
                      neg_entropy, project_tangent, softmax, softmax_inv,
                      tangent_to_theta, to_theta)

Array = np.ndarray

#: dense-eigendecomposition guard for spectral diagnostics
SPECTRAL_NODE_GUARD = 4096


# ---------------------------------------------------------------------------
# metric sources
# ---------------------------------------------------------------------------

class FixedMetric:
    """Metric source returning one fixed field regardless of the state."""

    static = True

    def __init__(self, field: MetricField):
        self.field = field

    def __call__(self, S: Array, t_norm: float) -> MetricField:
        return self.field


def flat_metric(grid: TorusGrid) -> FixedMetric:
    return FixedMetric(identity_metric(grid))


class ParamsMetric:
    """Metric source backed by a free (N, 3) parameter field."""

    static = True

    def __init__(self, grid: TorusGrid, params: Array):
        self.field = metric_from_params(grid, params)

    def __call__(self, S: Array, t_norm: float) -> MetricField:
        return self.field


class StructureTensorMetric:
    """State-dependent structure-tensor metric source."""

    static = False

    def __init__(self, grid: TorusGrid, rho: float, sigma: float, edge_fn="exp"):
        self.grid = grid
        self.rho = rho
        self.sigma = sigma
        self.edge_fn = edge_fn

    def __call__(self, S: Array, t_norm: float) -> MetricField:
        return structure_tensor_metric(self.grid, S, self.rho, self.sigma,
                                       self.edge_fn)


# ---------------------------------------------------------------------------
# flow specification and trajectory record
# ---------------------------------------------------------------------------

@dataclass
class FlowSpec:
    """Complete description of one flow run.

    ``epsilon`` enters the recorded Lyapunov values and the low-frequency
    diagnostic; the integrated right-hand side is the unregularized flow
    (runs never needed the regularized metric).  For the adaptive integrator
    ``step`` is the initial step-size guess.  The spherical family always
    uses the explicit Euler-plus-projection update.
    """

    family: str = "sigma"               # 'sigma' | 's_flow' | 'spherical'
    alpha: float = 1.0
    m_squared: float = 0.0
    epsilon: float = 0.0
    metric_source: Optional[Callable[[Array, float], MetricField]] = None
    T: float = 1.0
    integrator: str = "euler"           # 'euler' | 'rk4' | 'adaptive'
    step: float = 0.1
    rtol: float = 1e-6
    atol: float = 1e-6
    metric_refresh: str = "stage"       # 'stage' | 'step'
    omega: Optional[sp.spmatrix] = None     # s_flow coupling weights
    mu: Optional[Array] = None              # spherical vertex weights

    def __post_init__(self):
        if self.family not in ("sigma", "s_flow", "spherical"):
            raise GeometryDomainError(f"unknown flow family {self.family!r}")
        if self.m_squared < 0 or self.epsilon < 0:
            raise GeometryDomainError("m_squared and epsilon must be >= 0")
        if self.integrator not in ("euler", "rk4", "adaptive"):
            raise GeometryDomainError(f"unknown integrator {self.integrator!r}")
        if self.integrator in ("euler", "rk4"):
            if self.step <= 0:
                raise GeometryDomainError("step must be > 0")
            if 0.0 < self.T < self.step:
                raise GeometryDomainError("T must be >= step")
        if self.T < 0 or (self.T == 0 and self.integrator != "euler"):
            # T = 0 is allowed only as the degenerate zero-step Euler
            # unrolling used by the learning losses
            raise GeometryDomainError("T must be > 0")
        if self.metric_refresh not in ("stage", "step"):
            raise GeometryDomainError("metric_refresh must be 'stage' or 'step'")


@dataclass
class TrajectoryRecord:
    """Sampled diagnostics along one integration run."""

    times: list = dataclass_field(default_factory=list)
    lyapunov: list = dataclass_field(default_factory=list)
    mean_entropy: list = dataclass_field(default_factory=list)
    max_entropy: list = dataclass_field(default_factory=list)
    theta_l2: list = dataclass_field(default_factory=list)
    snapshots: Optional[list] = None
    metric_refresh: str = "stage"

    def append(self, t: float, lyap: float, mean_h: float, max_h: float,
               tl2: float, snapshot: Optional[Array] = None):
        if self.times and t <= self.times[-1]:
            raise GeometryDomainError("sample times must be strictly increasing")
        self.times.append(t)
        self.lyapunov.append(lyap)
        self.mean_entropy.append(mean_h)
        self.max_entropy.append(max_h)
        self.theta_l2.append(tl2)
        if self.snapshots is not None and snapshot is not None:
            self.snapshots.append((t, snapshot))


# ---------------------------------------------------------------------------
# right-hand sides
# ---------------------------------------------------------------------------

class GeometryCache:
    """Assembled operators for one metric field, reused across evaluations."""

    def __init__(self, grid: TorusGrid, h_field: MetricField,
                 derivs: Optional[tuple] = None):
        self.h_field = h_field
        self.L, self.q, self.E = assemble_laplace_beltrami(h_field)
        self.derivs = derivs if derivs is not None else derivative_operators(grid)
        hinv = h_field.as_interpretation("hinv")
        self.hinv_entries = hinv.entries

    def pairing(self, F: Array) -> Array:
        D1, D2 = self.derivs
        a, b, c = (e[:, None] for e in self.hinv_entries)
        d1, d2 = D1 @ F, D2 @ F
        return a * d1 * d1 + 2.0 * b * d1 * d2 + c * d2 * d2


def _check_interior(S: Array):
    if np.any(S < simplex.BOUNDARY_TOL):
        raise GeometryDomainError("assignment state touched the simplex boundary")


def sigma_rhs_ambient(S: Array, h_field: MetricField, alpha: float,
                      m_squared: float, geo: Optional[GeometryCache] = None) -> Array:
    """Ambient-coordinate flow generator, rows in ``T_0``:
    ``R_S (L_h log S + (1-alpha)/2 <D log S, D log S>_h + m^2 log S)``."""
    S = np.asarray(S, dtype=float)
    _check_interior(S)
    if geo is None:
        geo = GeometryCache(h_field.grid, h_field)
    logS = np.log(S)
    arg = geo.L @ logS
    if alpha != 1.0:
        arg = arg + 0.5 * (1.0 - alpha) * geo.pairing(logS)
    if m_squared != 0.0:
        arg = arg + m_squared * logS
    return apply_replicator(S, arg)


def sigma_rhs_tangent(V: Array, h_field: MetricField, alpha: float,
                      m_squared: float, geo: Optional[GeometryCache] = None) -> Array:
    """Tangent-parametrization generator:
    ``P0 (L_h V + (1-alpha)/2 <D log sm(V), D log sm(V)>_h + m^2 V)``.

    Related to the ambient form by ``ambient(sm(V)) = R_{sm(V)} tangent(V)``
    row-wise.
    """
    V = np.asarray(V, dtype=float)
    if geo is None:
        geo = GeometryCache(h_field.grid, h_field)
    arg = geo.L @ V
    if alpha != 1.0:
        arg = arg + 0.5 * (1.0 - alpha) * geo.pairing(log_softmax(V))
    if m_squared != 0.0:
        arg = arg + m_squared * V
    return project_tangent(arg)


def _check_omega(omega) -> sp.csr_matrix:
    omega = sp.csr_matrix(omega)
    d = omega - omega.T
    if d.nnz and np.abs(d.data).max() > 1e-12:
        raise GeometryDomainError("coupling weights must be symmetric")
    if omega.nnz and omega.data.min() < 0:
        raise GeometryDomainError("coupling weights must be nonnegative")
    return omega


def sflow_rhs(S: Array, omega) -> Array:
    """Graph-coupled replicator flow generator ``R_S (L_Omega S + S)``."""
    S = np.asarray(S, dtype=float)
    omega = _check_omega(omega)
    return apply_replicator(S, (omega @ S - S) + S)


def sflow_objective(S: Array, omega) -> float:
    """Coupling objective ``-1/4 sum Omega_ab ||S_a - S_b||^2
    + 1/2 sum ||S_a||^2``; the flow ascends it for row-stochastic weights."""
    S = np.asarray(S, dtype=float)
    omega = _check_omega(omega)
    deg = np.asarray(omega.sum(axis=1)).ravel()
    sq = np.sum(S * S, axis=1)
    cross = np.sum(S * (omega @ S))
    pair_term = float(np.sum(deg * sq) - cross)  # 1/2 sum Omega ||S_a - S_b||^2
    return -0.5 * pair_term + 0.5 * float(sq.sum())


def spherical_tension(s: Array, omega, mu: Array) -> Array:
    """Discrete tension field on unit-norm nonnegative rows:
    ``Y_a = (1/mu_a) sum_b Omega_ab arccos(<s_a,s_b>)/(1-<s_a,s_b>)
    (s_b - s_a <s_a,s_b>)``.

    Pairs with ``<s_a,s_b> > 1 - 1e-12`` contribute zero (the analytic limit
    of the summand); ``Y_a`` is orthogonal to ``s_a``.
    """
    s = np.asarray(s, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise GeometryDomainError("vertex weights must be positive")
    omega = sp.coo_matrix(_check_omega(omega))
    rows, cols, w = omega.row, omega.col, omega.data
    d = np.sum(s[rows] * s[cols], axis=1)
    if np.any(d > 1.0 + 1e-9):
        raise GeometryDomainError("inner products exceed 1: rows are not unit vectors")
    dc = np.clip(d, -1.0, 1.0)
    safe = dc < 1.0 - 1e-12
    coef = np.where(safe, np.arccos(dc) / np.where(safe, 1.0 - dc, 1.0), 0.0)
    contrib = (w * coef)[:, None] * (s[cols] - s[rows] * dc[:, None])
    out = np.zeros_like(s)
    np.add.at(out, rows, contrib)
    return out / mu[:, None]


def spherical_euler_step(s: Array, omega, mu: Array, step: float) -> Array:
    """Explicit Euler update followed by row-wise projection to unit norm."""
    s2 = s + step * spherical_tension(s, omega, mu)
    nrm = np.linalg.norm(s2, axis=1, keepdims=True)
    if np.any(nrm == 0):
        raise DivergenceError("spherical state collapsed to zero norm")
    return s2 / nrm


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def lyapunov(S: Array, epsilon: float = 0.0) -> float:
    """Flow functional ``sum_a (phi(S_a) + (eps/2) ||theta_a||^2)`` with unit
    node weights; bounded below by ``-N log c``."""
    S = np.asarray(S, dtype=float)
    val = float(np.sum(neg_entropy(S)))
    if epsilon != 0.0:
        th = to_theta(S)
        val += 0.5 * epsilon * float(np.sum(th * th))
    return val


def _diagnostics_from_tangent(V: Array, epsilon: float):
    """(lyapunov, mean/max entropy, theta L2) computed stably from V."""
    logp = log_softmax(V)
    p = np.exp(logp)
    phi = np.sum(p * logp, axis=1)
    th = tangent_to_theta(V)
    th_sq = float(np.sum(th * th))
    lyap = float(np.sum(phi)) + 0.5 * epsilon * th_sq
    H = -phi
    return lyap, float(H.mean()), float(H.max()), float(np.sqrt(th_sq))


def entropy_stats(S: Array) -> tuple[float, float, Array]:
    """(mean entropy, max entropy, argmax labeling with lowest-index ties)."""
    H = entropy(np.asarray(S, dtype=float))
    labels = np.argmax(S, axis=1)
    return float(H.mean()), float(H.max()), labels


@dataclass
class SpectralDecomposition:
    """Dense eigendecomposition of a Laplace-Beltrami operator.

    Eigenvalues are sorted descending (the zero eigenvalue of the constant
    mode first, all others negative).  Eigenvectors are orthonormal in the
    volume-weighted inner product with weights ``1/q = sqrt|h|``.
    """

    eigenvalues: Array
    eigenvectors: Array      # column n is the eigenfunction of eigenvalues[n]
    volume_weights: Array    # sqrt|h| per node

    def coefficients(self, X: Array) -> Array:
        """Expansion coefficients ``a_n`` of node-major X in the eigenbasis."""
        return self.eigenvectors.T @ (self.volume_weights[:, None]
                                      * np.atleast_2d(X.T).T)


def spectral_decomposition(h_field: MetricField) -> SpectralDecomposition:
    grid = h_field.grid
    if grid.n_nodes > SPECTRAL_NODE_GUARD:
        raise CapabilityError(
            f"dense spectral decomposition limited to {SPECTRAL_NODE_GUARD} nodes, "
            f"got {grid.n_nodes}")
    L, q, E = assemble_laplace_beltrami(h_field)
    rq = np.sqrt(q)
    M = (rq[:, None] * E.toarray()) * rq[None, :]
    M = 0.5 * (M + M.T)
    w, U = scipy.linalg.eigh(M)
    order = np.argsort(w)[::-1]
    w = w[order]
    phi = rq[:, None] * U[:, order]
    return SpectralDecomposition(w, phi, 1.0 / q)


def low_frequency_set(h_field: MetricField, epsilon: float, m_squared: float,
                      c: int) -> tuple[SpectralDecomposition, Array]:
    """Spectral decomposition plus the index set of modes along which the
    mass term dominates diffusion:
    ``{n : b_upper(c) lam_n + epsilon (lam_n + m^2) > 0}``, always including
    the constant mode ``n = 0``."""
    dec = spectral_decomposition(h_field)
    lam = dec.eigenvalues
    crit = b_upper(c) * lam + epsilon * (lam + m_squared)
    members = crit > 0
    members[0] = True
    return dec, np.flatnonzero(members)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

# Dormand-Prince 5(4) embedded pair
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                   187 / 2100, 1 / 40])


class _TangentProblem:
    """Tangent-space ODE right-hand side with configurable metric refresh."""

    def __init__(self, grid: TorusGrid, spec: FlowSpec):
        self.grid = grid
        self.spec = spec
        self.derivs = derivative_operators(grid)
        self._cache: Optional[GeometryCache] = None
        self._frozen: Optional[GeometryCache] = None
        if spec.family == "sigma":
            if spec.metric_source is None:
                raise GeometryDomainError("sigma flow requires a metric source")
            self._static = bool(getattr(spec.metric_source, "static", False))
        elif spec.family == "s_flow":
            if spec.omega is None:
                raise GeometryDomainError("s_flow requires coupling weights")
            self.omega = _check_omega(spec.omega)
            self._static = True

    def _geometry(self, S: Array, t: float) -> GeometryCache:
        if self._frozen is not None:
            return self._frozen
        if self._static and self._cache is not None:
            return self._cache
        h = self.spec.metric_source(S, min(t / self.spec.T, 1.0))
        geo = GeometryCache(self.grid, h, self.derivs)
        if self._static:
            self._cache = geo
        return geo

    def freeze_metric(self, V: Array, t: float):
        """Pin the metric for all stages of the upcoming step."""
        if self.spec.family == "sigma" and self.spec.metric_refresh == "step":
            self._frozen = None
            self._frozen = self._geometry(softmax(V), t)

    def release_metric(self):
        self._frozen = None

    def __call__(self, V: Array, t: float) -> Array:
        spec = self.spec
        if spec.family == "s_flow":
            S = softmax(V)
            return project_tangent((self.omega @ S - S) + S)
        S = softmax(V)
        geo = self._geometry(S, t)
        return sigma_rhs_tangent(V, geo.h_field, spec.alpha, spec.m_squared, geo)


def _require_finite_state(V: Array, t: float):
    if not np.all(np.isfinite(V)):
        raise DivergenceError("flow state became non-finite", last_time=t)


def integrate(grid: TorusGrid, S0: Array, spec: FlowSpec, record_every: int = 1,
              keep_snapshots: bool = False) -> tuple[Array, TrajectoryRecord]:
    """Integrate one flow and sample diagnostics.

    Returns the final assignment field and a :class:`TrajectoryRecord`.  For
    the sigma and graph-coupled families the integration variable is the
    tangent field ``V``; rows are re-projected onto ``T_0`` every step to
    cancel roundoff drift and mapped through ``softmax`` only when sampled.
    """
    S0 = np.asarray(S0, dtype=float)
    rec = TrajectoryRecord(metric_refresh=spec.metric_refresh,
                           snapshots=[] if keep_snapshots else None)

    if spec.family == "spherical":
        return _integrate_spherical(grid, S0, spec, rec, record_every)

    problem = _TangentProblem(grid, spec)
    V = softmax_inv(S0)

    def sample(t, V):
        lyap, mh, xh, tl2 = _diagnostics_from_tangent(V, spec.epsilon)
        snap = softmax(V) if keep_snapshots else None
        rec.append(t, lyap, mh, xh, tl2, snap)

    sample(0.0, V)
    if spec.integrator == "adaptive":
        V = _run_adaptive(problem, V, spec, sample, record_every)
    else:
        V = _run_fixed(problem, V, spec, sample, record_every)
    S = softmax(V)
    return S, rec


def _run_fixed(problem: _TangentProblem, V: Array, spec: FlowSpec,
               sample, record_every: int) -> Array:
    t = 0.0
    k = 0
    eta = spec.step
    while t < spec.T - 1e-12:
        h = min(eta, spec.T - t)
        problem.freeze_metric(V, t)
        if spec.integrator == "euler":
            V = V + h * problem(V, t)
        else:  # classical RK4
            k1 = problem(V, t)
            k2 = problem(V + 0.5 * h * k1, t + 0.5 * h)
            k3 = problem(V + 0.5 * h * k2, t + 0.5 * h)
            k4 = problem(V + h * k3, t + h)
            V = V + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        problem.release_metric()
        t += h
        k += 1
        _require_finite_state(V, t)
        V = project_tangent(V)
        if k % record_every == 0 or t >= spec.T - 1e-12:
            sample(t, V)
    return V


def _run_adaptive(problem: _TangentProblem, V: Array, spec: FlowSpec,
                  sample, record_every: int) -> Array:
    t = 0.0
    dt = min(spec.step, spec.T) if spec.step > 0 else spec.T / 100.0
    err_prev = 1.0
    accepted = 0
    min_dt = 1e-14 * max(1.0, spec.T)
    while t < spec.T - 1e-12:
        dt = min(dt, spec.T - t)
        if dt < min_dt:
            raise StepUnderflowError(f"adaptive step underflow at t={t:g}")
        problem.freeze_metric(V, t)
        ks = []
        for i in range(7):
            Vi = V
            for a, kj in zip(_DP_A[i], ks):
                if a != 0.0:
                    Vi = Vi + dt * a * kj
            ks.append(problem(Vi, t + _DP_C[i] * dt))
        problem.release_metric()
        V5 = V + dt * sum(b * kj for b, kj in zip(_DP_B5, ks) if b != 0.0)
        V4 = V + dt * sum(b * kj for b, kj in zip(_DP_B4, ks) if b != 0.0)
        scale = spec.atol + spec.rtol * np.maximum(np.abs(V), np.abs(V5))
        err = float(np.sqrt(np.mean(((V5 - V4) / scale) ** 2)))
        if err <= 1.0 or dt <= min_dt * 2:
            t += dt
            V = project_tangent(V5)
            _require_finite_state(V, t)
            accepted += 1
            if accepted % record_every == 0 or t >= spec.T - 1e-12:
                sample(t, V)
            err_prev = max(err, 1e-10)
        fac = 0.9 * (err + 1e-16) ** -0.14 * err_prev**0.08
        dt *= min(5.0, max(0.2, fac))
    return V


def _integrate_spherical(grid: TorusGrid, S0: Array, spec: FlowSpec,
                         rec: TrajectoryRecord, record_every: int):
    if spec.omega is None:
        raise GeometryDomainError("spherical flow requires coupling weights")
    mu = spec.mu if spec.mu is not None else np.ones(S0.shape[0])
    s = np.sqrt(S0)
    s /= np.linalg.norm(s, axis=1, keepdims=True)

    def sample(t, s):
        p = s * s
        p = p / p.sum(axis=1, keepdims=True)
        mh, xh, _ = entropy_stats(p)
        phi_sum = float(np.sum(neg_entropy(p)))
        rec.append(t, phi_sum, mh, xh, 0.0,
                   p if rec.snapshots is not None else None)

    sample(0.0, s)
    t, k = 0.0, 0
    while t < spec.T - 1e-12:
        h = min(spec.step, spec.T - t)
        s = spherical_euler_step(s, spec.omega, mu, h)
        t += h
        k += 1
        _require_finite_state(s, t)
        if k % record_every == 0 or t >= spec.T - 1e-12:
            sample(t, s)
    p = s * s
    return p / p.sum(axis=1, keepdims=True), rec


def integrate_ambient_euler(grid: TorusGrid, S0: Array, spec: FlowSpec) -> Array:
    """Explicit Euler directly on the ambient assignment field.

    First-order equivalent to the tangent-parametrized run; used to compare
    parametrizations.  The state stays row-stochastic because the generator
    has zero row sums; positivity requires a sufficiently small step.
    """
    if spec.family != "sigma":
        raise GeometryDomainError("ambient Euler applies to the sigma family")
    problem = _TangentProblem(grid, spec)
    S = np.array(S0, dtype=float)
    t = 0.0
    while t < spec.T - 1e-12:
        h = min(spec.step, spec.T - t)
        geo = problem._geometry(S, t)
        S = S + h * sigma_rhs_ambient(S, geo.h_field, spec.alpha,
                                      spec.m_squared, geo)
        t += h
        _require_finite_state(S, t)
        if np.any(S <= 0):
            raise DivergenceError("ambient Euler left the simplex", last_time=t)
    return S

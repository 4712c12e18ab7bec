"""State-to-metric operators and differentiation through the unrolled flow.

The operator maps an assignment field (plus a normalized-time channel) to a
per-node inverse metric: a single periodic convolution, a per-pixel
multilayer perceptron with tanh activations, and a head that turns three raw
numbers per node into an SPD tensor with eigenvalues in a fixed positive
range.  The same head also serves "free parameter field" fitting, where the
three raw numbers per node are optimized directly.

Training differentiates through the geometric-Euler unrolling of the flow
(discretize-then-differentiate).  The flow step is written once against the
dispatching ops of :mod:`sigmaflow.autodiff`, so the exact same code path
produces fast numpy evaluations and tape gradients; gradient exactness is
certified against central finite differences in the test suite.

Checkpoints are versioned binary blobs: magic ``SFOP``, version, layer-size
list, then raw little-endian float64 weights in declaration order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError, FormatError, GeometryDomainError
from .flows import FlowSpec
from .grid import MetricField, TorusGrid, metric_from_params

Array = np.ndarray

#: raw value whose sigmoid lands the metric head exactly on the flat metric
FLAT_START = float(np.log(0.99 / 0.01))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class OperatorParams:
    """Weights of the metric-predicting operator.

    ``kernel`` has shape (K, K, c+1, F) where the extra input channel carries
    the normalized time t/T broadcast over the grid; ``weights``/``biases``
    define the per-pixel MLP whose final width is exactly 3 (the metric-head
    input).
    """

    kernel: Array
    conv_bias: Array
    weights: list
    biases: list

    def __post_init__(self):
        if self.weights[-1].shape[1] != 3:
            raise GeometryDomainError("final layer width must be 3")

    @property
    def n_labels(self) -> int:
        return self.kernel.shape[2] - 1

    @property
    def layer_sizes(self) -> list:
        return [self.kernel.shape[3]] + [w.shape[1] for w in self.weights]

    def to_list(self) -> list:
        return [self.kernel, self.conv_bias, *self.weights, *self.biases]

    @classmethod
    def from_list(cls, arrays: list, template: "OperatorParams") -> "OperatorParams":
        n = len(template.weights)
        return cls(arrays[0], arrays[1],
                   list(arrays[2:2 + n]), list(arrays[2 + n:2 + 2 * n]))

    def n_parameters(self) -> int:
        return sum(a.size for a in self.to_list())

    @classmethod
    def initialize(cls, c: int, kernel_size: int = 7, filters: int = 16,
                   hidden: tuple = (16, 8, 4), seed: int = 0,
                   flat_start: bool = True,
                   final_scale: float = 0.05) -> "OperatorParams":
        """Seeded initialization.

        With ``flat_start`` the final bias targets the identity metric and
        the final weights are scaled down by ``final_scale``, so an untrained
        operator runs a near-flat flow while every layer still receives
        gradient from the first update on.
        """
        if kernel_size % 2 != 1:
            raise GeometryDomainError("kernel size must be odd")
        rng = np.random.default_rng(seed)
        cin = c + 1
        kernel = rng.standard_normal((kernel_size, kernel_size, cin, filters))
        kernel *= 1.0 / np.sqrt(kernel_size * kernel_size * cin)
        conv_bias = np.zeros(filters)
        sizes = [filters, *hidden, 3]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            biases.append(np.zeros(fan_out))
        if flat_start:
            weights[-1] *= final_scale
            biases[-1][:] = np.array([FLAT_START, 0.0, FLAT_START])
        return cls(kernel, conv_bias, weights, biases)


_MAGIC = b"SFOP"
_VERSION = 1


def save_params(params: OperatorParams, path) -> None:
    """Write a versioned binary checkpoint (little-endian float64 payload)."""
    k = params.kernel
    sizes = params.layer_sizes
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", _VERSION, k.shape[0], k.shape[2], len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for arr in params.to_list():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> OperatorParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, ksz, cin, n_sizes = struct.unpack_from("<IIII", blob, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    sizes = list(struct.unpack_from(f"<{n_sizes}I", blob, 20))
    if sizes[-1] != 3:
        raise FormatError("checkpoint layer sizes must end in 3")
    off = 20 + 4 * n_sizes
    shapes = [(ksz, ksz, cin, sizes[0]), (sizes[0],)]
    shapes += [(a, b) for a, b in zip(sizes[:-1], sizes[1:])]
    shapes += [(b,) for b in sizes[1:]]
    arrays = []
    for shp in shapes:
        n = int(np.prod(shp))
        end = off + 8 * n
        if end > len(blob):
            raise FormatError("checkpoint truncated", offset=off)
        arrays.append(np.frombuffer(blob[off:end], dtype="<f8").reshape(shp).copy())
        off = end
    if off != len(blob):
        raise FormatError("trailing bytes after checkpoint payload", offset=off)
    n_layers = len(sizes) - 1
    return OperatorParams(arrays[0], arrays[1],
                          list(arrays[2:2 + n_layers]),
                          list(arrays[2 + n_layers:]))


# ---------------------------------------------------------------------------
# generic forward pieces (run on ndarrays or tape Vars alike)
# ---------------------------------------------------------------------------

def _operator_core(kernel, conv_bias, weights, biases, x_hwc, t_norm: float):
    """Convolution + time channel + per-pixel MLP -> (H, W, 3) raw params."""
    c = ad.value_of(kernel).shape[2] - 1
    k_state = kernel[:, :, :c, :]
    k_time = kernel[:, :, c, :]
    feat = ad.conv2d(x_hwc, k_state)
    feat = feat + t_norm * ad.vsum(k_time, axis=(0, 1))
    feat = ad.tanh(feat + conv_bias)
    H, W = ad.value_of(feat).shape[:2]
    z = ad.reshape(feat, (H * W, ad.value_of(feat).shape[2]))
    for Wm, b in zip(weights[:-1], biases[:-1]):
        z = ad.tanh(ad.matmul(z, Wm) + b)
    z = ad.matmul(z, weights[-1]) + biases[-1]
    return ad.reshape(z, (H, W, 3))


def _metric_head(raw_hw3):
    """Raw (H, W, 3) parameters -> divergence-form coefficient fields.

    Returns ``(va, vb, vc, q)`` with ``[va vb; vb vc] = sqrt|h| h^{-1}``
    (the unit-determinant diffusivity) and ``q = 1/sqrt|h|``; the inverse
    metric itself is ``q * [va vb; vb vc]``.
    """
    x = raw_hw3[..., 0]
    y = raw_hw3[..., 1]
    z = raw_hw3[..., 2]
    lam = ad.sigmoid(x) + 0.01
    ang = (0.5 * np.pi) * ad.tanh(y)
    v = ad.sigmoid(z) + 0.01
    cs, sn = ad.cos(ang), ad.sin(ang)
    ilam = 1.0 / lam
    va = lam * cs * cs + ilam * sn * sn
    vb = (lam - ilam) * sn * cs
    vc = lam * sn * sn + ilam * cs * cs
    return va, vb, vc, 1.0 / v


def _sxp(x):
    return ad.roll(x, -1, axis=1)


def _sxm(x):
    return ad.roll(x, 1, axis=1)


def _syp(x):
    return ad.roll(x, -1, axis=0)


def _sym(x):
    return ad.roll(x, 1, axis=0)


def _expand(coef):
    """(H, W) coefficient -> (H, W, 1) for channel broadcasting."""
    H, W = ad.value_of(coef).shape
    return ad.reshape(coef, (H, W, 1))


def _lap_apply(va, vb, vc, q, u):
    """Laplace-Beltrami action on (H, W, k) fields; matches the sparse
    assembly of :func:`sigmaflow.grid.assemble_laplace_beltrami`."""
    ex = _expand(0.5 * (va + _sxp(va)))
    ew = _expand(0.5 * (va + _sxm(va)))
    es = _expand(0.5 * (vc + _syp(vc)))
    en = _expand(0.5 * (vc + _sym(vc)))
    cpp = _expand(0.25 * (_sxp(vb) + _syp(vb)))
    cmm = _expand(0.25 * (_sxm(vb) + _sym(vb)))
    cpm = _expand((-0.25) * (_sxm(vb) + _syp(vb)))
    cmp_ = _expand((-0.25) * (_sxp(vb) + _sym(vb)))
    out = ex * (_sxp(u) - u) + ew * (_sxm(u) - u)
    out = out + es * (_syp(u) - u) + en * (_sym(u) - u)
    out = out + cpp * (_syp(_sxp(u)) - u) + cmm * (_sym(_sxm(u)) - u)
    out = out + cpm * (_syp(_sxm(u)) - u) + cmp_ * (_sym(_sxp(u)) - u)
    return _expand(q) * out


def _d1(u):
    e, w = _sxp(u), _sxm(u)
    return 0.125 * (_sym(e) + 2.0 * e + _syp(e) - _sym(w) - 2.0 * w - _syp(w))


def _d2(u):
    s, n = _syp(u), _sym(u)
    return 0.125 * (_sxm(s) + 2.0 * s + _sxp(s) - _sxm(n) - 2.0 * n - _sxp(n))


def _pairing_apply(va, vb, vc, q, u):
    """Inverse-metric-weighted squared gradient of (H, W, k) fields."""
    ha = _expand(va * q)
    hb = _expand(vb * q)
    hc = _expand(vc * q)
    d1, d2 = _d1(u), _d2(u)
    return ha * d1 * d1 + 2.0 * (hb * d1 * d2) + hc * d2 * d2


def _flow_step_rhs(V, coeffs, alpha: float, m_squared: float):
    va, vb, vc, q = coeffs
    arg = _lap_apply(va, vb, vc, q, V)
    if alpha != 1.0:
        arg = arg + (0.5 * (1.0 - alpha)) * _pairing_apply(
            va, vb, vc, q, ad.log_softmax(V, axis=-1))
    if m_squared != 0.0:
        arg = arg + m_squared * V
    return ad.project_tangent(arg, axis=-1)


# ---------------------------------------------------------------------------
# numpy-facing operator evaluation
# ---------------------------------------------------------------------------

def operator_forward(grid: TorusGrid, params: OperatorParams, S: Array,
                     t_norm: float) -> MetricField:
    """Evaluate the operator on an assignment field; returns the predicted
    inverse-metric field (uniformly SPD by the head construction)."""
    if not 0.0 <= t_norm <= 1.0:
        raise GeometryDomainError("t_norm must lie in [0, 1]")
    S = np.asarray(S, dtype=float)
    if S.ndim == 2:
        if S.shape[0] != grid.n_nodes:
            raise GeometryDomainError("state rows do not match grid nodes")
        S = grid.to_2d(S)
    if S.shape != (grid.H, grid.W, params.n_labels):
        raise GeometryDomainError(
            f"state shape {S.shape} does not match grid/operator "
            f"({grid.H}, {grid.W}, {params.n_labels})")
    raw = _operator_core(params.kernel, params.conv_bias, params.weights,
                         params.biases, S, t_norm)
    return metric_from_params(grid, grid.to_flat(raw))


class LearnedMetric:
    """Metric source backed by a trained operator (state- and time-variant)."""

    static = False

    def __init__(self, grid: TorusGrid, params: OperatorParams):
        self.grid = grid
        self.params = params

    def __call__(self, S: Array, t_norm: float) -> MetricField:
        return operator_forward(self.grid, self.params, S, t_norm)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def label_loss(S: Array, target: Array, kind: str = "auto") -> float:
    """Labeling loss of an assignment field against a target.

    Integer targets: cross-entropy ``sum_a -log S_a(label_a)``.  Soft
    targets: ``sum_a sum_i T_ai (log T_ai - log S_ai)`` with 0 log 0 = 0
    (``kind='kl_ts'``), or the reverse direction with ``kind='kl_st'``.
    """
    S = np.asarray(S, dtype=float)
    target = np.asarray(target)
    if np.issubdtype(target.dtype, np.integer) or kind == "ce":
        labels = target.astype(int)
        if labels.min() < 0 or labels.max() >= S.shape[1]:
            raise GeometryDomainError("label out of range")
        return float(-np.sum(np.log(S[np.arange(len(labels)), labels])))
    if S.shape != target.shape:
        raise GeometryDomainError("soft target shape mismatch")
    logS = np.log(S)
    if kind in ("auto", "kl_ts"):
        safe = np.where(target > 0, target, 1.0)
        return float(np.sum(target * (np.log(safe) - logS)))
    if kind == "kl_st":
        safe_t = np.where(target > 0, target, 1e-300)
        return float(np.sum(S * (logS - np.log(safe_t))))
    raise GeometryDomainError(f"unknown loss kind {kind!r}")


def _loss_from_state(V, target: Array, kind: str):
    """Tape loss from the final tangent state (H, W, c)."""
    H, W, c = ad.value_of(V).shape
    logp = ad.reshape(ad.log_softmax(V, axis=-1), (H * W, c))
    target = np.asarray(target)
    if np.issubdtype(target.dtype, np.integer) or kind == "ce":
        return -ad.vsum(ad.take_labels(logp, target.reshape(-1).astype(int)))
    T = target.reshape(H * W, c).astype(float)
    if kind in ("auto", "kl_ts"):
        logT = np.log(np.where(T > 0, T, 1.0))
        return ad.vsum((logT - logp) * T)
    if kind == "kl_st":
        logT = np.log(np.where(T > 0, T, 1e-300))
        p = ad.exp(logp)
        return ad.vsum(p * (logp - logT))
    raise GeometryDomainError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# unrolled flow and gradients
# ---------------------------------------------------------------------------

def _unroll_steps(spec: FlowSpec) -> int:
    if spec.integrator != "euler":
        raise GeometryDomainError(
            "unrolled differentiation requires the fixed-step Euler integrator")
    n = int(round(spec.T / spec.step))
    if abs(n * spec.step - spec.T) > 1e-9 * max(1.0, spec.T):
        raise GeometryDomainError("T must be an integer multiple of step")
    return n


def unrolled_flow(V0, spec: FlowSpec, coeff_provider):
    """Run the fixed-step Euler unrolling in tangent coordinates.

    ``coeff_provider(V, t_norm)`` returns the divergence-form coefficient
    fields; the metric is refreshed from it at every step (each Euler step
    has a single stage).  Works on ndarrays and tape Vars alike.
    """
    n = _unroll_steps(spec)
    V = V0
    for k in range(n):
        t_norm = (k * spec.step) / spec.T
        coeffs = coeff_provider(V, t_norm)
        V = V + spec.step * _flow_step_rhs(V, coeffs, spec.alpha, spec.m_squared)
    return V


class RawParamsCoeffs:
    """Static per-node raw parameter field (fit-metric mode)."""

    def __init__(self, raw_hw3):
        self._coeffs = _metric_head(raw_hw3)

    def __call__(self, V, t_norm):
        return self._coeffs


class OperatorCoeffs:
    """State- and time-dependent operator (learned mode)."""

    def __init__(self, kernel, conv_bias, weights, biases):
        self.kernel = kernel
        self.conv_bias = conv_bias
        self.weights = weights
        self.biases = biases

    def __call__(self, V, t_norm):
        S = ad.softmax(V, axis=-1)
        raw = _operator_core(self.kernel, self.conv_bias, self.weights,
                             self.biases, S, t_norm)
        return _metric_head(raw)


def _tangent_init(grid: TorusGrid, S0: Array) -> Array:
    from .simplex import softmax_inv
    return grid.to_2d(softmax_inv(np.asarray(S0, dtype=float)))


def loss_and_grad(grid: TorusGrid, params: OperatorParams, batch,
                  spec: FlowSpec, kind: str = "auto"):
    """Mean labeling loss over a batch and its exact reverse-mode gradient
    with respect to the operator parameters.

    ``batch`` is a sequence of ``(S0, target)`` pairs; samples are reduced in
    index order, so results are bitwise reproducible.
    """
    if not batch:
        raise GeometryDomainError("batch is empty")
    leaves = [ad.leaf(a) for a in params.to_list()]
    tpl = OperatorParams.from_list(leaves, params)
    provider = OperatorCoeffs(tpl.kernel, tpl.conv_bias, tpl.weights, tpl.biases)
    total = 0.0
    inv = 1.0 / len(batch)
    for idx, (S0, target) in enumerate(batch):
        V0 = ad.Var(_tangent_init(grid, S0), requires_grad=False)
        VT = unrolled_flow(V0, spec, provider)
        loss = _loss_from_state(VT, target, kind)
        val = float(ad.value_of(loss))
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite loss on batch sample {idx}")
        total += val
        if ad.is_var(loss):
            ad.backward(loss, seed=inv)
    grads = [lf.grad if lf.grad is not None else np.zeros_like(lf.value)
             for lf in leaves]
    return total * inv, OperatorParams.from_list(grads, params)


def fit_loss_and_grad(grid: TorusGrid, raw_params: Array, S0: Array,
                      target: Array, spec: FlowSpec, kind: str = "auto"):
    """Loss and gradient with respect to a free (N, 3) or (H, W, 3) raw
    per-node parameter field (static metric)."""
    raw = np.asarray(raw_params, dtype=float)
    flat_in = raw.ndim == 2
    if flat_in:
        raw = grid.to_2d(raw)
    leafp = ad.leaf(raw)
    VT = unrolled_flow(ad.Var(_tangent_init(grid, S0), requires_grad=False),
                       spec, RawParamsCoeffs(leafp))
    loss = _loss_from_state(VT, target, kind)
    val = float(ad.value_of(loss))
    if not np.isfinite(val):
        raise DivergenceError("non-finite loss in metric fit")
    if ad.is_var(loss):
        ad.backward(loss)
        g = leafp.grad
    else:
        g = np.zeros_like(raw)
    return val, (grid.to_flat(g) if flat_in else g)


def forward_loss(grid: TorusGrid, params_or_raw, S0: Array, target: Array,
                 spec: FlowSpec, kind: str = "auto") -> float:
    """Fast numpy evaluation of the exact quantity the tape differentiates."""
    if isinstance(params_or_raw, OperatorParams):
        provider = OperatorCoeffs(params_or_raw.kernel, params_or_raw.conv_bias,
                                  params_or_raw.weights, params_or_raw.biases)
    else:
        raw = np.asarray(params_or_raw, dtype=float)
        provider = RawParamsCoeffs(raw if raw.ndim == 3 else grid.to_2d(raw))
    VT = unrolled_flow(_tangent_init(grid, S0), spec, provider)
    return float(ad.value_of(_loss_from_state(VT, target, kind)))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptState:
    """Adaptive first-order optimizer state over a list of arrays."""

    params: list
    m: list
    s: list
    t: int = 0
    method: str = "adabelief"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: list, method: str = "adabelief", **kw) -> "OptState":
        if method not in ("adabelief", "adam"):
            raise GeometryDomainError(f"unknown optimizer {method!r}")
        return cls(params=[np.array(p, dtype=float) for p in params],
                   m=[np.zeros_like(p, dtype=float) for p in params],
                   s=[np.zeros_like(p, dtype=float) for p in params],
                   method=method, **kw)


def optimizer_step(state: OptState, grads: list, lr: float) -> OptState:
    """One belief-style adaptive moment update (or plain adaptive-moment with
    ``method='adam'``); bias-corrected, deterministic given identical inputs.
    """
    t = state.t + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_p, new_m, new_s = [], [], []
    for p, m, s, g in zip(state.params, state.m, state.s, grads):
        g = np.asarray(g, dtype=float)
        m2 = b1 * m + (1 - b1) * g
        if state.method == "adabelief":
            s2 = b2 * s + (1 - b2) * (g - m2) ** 2 + eps
        else:
            s2 = b2 * s + (1 - b2) * g * g
        m_hat = m2 / (1 - b1**t)
        s_hat = s2 / (1 - b2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(s_hat) + eps))
        new_m.append(m2)
        new_s.append(s2)
    return OptState(new_p, new_m, new_s, t, state.method, b1, b2, eps)

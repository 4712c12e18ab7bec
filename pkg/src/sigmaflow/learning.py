"""Experiment drivers: synthetic labelings, the corruption pipeline,
per-node metric fitting, operator training, and evaluation against the
flat-metric baseline.

Everything here is seed-deterministic end to end: scene generation,
corruption draws, shuffling, and initialization all derive from explicit
seeds via ``numpy.random.SeedSequence``, and gradient reductions run in
fixed sample order.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import operator as op
from .errors import DivergenceError, GeometryDomainError
from .flows import FlowSpec
from .grid import TorusGrid, metric_diagnostics, metric_from_params
from .simplex import softmax

Array = np.ndarray


@dataclass
class CorruptionConfig:
    """Label smoothing plus spherical noise injection."""

    smoothing: float = 0.8
    noise_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.smoothing <= 1.0:
            raise GeometryDomainError("smoothing factor must lie in (0, 1]")
        if self.noise_std < 0:
            raise GeometryDomainError("noise std must be >= 0")


@dataclass
class TrainConfig:
    """Desk-scale defaults for operator training; all knobs overridable."""

    H: int = 48
    W: int = 48
    c: int = 5
    n_train: int = 20
    n_test: int = 10
    sites_range: tuple = (4, 12)
    T: float = 2.0
    step: float = 0.2
    m_squared: float = 4.0
    alpha: float = 1.0
    epochs: int = 12
    lr: float = 1e-3
    batch_size: int = 1
    optimizer: str = "adabelief"
    kernel_size: int = 7
    filters: int = 16
    hidden: tuple = (16, 8, 4)
    val_fraction: float = 0.1
    seed: int = 0
    smoothing: float = 0.8
    noise_std: float = 0.2

    def flow_spec(self) -> FlowSpec:
        return FlowSpec(T=self.T, step=self.step, m_squared=self.m_squared,
                        alpha=self.alpha, integrator="euler")

    def grid(self) -> TorusGrid:
        return TorusGrid(self.H, self.W)


def _child_seed(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(parts)))


# ---------------------------------------------------------------------------
# synthetic scenes and corruption
# ---------------------------------------------------------------------------

def gen_voronoi(H: int, W: int, c: int, sites: int, seed: int) -> Array:
    """Toroidal Voronoi labeling: each node takes the label of the nearest of
    ``sites`` uniformly placed sites (toroidal Euclidean distance, lowest
    site index on ties); site labels are drawn uniformly from the c labels."""
    if sites < 1:
        raise GeometryDomainError("need at least one site")
    rng = _child_seed(seed, 0x56)
    pos = rng.uniform([0.0, 0.0], [H, W], size=(sites, 2))
    site_labels = rng.integers(0, c, size=sites)
    i, j = np.divmod(np.arange(H * W), W)
    dy = np.abs(i[:, None] - pos[None, :, 0])
    dy = np.minimum(dy, H - dy)
    dx = np.abs(j[:, None] - pos[None, :, 1])
    dx = np.minimum(dx, W - dx)
    nearest = np.argmin(dy * dy + dx * dx, axis=1)
    return site_labels[nearest].astype(np.int64)


def smooth_labels(labels: Array, c: int, smoothing: float) -> Array:
    """One-hot rows mixed toward uniform: ``s * onehot + (1 - s)/c``."""
    n = len(labels)
    out = np.full((n, c), (1.0 - smoothing) / c)
    out[np.arange(n), labels] += smoothing
    return out


def corrupt(labels: Array, c: int, cfg: CorruptionConfig) -> Array:
    """Corruption pipeline: label smoothing, log, projection to the unit
    sphere, Gaussian noise, re-projection, softmax.

    Every stage is a strictly monotone per-row transformation of component
    order at zero noise, so the argmax is preserved there.
    """
    rng = _child_seed(cfg.seed, 0xC0)
    v = np.log(smooth_labels(np.asarray(labels), c, cfg.smoothing))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v = v + rng.normal(0.0, cfg.noise_std, size=v.shape)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return softmax(v)


def four_region_target(H: int, W: int) -> Array:
    """Quadrant labeling with labels 0..3 (torus-periodic region edges)."""
    i, j = np.divmod(np.arange(H * W), W)
    return (2 * (i >= H // 2) + (j >= W // 2)).astype(np.int64)


def accuracy(pred: Array, truth: Array) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(truth)))


# ---------------------------------------------------------------------------
# metric fitting (free per-node parameters, static metric)
# ---------------------------------------------------------------------------

@dataclass
class FitReport:
    losses: list
    pixel_error: float
    pred_labels: Array
    anisotropy: Array
    scale: Array
    raw_params: Array
    steps_run: int


def flat_raw_params(n_nodes: int) -> Array:
    """Raw parameter rows whose metric head emits the identity metric."""
    return np.tile([op.FLAT_START, 0.0, op.FLAT_START], (n_nodes, 1))


def fit_metric(grid: TorusGrid, target: Array, init: Array, spec: FlowSpec,
               max_steps: int = 500, lr: float = 0.01, mode: str = "adabelief",
               target_error: float = 0.0, loss_kind: str = "auto"):
    """Fit a static per-node metric so the flow maps ``init`` to ``target``.

    Gradient descent through the unrolled flow on an (N, 3) raw parameter
    field starting from the flat metric.  ``mode='linesearch'`` runs plain
    gradient descent with backtracking (monotonically non-increasing loss).
    Returns the fitted inverse-metric field and a :class:`FitReport`.
    """
    if mode not in ("adabelief", "linesearch"):
        raise GeometryDomainError(f"unknown fit mode {mode!r}")
    raw = flat_raw_params(grid.n_nodes)
    losses = []
    state = op.OptState.init([raw])
    step_size = lr
    steps_run = 0
    for k in range(max_steps):
        loss, grad = op.fit_loss_and_grad(grid, raw, init, target, spec,
                                          loss_kind)
        losses.append(loss)
        steps_run = k + 1
        if mode == "linesearch":
            trial = step_size
            for _ in range(30):
                if op.forward_loss(grid, raw - trial * grad, init, target,
                                   spec, loss_kind) <= loss:
                    break
                trial *= 0.5
            raw = raw - trial * grad
            step_size = min(trial * 2.0, lr)
        else:
            state = op.optimizer_step(state, [grad], lr)
            raw = state.params[0]
        if target_error and k % 10 == 9:
            pred = _predict_labels(grid, raw, init, spec)
            if 1.0 - accuracy(pred, _hard_target(target)) <= target_error:
                break
    pred = _predict_labels(grid, raw, init, spec)
    err = 1.0 - accuracy(pred, _hard_target(target))
    field = metric_from_params(grid, raw)
    anis, scale = metric_diagnostics(field)
    report = FitReport(losses, err, pred, anis, scale, raw, steps_run)
    return field, report


def _hard_target(target: Array) -> Array:
    target = np.asarray(target)
    if np.issubdtype(target.dtype, np.integer):
        return target
    return np.argmax(target, axis=1)


def _predict_labels(grid: TorusGrid, params_or_raw, S0: Array,
                    spec: FlowSpec) -> Array:
    if isinstance(params_or_raw, op.OperatorParams):
        provider = op.OperatorCoeffs(params_or_raw.kernel,
                                     params_or_raw.conv_bias,
                                     params_or_raw.weights,
                                     params_or_raw.biases)
    else:
        raw = np.asarray(params_or_raw, dtype=float)
        provider = op.RawParamsCoeffs(raw if raw.ndim == 3 else grid.to_2d(raw))
    VT = op.unrolled_flow(op._tangent_init(grid, S0), spec, provider)
    return np.argmax(grid.to_flat(np.asarray(VT)), axis=1)


# ---------------------------------------------------------------------------
# operator training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    train_losses: list = dataclass_field(default_factory=list)
    val_losses: list = dataclass_field(default_factory=list)
    val_accuracies: list = dataclass_field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = np.inf


def make_dataset(cfg: TrainConfig, kind: str = "train") -> list:
    """Seed-deterministic list of Voronoi label fields."""
    n = cfg.n_train if kind == "train" else cfg.n_test
    offset = 0 if kind == "train" else 1_000_000
    scenes = []
    for idx in range(n):
        rng = _child_seed(cfg.seed, offset, idx)
        sites = int(rng.integers(cfg.sites_range[0], cfg.sites_range[1] + 1))
        scene_seed = int(rng.integers(0, 2**31 - 1))
        scenes.append(gen_voronoi(cfg.H, cfg.W, cfg.c, sites, scene_seed))
    return scenes


def train_operator(scenes: list, cfg: TrainConfig,
                   params: op.OperatorParams | None = None,
                   log=None):
    """Stochastic training of the metric-predicting operator.

    Fresh corruption draws per epoch; 10% of the scenes (by seeded
    partition) are held out for validation and the parameters with the best
    validation loss are returned.  Zero epochs returns the initialization
    unchanged.
    """
    if not scenes:
        raise GeometryDomainError("training scene list is empty")
    grid = cfg.grid()
    spec = cfg.flow_spec()
    if params is None:
        params = op.OperatorParams.initialize(
            cfg.c, cfg.kernel_size, cfg.filters, cfg.hidden, seed=cfg.seed)
    n_val = max(1, int(round(cfg.val_fraction * len(scenes)))) \
        if len(scenes) > 1 else 0
    order = _child_seed(cfg.seed, 0x5911).permutation(len(scenes))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    report = TrainReport()
    best = params
    state = op.OptState.init(params.to_list(), method=cfg.optimizer)

    def validation(p):
        if len(val_idx) == 0:
            return np.inf, np.nan
        losses, accs = [], []
        for vi in val_idx:
            ccfg = CorruptionConfig(cfg.smoothing, cfg.noise_std,
                                    seed=int(_child_seed(cfg.seed, 0xA1, vi)
                                             .integers(0, 2**31 - 1)))
            S0 = corrupt(scenes[vi], cfg.c, ccfg)
            losses.append(op.forward_loss(grid, p, S0, scenes[vi], spec))
            accs.append(accuracy(_predict_labels(grid, p, S0, spec),
                                 scenes[vi]))
        return float(np.mean(losses)), float(np.mean(accs))

    val_loss, val_acc = validation(params)
    report.val_losses.append(val_loss)
    report.val_accuracies.append(val_acc)
    report.best_val_loss = val_loss
    report.best_epoch = 0
    bs = max(1, int(cfg.batch_size))
    for epoch in range(cfg.epochs):
        epoch_rng = _child_seed(cfg.seed, 0xE0, epoch)
        sample_order = epoch_rng.permutation(train_idx)
        epoch_losses = []
        for start in range(0, len(sample_order), bs):
            batch = []
            for si in sample_order[start:start + bs]:
                ccfg = CorruptionConfig(
                    cfg.smoothing, cfg.noise_std,
                    seed=int(_child_seed(cfg.seed, 0xC7, epoch, si)
                             .integers(0, 2**31 - 1)))
                batch.append((corrupt(scenes[si], cfg.c, ccfg), scenes[si]))
            cur = op.OperatorParams.from_list(state.params, params)
            try:
                loss, grads = op.loss_and_grad(grid, cur, batch, spec)
            except DivergenceError as err:
                raise DivergenceError(
                    f"training diverged in epoch {epoch}: {err}")
            epoch_losses.append(loss)
            state = op.optimizer_step(state, grads.to_list(), cfg.lr)
        report.train_losses.append(float(np.mean(epoch_losses))
                                   if epoch_losses else np.nan)
        cur = op.OperatorParams.from_list(state.params, params)
        val_loss, val_acc = validation(cur)
        report.val_losses.append(val_loss)
        report.val_accuracies.append(val_acc)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch + 1
            best = cur
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs}: train loss "
                f"{report.train_losses[-1]:.2f}, val loss {val_loss:.2f}, "
                f"val acc {val_acc:.4f}")
    return best, report


@dataclass
class EvalReport:
    accuracies: list
    mean_accuracy: float
    std_accuracy: float
    pred_labels: list
    error_masks: list


def evaluate(scenes: list, params: op.OperatorParams | None, cfg: TrainConfig,
             seed_offset: int = 0xEF) -> EvalReport:
    """Corrupt, flow, and score every scene; ``params=None`` runs the
    flat-metric baseline.  Identical seeds produce identical reports."""
    grid = cfg.grid()
    spec = cfg.flow_spec()
    if params is None:
        source = flat_raw_params(grid.n_nodes)
    else:
        source = params
    accs, preds, masks = [], [], []
    for idx, labels in enumerate(scenes):
        ccfg = CorruptionConfig(cfg.smoothing, cfg.noise_std,
                                seed=int(_child_seed(cfg.seed, seed_offset, idx)
                                         .integers(0, 2**31 - 1)))
        S0 = corrupt(labels, cfg.c, ccfg)
        pred = _predict_labels(grid, source, S0, spec)
        accs.append(accuracy(pred, labels))
        preds.append(pred)
        masks.append(pred != labels)
    return EvalReport(accs, float(np.mean(accs)), float(np.std(accs)),
                      preds, masks)


# ---------------------------------------------------------------------------
# hand-built initial condition for the embedded-torus study
# ---------------------------------------------------------------------------

def torus_embedding_init(H: int, W: int) -> Array:
    """Four-label assignment field tracing an embedded torus surface."""
    i, j = np.divmod(np.arange(H * W), W)
    xi1 = 2 * np.pi * i / H
    xi2 = 2 * np.pi * j / W
    x = 0.2 * (3 + np.cos(xi1)) * np.cos(xi2)
    y = 0.2 * (3 + np.cos(xi1)) * np.sin(xi2)
    z = 0.2 * np.sin(xi1)
    return softmax(np.stack([x, y, z, x + y + z], axis=1))

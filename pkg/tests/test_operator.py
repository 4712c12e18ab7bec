"""Metric operator, unrolled-flow gradients, optimizers, checkpoints."""
import numpy as np
import pytest

from sigmaflow import autodiff as ad
from sigmaflow import flows as fl
from sigmaflow import grid as gr
from sigmaflow import operator as op
from sigmaflow import simplex as sg
from sigmaflow.errors import FormatError, GeometryDomainError

from helpers import random_interior_points

RNG = np.random.default_rng(5151)


def small_params(c=3, seed=1, flat_start=False):
    return op.OperatorParams.initialize(c, kernel_size=3, filters=4,
                                        hidden=(4,), seed=seed,
                                        flat_start=flat_start)


def euler_spec(grid, T, step, alpha=1.0, m2=4.0, source=None):
    return fl.FlowSpec(metric_source=source, T=T, step=step, alpha=alpha,
                       m_squared=m2, integrator="euler")


class TestOperatorForward:
    def test_zero_weights_give_zero_raw_params(self):
        g = gr.TorusGrid(6, 6)
        c = 3
        params = small_params(c)
        for arr in params.to_list():
            arr[:] = 0.0
        S = random_interior_points(RNG, g.n_nodes, c)
        field = op.operator_forward(g, params, S, 0.5)
        expected = gr.metric_from_params(g, np.zeros((g.n_nodes, 3)))
        np.testing.assert_allclose(field.mats, expected.mats, atol=1e-15)

    def test_translation_equivariance(self):
        g = gr.TorusGrid(8, 10)
        c = 4
        params = op.OperatorParams.initialize(c, kernel_size=5, filters=6,
                                              hidden=(5,), seed=3,
                                              flat_start=False)
        S = random_interior_points(RNG, g.n_nodes, c)
        S2d = g.to_2d(S)
        field = op.operator_forward(g, params, S, 0.3)
        for di, dj in [(2, 0), (0, 3), (5, 7)]:
            shifted = np.roll(np.roll(S2d, di, axis=0), dj, axis=1)
            f2 = op.operator_forward(g, params, g.to_flat(shifted), 0.3)
            ref = np.roll(np.roll(g.to_2d(field.mats), di, axis=0), dj, axis=1)
            np.testing.assert_allclose(g.to_2d(f2.mats), ref, atol=1e-13)

    def test_uniform_spd_bound(self):
        g = gr.TorusGrid(6, 6)
        c = 3
        params = small_params(c, seed=7)
        for arr in params.to_list():
            arr[:] = 5.0 * RNG.standard_normal(arr.shape)
        S = random_interior_points(RNG, g.n_nodes, c)
        field = op.operator_forward(g, params, S, 1.0)
        assert field.min_eig > 0.0098

    def test_flat_start_is_near_identity_metric(self):
        g = gr.TorusGrid(5, 5)
        params = op.OperatorParams.initialize(3, seed=11, flat_start=True)
        S = random_interior_points(RNG, g.n_nodes, 3)
        field = op.operator_forward(g, params, S, 0.0)
        dev = np.abs(field.mats - np.eye(2)[None]).max()
        assert dev < 0.3
        params0 = op.OperatorParams.initialize(3, seed=11, flat_start=True,
                                               final_scale=0.0)
        field0 = op.operator_forward(g, params0, S, 0.0)
        np.testing.assert_allclose(field0.mats,
                                   np.tile(np.eye(2), (g.n_nodes, 1, 1)),
                                   atol=1e-9)

    def test_rejects_bad_time(self):
        g = gr.TorusGrid(5, 5)
        params = small_params()
        S = random_interior_points(RNG, g.n_nodes, 3)
        with pytest.raises(GeometryDomainError):
            op.operator_forward(g, params, S, 1.5)


class TestUnrolledConsistency:
    def test_raw_params_path_matches_integrator(self):
        g = gr.TorusGrid(8, 8)
        c = 3
        raw = 0.7 * RNG.standard_normal((g.n_nodes, 3))
        S0 = random_interior_points(RNG, g.n_nodes, c)
        spec = euler_spec(g, T=0.6, step=0.1, alpha=0.5, m2=1.0,
                          source=fl.ParamsMetric(g, raw))
        S_ref, _ = fl.integrate(g, S0, spec)
        VT = op.unrolled_flow(op._tangent_init(g, S0), spec,
                              op.RawParamsCoeffs(g.to_2d(raw)))
        S_tape = sg.softmax(g.to_flat(np.asarray(VT)))
        assert np.max(np.abs(S_ref - S_tape)) < 1e-10

    def test_learned_path_matches_integrator(self):
        g = gr.TorusGrid(8, 8)
        c = 3
        params = small_params(c, seed=5, flat_start=False)
        S0 = random_interior_points(RNG, g.n_nodes, c)
        spec = euler_spec(g, T=0.4, step=0.1, alpha=1.0, m2=2.0,
                          source=op.LearnedMetric(g, params))
        S_ref, _ = fl.integrate(g, S0, spec)
        provider = op.OperatorCoeffs(params.kernel, params.conv_bias,
                                     params.weights, params.biases)
        VT = op.unrolled_flow(op._tangent_init(g, S0), spec, provider)
        S_tape = sg.softmax(g.to_flat(np.asarray(VT)))
        assert np.max(np.abs(S_ref - S_tape)) < 1e-10


def fd_check_list(value_fn, arrays, grads, n_coords, rng, tol=1e-4, eps=1e-6):
    """Spot-check tape gradients against central differences."""
    for _ in range(n_coords):
        ai = rng.integers(len(arrays))
        if arrays[ai].size == 0:
            continue
        ci = rng.integers(arrays[ai].size)
        orig = arrays[ai].flat[ci]
        arrays[ai].flat[ci] = orig + eps
        fp = value_fn()
        arrays[ai].flat[ci] = orig - eps
        fm = value_fn()
        arrays[ai].flat[ci] = orig
        num = (fp - fm) / (2 * eps)
        got = grads[ai].flat[ci]
        denom = max(abs(num), abs(got), 1e-6)
        assert abs(num - got) / denom < tol, (ai, ci, num, got)


class TestLossAndGrad:
    def test_zero_step_flow_reduces_to_init_loss(self):
        g = gr.TorusGrid(6, 6)
        c = 3
        params = small_params(c, seed=2, flat_start=False)
        S0 = random_interior_points(RNG, g.n_nodes, c)
        labels = RNG.integers(0, c, g.n_nodes)
        spec = euler_spec(g, T=0.0, step=0.2)
        loss, grads = op.loss_and_grad(g, params, [(S0, labels)], spec)
        assert loss == pytest.approx(op.label_loss(S0, labels))
        for arr in grads.to_list():
            assert np.all(arr == 0.0)

    def test_finite_difference_learned_mode(self):
        g = gr.TorusGrid(8, 8)
        c = 3
        params = small_params(c, seed=4, flat_start=False)
        S0 = random_interior_points(RNG, g.n_nodes, c)
        labels = np.asarray(fl.entropy_stats(S0)[2])
        spec = euler_spec(g, T=0.4, step=0.2, alpha=0.5, m2=4.0)
        loss, grads = op.loss_and_grad(g, params, [(S0, labels)], spec)
        arrays = params.to_list()
        fd_check_list(
            lambda: op.forward_loss(g, params, S0, labels, spec),
            arrays, grads.to_list(), n_coords=25, rng=np.random.default_rng(0))

    def test_finite_difference_fit_mode(self):
        g = gr.TorusGrid(8, 8)
        c = 3
        raw = 0.5 * RNG.standard_normal((g.n_nodes, 3))
        S0 = random_interior_points(RNG, g.n_nodes, c)
        labels = RNG.integers(0, c, g.n_nodes)
        spec = euler_spec(g, T=0.4, step=0.2, alpha=0.5, m2=4.0)
        loss, grad = op.fit_loss_and_grad(g, raw, S0, labels, spec)
        fd_check_list(
            lambda: op.forward_loss(g, raw, S0, labels, spec),
            [raw], [grad], n_coords=30, rng=np.random.default_rng(1))

    def test_soft_target_gradients(self):
        g = gr.TorusGrid(6, 6)
        c = 3
        raw = 0.3 * RNG.standard_normal((g.n_nodes, 3))
        S0 = random_interior_points(RNG, g.n_nodes, c)
        target = random_interior_points(RNG, g.n_nodes, c)
        spec = euler_spec(g, T=0.2, step=0.1, alpha=1.0, m2=1.0)
        for kind in ("kl_ts", "kl_st"):
            loss, grad = op.fit_loss_and_grad(g, raw, S0, target, spec, kind)
            fd_check_list(
                lambda: op.forward_loss(g, raw, S0, target, spec, kind),
                [raw], [grad], n_coords=10, rng=np.random.default_rng(2))

    def test_batch_mean_reduction(self):
        g = gr.TorusGrid(6, 6)
        c = 3
        params = small_params(c, seed=9, flat_start=False)
        batch = []
        for _ in range(3):
            S0 = random_interior_points(RNG, g.n_nodes, c)
            batch.append((S0, RNG.integers(0, c, g.n_nodes)))
        spec = euler_spec(g, T=0.2, step=0.1)
        loss, grads = op.loss_and_grad(g, params, batch, spec)
        singles = [op.loss_and_grad(g, params, [b], spec) for b in batch]
        assert loss == pytest.approx(np.mean([s[0] for s in singles]))
        for i, arr in enumerate(grads.to_list()):
            mean = np.mean([s[1].to_list()[i] for s in singles], axis=0)
            np.testing.assert_allclose(arr, mean, atol=1e-12)

    def test_determinism(self):
        g = gr.TorusGrid(6, 6)
        c = 3
        params = small_params(c, seed=13, flat_start=False)
        S0 = random_interior_points(np.random.default_rng(8), g.n_nodes, c)
        labels = np.random.default_rng(9).integers(0, c, g.n_nodes)
        spec = euler_spec(g, T=0.4, step=0.2)
        l1, g1 = op.loss_and_grad(g, params, [(S0, labels)], spec)
        l2, g2 = op.loss_and_grad(g, params, [(S0, labels)], spec)
        assert l1 == l2
        for a, b in zip(g1.to_list(), g2.to_list()):
            np.testing.assert_array_equal(a, b)


class TestLabelLoss:
    def test_exact_soft_match_is_zero(self):
        S = random_interior_points(RNG, 50, 4)
        assert op.label_loss(S, S) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_against_integer_target(self):
        c, n = 5, 40
        S = np.full((n, c), 1 / c)
        labels = RNG.integers(0, c, n)
        assert op.label_loss(S, labels) == pytest.approx(n * np.log(c))

    def test_row_replacement_decreases(self):
        c, n = 4, 30
        S = random_interior_points(RNG, n, c)
        T = random_interior_points(RNG, n, c)
        base = op.label_loss(S, T)
        S2 = S.copy()
        S2[7] = T[7]
        assert op.label_loss(S2, T) < base

    def test_label_out_of_range(self):
        S = np.full((3, 2), 0.5)
        with pytest.raises(GeometryDomainError):
            op.label_loss(S, np.array([0, 1, 2]))


class TestOptimizer:
    def test_zero_gradient_fixed_point(self):
        p = [RNG.standard_normal((4, 3)), RNG.standard_normal(5)]
        state = op.OptState.init(p)
        for _ in range(10):
            state = op.optimizer_step(state, [np.zeros_like(a) for a in p], 0.1)
        for a, b in zip(state.params, p):
            np.testing.assert_array_equal(a, b)

    def test_constant_gradient_direction_and_belief_decay(self):
        g = np.array([1.0, -2.0, 0.5])
        state = op.OptState.init([np.zeros(3)])
        peak = None
        for k in range(8000):
            state = op.optimizer_step(state, [g], lr=0.01)
            if k == 50:
                peak = state.s[0].copy()
        step_vec = state.params[0]
        assert np.all(np.sign(step_vec) == -np.sign(g))
        # belief variance tracks (g - m)^2, which dies off under a constant
        # gradient; s decays geometrically toward its eps floor
        assert np.all(state.s[0] < 1e-4)
        assert np.all(state.s[0] < 0.05 * peak)

    def test_bitwise_deterministic(self):
        g1 = RNG.standard_normal((3, 3))

        def run():
            state = op.OptState.init([np.ones((3, 3))])
            for _ in range(25):
                state = op.optimizer_step(state, [g1], 0.05)
            return state.params[0]

        np.testing.assert_array_equal(run(), run())

    def test_adam_fallback(self):
        state = op.OptState.init([np.zeros(2)], method="adam")
        state = op.optimizer_step(state, [np.array([1.0, -1.0])], 0.1)
        assert np.all(np.sign(state.params[0]) == [-1.0, 1.0])


class TestCheckpoints:
    def test_roundtrip_bitwise(self, tmp_path):
        params = op.OperatorParams.initialize(5, kernel_size=5, filters=8,
                                              hidden=(8, 4), seed=21,
                                              flat_start=False)
        path = tmp_path / "op.ckpt"
        op.save_params(params, path)
        loaded = op.load_params(path)
        for a, b in zip(params.to_list(), loaded.to_list()):
            np.testing.assert_array_equal(a, b)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError):
            op.load_params(path)

    def test_truncated(self, tmp_path):
        params = op.OperatorParams.initialize(3, kernel_size=3, filters=4,
                                              hidden=(4,), seed=1)
        path = tmp_path / "t.ckpt"
        op.save_params(params, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(FormatError):
            op.load_params(path)


class TestFullScaleConfig:
    def test_paper_scale_architecture_constructs_and_runs(self):
        c = 20
        params = op.OperatorParams.initialize(c, kernel_size=15, filters=64,
                                              hidden=(32, 16, 4), seed=0)
        assert params.layer_sizes == [64, 32, 16, 4, 3]
        g = gr.TorusGrid(16, 16)
        S = random_interior_points(RNG, g.n_nodes, c)
        field = op.operator_forward(g, params, S, 0.5)
        assert field.min_eig > 0.0098

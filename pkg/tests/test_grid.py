"""Torus discretization: stencils, Laplace-Beltrami assembly, metric fields."""
import numpy as np
import pytest
import scipy.sparse as sp

from sigmaflow import grid as gr
from sigmaflow.errors import AssemblyError, GeometryDomainError

RNG = np.random.default_rng(414)


def random_spd_field(grid, rng, interpretation="h", base=1.0, wobble=0.5):
    """Random uniformly SPD field built from rotation congruence."""
    n = grid.n_nodes
    ang = rng.uniform(0, np.pi, n)
    l1 = base + wobble * rng.random(n)
    l2 = base + wobble * rng.random(n)
    cs, sn = np.cos(ang), np.sin(ang)
    a = l1 * cs**2 + l2 * sn**2
    b = (l1 - l2) * sn * cs
    c = l1 * sn**2 + l2 * cs**2
    return gr.MetricField.from_entries(grid, a, b, c, interpretation)


def five_point(grid):
    n = grid.n_nodes
    A = sp.lil_matrix((n, n))
    for a in range(n):
        A[a, a] = -4.0
        for di, dj in [(0, 1), (0, -1), (1, 0), (-1, 0)]:
            A[a, grid.neighbor_columns(di, dj)[a]] += 1.0
    return A.tocsr()


class TestDerivativeOperators:
    def test_constants(self):
        g = gr.TorusGrid(6, 7)
        D1, D2 = gr.derivative_operators(g)
        u = np.ones(g.n_nodes)
        assert np.max(np.abs(D1 @ u)) == 0.0
        assert np.max(np.abs(D2 @ u)) == 0.0

    def test_unit_ramp(self):
        g = gr.TorusGrid(8, 9)
        D1, D2 = gr.derivative_operators(g)
        i, j = np.divmod(np.arange(g.n_nodes), g.W)
        ramp_x = j.astype(float)
        d = D1 @ ramp_x
        interior = (j >= 1) & (j <= g.W - 2)
        np.testing.assert_allclose(d[interior], 1.0, atol=1e-13)
        # x-derivative of a y-ramp vanishes everywhere by column symmetry
        ramp_y = i.astype(float)
        assert np.max(np.abs(D1 @ ramp_y)) < 1e-13
        dy = D2 @ ramp_y
        interior_y = (i >= 1) & (i <= g.H - 2)
        np.testing.assert_allclose(dy[interior_y], 1.0, atol=1e-13)


class TestAssembly:
    def test_identity_metric_is_five_point(self):
        g = gr.TorusGrid(5, 6)
        L, q, E = gr.assemble_laplace_beltrami(gr.identity_metric(g))
        assert np.max(np.abs((L - five_point(g)).toarray())) == 0.0
        np.testing.assert_allclose(q, 1.0)

    def test_scaled_identity(self):
        g = gr.TorusGrid(5, 5)
        L, q, E = gr.assemble_laplace_beltrami(gr.identity_metric(g, 4.0))
        ref = 0.25 * five_point(g).toarray()
        np.testing.assert_allclose(L.toarray(), ref, atol=1e-15)

    def test_annihilates_constants(self):
        g = gr.TorusGrid(9, 11)
        for _ in range(5):
            h = random_spd_field(g, RNG)
            L, q, E = gr.assemble_laplace_beltrami(h)
            ones = np.ones(g.n_nodes)
            assert np.max(np.abs(E @ ones)) < 1e-13
            assert np.max(np.abs(L @ ones)) < 1e-12

    def test_divergence_part_symmetric(self):
        g = gr.TorusGrid(8, 7)
        h = random_spd_field(g, RNG)
        L, q, E = gr.assemble_laplace_beltrami(h)
        assert np.max(np.abs((E - E.T).toarray())) < 1e-12

    def test_l_equals_q_times_e(self):
        g = gr.TorusGrid(6, 6)
        h = random_spd_field(g, RNG, interpretation="hinv")
        L, q, E = gr.assemble_laplace_beltrami(h)
        np.testing.assert_allclose(L.toarray(), (sp.diags(q) @ E).toarray())

    def test_negative_semidefinite_weighted(self):
        g = gr.TorusGrid(7, 8)
        h = random_spd_field(g, RNG)
        L, q, E = gr.assemble_laplace_beltrami(h)
        # q-weighted quadratic form <u, L u>_{1/q} = <u, E u> <= 0
        for _ in range(10):
            u = RNG.standard_normal(g.n_nodes)
            assert u @ (E @ u) <= 1e-10

    def test_rejects_non_spd(self):
        g = gr.TorusGrid(4, 4)
        mats = np.tile(np.eye(2), (g.n_nodes, 1, 1))
        mats[5] = [[1.0, 2.0], [2.0, 1.0]]  # indefinite
        with pytest.raises(AssemblyError) as exc:
            gr.MetricField(g, mats, "h")
        assert exc.value.node == 5


def analytic_variable_metric_case(n):
    """Manufactured full-tensor metric with analytic Laplace-Beltrami values.

    Physical coordinates (u, v) in [0, 2pi)^2; the chart metric h = s^2 * H(u, v)
    encodes the grid spacing s = 2pi/n.  Returns (field, samples, analytic).
    """
    g = gr.TorusGrid(n, n)
    s = 2 * np.pi / n
    i, j = np.divmod(np.arange(g.n_nodes), g.W)
    u = 2 * np.pi * i / n
    v = 2 * np.pi * j / n

    # inverse metric entries (physical) and their first derivatives
    p = 1.5 + 0.5 * np.cos(u)
    r = 1.2 + 0.3 * np.sin(v)
    b = 0.2 * np.sin(u) * np.sin(v)
    p_u = -0.5 * np.sin(u)
    r_v = 0.3 * np.cos(v)
    b_u = 0.2 * np.cos(u) * np.sin(v)
    b_v = 0.2 * np.sin(u) * np.cos(v)

    det = p * r - b * b
    det_u = p_u * r - 2 * b * b_u
    det_v = p * r_v - 2 * b * b_v
    w = det**-0.5                     # sqrt|h| of the physical metric
    w_u = -0.5 * det**-1.5 * det_u
    w_v = -0.5 * det**-1.5 * det_v

    # test function F = sin(u) cos(v) (x-direction is v? no: u rows, v cols)
    F = np.sin(u) * np.cos(v)
    F_u = np.cos(u) * np.cos(v)
    F_v = -np.sin(u) * np.sin(v)
    F_uu = -F
    F_vv = -F
    F_uv = -np.cos(u) * np.sin(v)

    # E F = d_u(w (p F_u + b F_v)) + d_v(w (b F_u + r F_v)); Delta = E F / w
    t1 = (w_u * (p * F_u + b * F_v)
          + w * (p_u * F_u + p * F_uu + b_u * F_v + b * F_uv))
    t2 = (w_v * (b * F_u + r * F_v)
          + w * (b_v * F_u + b * F_uv + r_v * F_v + r * F_vv))
    analytic = (t1 + t2) / w

    # chart-coordinate inverse metric: axis order is (y, x) = (rows i, cols j);
    # the stencil x-direction differentiates along columns (v), so the chart
    # tensor pairs x with v and y with u.
    a_chart = r / s**2      # x-x entry
    b_chart = b / s**2
    c_chart = p / s**2      # y-y entry
    field = gr.MetricField.from_entries(g, a_chart, b_chart, c_chart, "hinv")
    return g, field, F, analytic


class TestRefinementConvergence:
    def test_flat_metric_rate(self):
        errs = []
        for n in (16, 32, 64):
            g = gr.TorusGrid(n, n)
            s = 2 * np.pi / n
            h = gr.identity_metric(g, s**2)
            L, q, E = gr.assemble_laplace_beltrami(h)
            i, j = np.divmod(np.arange(g.n_nodes), g.W)
            u = 2 * np.pi * i / n
            v = 2 * np.pi * j / n
            F = np.sin(u) * np.cos(v)
            errs.append(np.max(np.abs(L @ F - (-2.0) * F)))
        rates = [np.log2(errs[k] / errs[k + 1]) for k in range(2)]
        assert min(rates) >= 1.8

    def test_variable_full_tensor_rate(self):
        errs = []
        for n in (16, 32, 64):
            g, field, F, analytic = analytic_variable_metric_case(n)
            L, q, E = gr.assemble_laplace_beltrami(field)
            errs.append(np.max(np.abs(L @ F - analytic)))
        rates = [np.log2(errs[k] / errs[k + 1]) for k in range(2)]
        assert min(rates) >= 1.8


class TestPairing:
    def test_constant_field(self):
        g = gr.TorusGrid(6, 6)
        h = random_spd_field(g, RNG, "hinv")
        out = gr.pairing(h, np.ones((g.n_nodes, 3)))
        assert np.max(np.abs(out)) == 0.0

    def test_ramp_against_identity(self):
        g = gr.TorusGrid(8, 10)
        h = gr.identity_metric(g).as_interpretation("hinv")
        i, j = np.divmod(np.arange(g.n_nodes), g.W)
        F = j.astype(float)
        out = gr.pairing(h, F)
        interior = (j >= 1) & (j <= g.W - 2)
        np.testing.assert_allclose(out[interior], 1.0, atol=1e-12)

    def test_nonnegative(self):
        g = gr.TorusGrid(7, 7)
        h = random_spd_field(g, RNG, "hinv")
        F = RNG.standard_normal((g.n_nodes, 4))
        out = gr.pairing(h, F)
        assert out.min() >= -1e-14

    def test_shape_mismatch(self):
        g = gr.TorusGrid(5, 5)
        h = random_spd_field(g, RNG, "hinv")
        with pytest.raises(GeometryDomainError):
            gr.pairing(h, np.ones((7, 2)))


class TestMetricFromParams:
    def test_zero_params(self):
        g = gr.TorusGrid(3, 3)
        field = gr.metric_from_params(g, np.zeros((g.n_nodes, 3)))
        lam = v = 0.51
        expected = np.diag([lam / v, 1.0 / (lam * v)])
        np.testing.assert_allclose(field.mats[0], expected, atol=1e-14)

    def test_zero_angle_is_diagonal(self):
        g = gr.TorusGrid(3, 3)
        params = RNG.standard_normal((g.n_nodes, 3))
        params[:, 1] = 0.0
        field = gr.metric_from_params(g, params)
        assert np.max(np.abs(field.mats[:, 0, 1])) == 0.0

    def test_eigenvalues_closed_form(self):
        g = gr.TorusGrid(4, 4)
        params = 3.0 * RNG.standard_normal((g.n_nodes, 3))
        field = gr.metric_from_params(g, params)
        x, y, z = params[:, 0], params[:, 1], params[:, 2]
        lam = 1 / (1 + np.exp(-x)) + 0.01
        v = 1 / (1 + np.exp(-z)) + 0.01
        lo_expected = np.minimum(lam / v, 1 / (lam * v))
        hi_expected = np.maximum(lam / v, 1 / (lam * v))
        lo, hi = field.eigenvalues()
        assert np.max(np.abs(lo - lo_expected)) < 1e-12
        assert np.max(np.abs(hi - hi_expected)) < 1e-12

    def test_uniform_lower_bound(self):
        g = gr.TorusGrid(6, 6)
        params = 50.0 * RNG.standard_normal((g.n_nodes, 3))
        field = gr.metric_from_params(g, params)
        assert field.min_eig > 0.0098


class TestStructureTensor:
    def test_constant_input_isotropic(self):
        g = gr.TorusGrid(8, 8)
        field = gr.structure_tensor_metric(g, np.ones(g.n_nodes), 1.0, 1.0, "exp")
        expected = np.exp(-0.0) * np.eye(2)
        np.testing.assert_allclose(field.mats, np.tile(expected, (g.n_nodes, 1, 1)),
                                   atol=1e-12)

    def test_vertical_edge_dominant_direction(self):
        g = gr.TorusGrid(16, 16)
        i, j = np.divmod(np.arange(g.n_nodes), g.W)
        u = (j >= 8).astype(float)  # vertical step edge
        J = gr.structure_tensor(g, u, rho=1.0, sigma=1.0)
        at_edge = np.flatnonzero(j == 8)
        w, V = np.linalg.eigh(J[at_edge])
        dominant = V[:, :, 1]  # eigenvector of the larger eigenvalue
        assert np.all(np.abs(dominant[:, 0]) > 0.99)

    def test_output_spd(self):
        g = gr.TorusGrid(10, 10)
        u = RNG.standard_normal((g.n_nodes, 3))
        field = gr.structure_tensor_metric(g, u, 2.0, 0.5, "rational")
        lo, _ = field.eigenvalues()
        assert lo.min() > 0.0
        assert np.max(np.abs(field.mats[:, 0, 1] - field.mats[:, 1, 0])) < 1e-14


class TestMetricDiagnostics:
    def test_isotropic_zero(self):
        g = gr.TorusGrid(4, 4)
        anis, scale = gr.metric_diagnostics(gr.identity_metric(g, 3.0))
        assert np.max(np.abs(anis)) < 1e-12
        np.testing.assert_allclose(scale, 1 / 3.0)

    def test_reciprocal_pair_eigenvalues(self):
        g = gr.TorusGrid(3, 3)
        lam = 2.5
        mats = np.tile(np.diag([lam, 1 / lam]), (g.n_nodes, 1, 1))
        field = gr.MetricField(g, mats, "hinv")
        anis, scale = gr.metric_diagnostics(field)
        np.testing.assert_allclose(anis, np.sqrt(2.0) * np.log(lam), rtol=1e-12)

    def test_scale_of_scaled_identity(self):
        g = gr.TorusGrid(3, 4)
        anis, scale = gr.metric_diagnostics(gr.identity_metric(g, 7.0))
        np.testing.assert_allclose(scale, 1 / 7.0)


class TestStencilPattern:
    def test_operators_confined_to_3x3_neighborhoods(self):
        g = gr.TorusGrid(7, 9)
        allowed = set()
        for a in range(g.n_nodes):
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    allowed.add((a, int(g.neighbor_columns(di, dj)[a])))
        D1, D2 = gr.derivative_operators(g)
        h = random_spd_field(g, RNG)
        L, q, E = gr.assemble_laplace_beltrami(h)
        for M in (D1, D2, E, L):
            coo = M.tocoo()
            for r, c in zip(coo.row, coo.col):
                assert (int(r), int(c)) in allowed

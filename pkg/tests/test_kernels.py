import numpy as np
import pytest
import scipy.integrate

from periflow import kernels as kr
from periflow.errors import SingularityError
from periflow.geometry import ClosedCurve, build_wall_geometry
from periflow.kernels import KernelContext

UNIT = KernelContext(mu=1.0)


def fd_stress(u_fn, p_fn, x, n_x, mu, h=1e-5):
    """sigma(u, p) n by central differences; the traction oracle."""
    grad = np.zeros((2, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        grad[i] = (u_fn(x + e) - u_fn(x - e)) / (2 * h)
    return (-p_fn(x) * np.eye(2) + mu * (grad + grad.T)) @ n_x


class TestPointwiseKernels:
    def test_stokeslet_at_unit_distance(self):
        s = kr.stokeslet((1.0, 0.0), (0.0, 0.0), UNIT)
        want = np.array([[1.0, 0.0], [0.0, 0.0]]) / (4 * np.pi)
        assert np.max(np.abs(s - want)) <= 1e-15

    def test_stokeslet_symmetry_in_arguments(self, rng):
        for _ in range(10):
            x, y = rng.normal(size=2), rng.normal(size=2) + 3.0
            assert np.allclose(kr.stokeslet(x, y, UNIT),
                               kr.stokeslet(y, x, UNIT), atol=1e-14)

    def test_stokeslet_viscosity_scaling(self):
        s1 = kr.stokeslet((0.3, 0.9), (0.0, 0.1), KernelContext(mu=1.0))
        s2 = kr.stokeslet((0.3, 0.9), (0.0, 0.1), KernelContext(mu=2.0))
        assert np.allclose(s2, 0.5 * s1, atol=1e-15)

    def test_double_layer_orthogonal_normal_vanishes(self):
        d = kr.double_layer((1.0, 0.0), (0.0, 0.0), (0.0, 1.0))
        assert np.max(np.abs(d)) == 0.0

    def test_double_layer_aligned_unit_case(self):
        d = kr.double_layer((1.0, 0.0), (0.0, 0.0), (1.0, 0.0))
        want = np.array([[1.0, 0.0], [0.0, 0.0]]) / np.pi
        assert np.max(np.abs(d - want)) <= 1e-15

    def test_double_pressure_hand_value(self):
        p = kr.double_pressure((1.0, 0.0), (0.0, 0.0), (1.0, 0.0), UNIT)
        assert np.allclose(p, np.array([1.0, 0.0]) / np.pi, atol=1e-15)

    def test_coincident_points_rejected(self):
        with pytest.raises(SingularityError):
            kr.stokeslet((1.0, 1.0), (1.0, 1.0), UNIT)


class TestTractionKernels:
    def test_single_traction_orthogonal_target_normal(self):
        k, _ = kr.traction_kernels((1.0, 0.0), (0.0, 0.0), (0.0, 1.0),
                                   (0.6, 0.8), UNIT)
        assert np.max(np.abs(k)) == 0.0

    def test_traction_kernels_match_stress_oracle(self, rng):
        ctx = KernelContext(mu=1.3)
        worst_k = worst_t = 0.0
        for _ in range(100):
            y = rng.normal(size=2)
            x = y + rng.normal(size=2) + np.array([2.5, 0.0])
            n_x = rng.normal(size=2)
            n_x /= np.linalg.norm(n_x)
            n_y = rng.normal(size=2)
            n_y /= np.linalg.norm(n_y)
            k, t = kr.traction_kernels(x, y, n_x, n_y, ctx)
            for comp in range(2):
                kfd = fd_stress(lambda z: kr.stokeslet(z, y, ctx)[:, comp],
                                lambda z: kr.single_pressure(z, y)[comp],
                                x, n_x, ctx.mu)
                tfd = fd_stress(lambda z: kr.double_layer(z, y, n_y)[:, comp],
                                lambda z: kr.double_pressure(z, y, n_y, ctx)[comp],
                                x, n_x, ctx.mu)
                worst_k = max(worst_k, np.max(np.abs(k[:, comp] - kfd)))
                worst_t = max(worst_t, np.max(np.abs(t[:, comp] - tfd)))
        assert worst_k <= 1e-6
        assert worst_t <= 1e-6


class TestStokesIdentities:
    def test_momentum_residual_all_pairs(self, rng):
        ctx = KernelContext(mu=0.8)
        h = 1e-4

        def mom(u_fn, p_fn, x):
            lap = np.zeros(2)
            gradp = np.zeros(2)
            for i in range(2):
                e = np.zeros(2)
                e[i] = h
                lap += (u_fn(x + e) - 2 * u_fn(x) + u_fn(x - e)) / h**2
                gradp[i] = (p_fn(x + e) - p_fn(x - e)) / (2 * h)
            return -ctx.mu * lap + gradp

        for _ in range(20):
            y = rng.normal(size=2)
            n_y = rng.normal(size=2)
            n_y /= np.linalg.norm(n_y)
            x = y + rng.normal(size=2) + np.array([3.0, 0.0])
            for comp in range(2):
                r_s = mom(lambda z: kr.stokeslet(z, y, ctx)[:, comp],
                          lambda z: kr.single_pressure(z, y)[comp], x)
                r_d = mom(lambda z: kr.double_layer(z, y, n_y)[:, comp],
                          lambda z: kr.double_pressure(z, y, n_y, ctx)[comp], x)
                assert np.max(np.abs(r_s)) <= 1e-5
                assert np.max(np.abs(r_d)) <= 1e-5

    def test_stokeslet_divergence_free(self, rng):
        ctx = KernelContext(mu=1.0)
        h = 1e-5
        for _ in range(20):
            y = rng.normal(size=2)
            x = y + rng.normal(size=2) + np.array([2.0, 0.5])
            for comp in range(2):
                u = lambda z: kr.stokeslet(z, y, ctx)[:, comp]
                div = ((u(x + [h, 0])[0] - u(x - [h, 0])[0])
                       + (u(x + [0, h])[1] - u(x - [0, h])[1])) / (2 * h)
                assert abs(div) <= 1e-6

    def test_double_layer_reproduces_constants_inside(self):
        curve = ClosedCurve.ellipse(1.5, 0.9, 256)
        targets = np.array([[0.0, 0.3, -0.4], [0.0, 0.1, -0.2]])
        op = kr.assemble_offcurve("double", "velocity", curve, targets, UNIT)
        u0 = np.array([0.7, -0.3])
        dens = np.concatenate([np.full(256, u0[0]), np.full(256, u0[1])])
        vals = (op.mat @ dens).reshape(2, -1)
        assert np.max(np.abs(vals - (-u0)[:, None])) <= 1e-10


class TestNystromDoubleLayer:
    def test_flat_wall_diagonal_vanishes(self, flat_small):
        walls, _, _ = flat_small
        op = kr.nystrom_double_layer_self(walls.upper)
        n = walls.upper.n
        assert np.max(np.abs(np.diag(op.mat))) <= 1e-14
        assert np.max(np.abs(np.diag(op.mat[n:, :n]))) <= 1e-14
        assert op.quadrature_kind == "nystrom"

    def test_unit_circle_diagonal_limit(self):
        curve = ClosedCurve.circle(1.0, 64)
        met = curve.metrics()
        op = kr.nystrom_double_layer_self(curve).mat
        for j in (0, 13, 40):
            t = met.tangent[:, j]
            w = met.weights[j]
            block = np.array([[op[j, j], op[j, 64 + j]],
                              [op[64 + j, j], op[64 + j, 64 + j]]])
            want = -(1.0 / (2 * np.pi)) * np.outer(t, t) * w
            assert np.max(np.abs(block - want)) <= 1e-14

    def test_interior_dirichlet_bvp_against_exact_field(self):
        # data from an exterior stokeslet; the second-kind solve plus
        # off-curve evaluation must reproduce it inside
        curve = ClosedCurve.ellipse(1.5, 0.9, 128)
        ctx = KernelContext(mu=1.4)
        y0 = np.array([3.0, 1.0])
        force = np.array([1.0, -2.0])
        exact = lambda pts: np.stack(
            [kr.stokeslet(pts[:, j], y0, ctx) @ force
             for j in range(pts.shape[1])], axis=1)
        bc = exact(curve.nodes)
        a_mat = -0.5 * np.eye(2 * curve.m) + kr.nystrom_double_layer_self(curve).mat
        tau = np.linalg.solve(a_mat, np.concatenate([bc[0], bc[1]]))
        targets = np.array([[0.0, 0.5, -0.6], [0.0, 0.2, -0.3]])
        op = kr.assemble_offcurve("double", "velocity", curve, targets, ctx)
        got = (op.mat @ tau).reshape(2, -1)
        assert np.max(np.abs(got - exact(targets))) <= 1e-10

    def test_interior_consistency_of_normal_density(self):
        # velocity of the normal-field density evaluated inside, coarse
        # discretization against a refined oracle
        targets = np.array([[0.1, -0.3], [0.2, 0.1]])
        vals = {}
        for m in (64, 1024):
            curve = ClosedCurve.ellipse(1.3, 0.8, m)
            nrm = curve.metrics().normal
            op = kr.assemble_offcurve("double", "velocity", curve, targets, UNIT)
            vals[m] = op.mat @ np.concatenate([nrm[0], nrm[1]])
        assert np.max(np.abs(vals[64] - vals[1024])) <= 1e-10


def slp_quad_oracle(curve_fn, speed_fn, density_fn, target, alpha_t, mu):
    """Adaptive quadrature of the single layer, split at the singularity."""
    def integrand(b, comp):
        yb = curve_fn(b)
        s_mat = kr.stokeslet_block(target.reshape(2, 1), yb.reshape(2, 1),
                                   mu, guard=False).reshape(2, 2)
        return (s_mat @ density_fn(b))[comp] * speed_fn(b)

    out = np.zeros(2)
    for comp in range(2):
        lo, _ = scipy.integrate.quad(integrand, alpha_t - np.pi, alpha_t,
                                     args=(comp,), limit=400,
                                     epsabs=1e-13, epsrel=1e-13)
        hi, _ = scipy.integrate.quad(integrand, alpha_t, alpha_t + np.pi,
                                     args=(comp,), limit=400,
                                     epsabs=1e-13, epsrel=1e-13)
        out[comp] = lo + hi
    return out


class TestKressSingleLayer:
    def test_unit_circle_constant_density_vs_quadrature(self):
        ctx = KernelContext(mu=1.0)
        m = 32
        curve = ClosedCurve.circle(1.0, m)
        mat = kr.kress_single_layer_self(curve, ctx).mat
        dens = np.concatenate([np.ones(m), np.zeros(m)])
        vals = mat @ dens
        circle = lambda b: np.array([np.cos(b), np.sin(b)])
        for j in (0, 5, 13):
            oracle = slp_quad_oracle(circle, lambda b: 1.0,
                                     lambda b: np.array([1.0, 0.0]),
                                     curve.nodes[:, j], curve.params[j], ctx.mu)
            assert abs(vals[j] - oracle[0]) <= 1e-10
            assert abs(vals[m + j] - oracle[1]) <= 1e-10

    def test_circle_matrix_symmetric(self):
        mat = kr.kress_single_layer_self(ClosedCurve.circle(1.0, 32), UNIT).mat
        assert np.max(np.abs(mat - mat.T)) <= 1e-12

    def test_spectral_convergence_on_ellipse(self):
        ctx = KernelContext(mu=1.3)
        ell = lambda b: np.array([2.0 * np.cos(b), np.sin(b)])
        speed = lambda b: np.hypot(2.0 * np.sin(b), np.cos(b))
        dens = lambda b: np.array([np.cos(2 * b) + 0.3, np.sin(b)])
        errs = {}
        for m in (32, 64):
            curve = ClosedCurve.ellipse(2.0, 1.0, m)
            mat = kr.kress_single_layer_self(curve, ctx).mat
            a = curve.params
            d = dens(a)
            vals = mat @ np.concatenate([d[0], d[1]])
            j = 3 * m // 32
            oracle = slp_quad_oracle(ell, speed, dens,
                                     curve.nodes[:, j], a[j], ctx.mu)
            errs[m] = max(abs(vals[j] - oracle[0]), abs(vals[m + j] - oracle[1]))
        assert errs[64] <= max(errs[32] / 1e3, 2e-12)


class TestAssembleOffcurve:
    def test_zero_shift_equals_plain_assembly(self, rng):
        curve = ClosedCurve.circle(1.0, 32)
        targets = rng.normal(size=(2, 5)) + np.array([[4.0], [0.0]])
        a = kr.assemble_offcurve("single", "velocity", curve, targets, UNIT,
                                 shifts=(0.0,))
        met = curve.metrics()
        w2 = np.tile(met.weights, 2)[None, :]
        direct = kr.stokeslet_block(targets, curve.nodes, 1.0) * w2
        assert np.array_equal(a.mat, direct)

    def test_single_distant_source_is_kernel_times_weight(self):
        curve = ClosedCurve.circle(0.5, 16)
        target = np.array([[6.0], [0.0]])
        op = kr.assemble_offcurve("single", "velocity", curve, target, UNIT)
        w = curve.metrics().weights
        s = kr.stokeslet(target[:, 0], curve.nodes[:, 3], UNIT)
        block = np.array([[op.mat[0, 3], op.mat[0, 16 + 3]],
                          [op.mat[1, 3], op.mat[1, 16 + 3]]])
        assert np.allclose(block, s * w[3], atol=1e-15)

    def test_three_image_sum(self):
        curve = ClosedCurve.circle(0.4, 16, center=(3.0, 0.0))
        targets = np.array([[3.0, 2.0], [2.0, -2.0]])
        d = 2 * np.pi
        total = kr.assemble_offcurve("double", "velocity", curve, targets,
                                     UNIT, shifts=(-d, 0.0, d)).mat
        parts = sum(kr.assemble_offcurve("double", "velocity", curve, targets,
                                         UNIT, shifts=(s,)).mat
                    for s in (-d, 0.0, d))
        assert np.max(np.abs(total - parts)) <= 1e-15

    def test_target_on_source_rejected(self):
        curve = ClosedCurve.circle(1.0, 16)
        with pytest.raises(SingularityError):
            kr.assemble_offcurve("single", "velocity", curve,
                                 curve.nodes[:, :1], UNIT)

    def test_traction_needs_target_normals(self):
        curve = ClosedCurve.circle(1.0, 16)
        with pytest.raises(ValueError):
            kr.assemble_offcurve("single", "traction", curve,
                                 np.array([[5.0], [0.0]]), UNIT)

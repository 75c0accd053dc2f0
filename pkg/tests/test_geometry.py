import numpy as np
import pytest
import scipy.integrate

from periflow.errors import GeometryError
from periflow.geometry import (ClosedCurve, build_wall_geometry,
                               equal_arclength_params, fourier_interpolate,
                               gauss_legendre, reparameterize,
                               spectral_derivative)

D = 2.0 * np.pi

# Adaptive-quadrature value of the 2:1 ellipse perimeter (independent oracle,
# cross-checked against 8*E(3/4) below).
ELLIPSE_PERIMETER = 9.688448220547675


def grid(m):
    return 2.0 * np.pi * np.arange(m) / m


class TestSpectralDerivative:
    def test_sin_first_derivative(self):
        a = grid(32)
        out = spectral_derivative(np.sin(a), 1)
        assert np.max(np.abs(out - np.cos(a))) <= 1e-12

    def test_constant_any_order(self):
        for order in (1, 2, 3, 5):
            out = spectral_derivative(np.full(16, 3.7), order)
            assert np.max(np.abs(out)) <= 1e-12

    def test_sin_fourth_derivative(self):
        a = grid(32)
        out = spectral_derivative(np.sin(a), 4)
        assert np.max(np.abs(out - np.sin(a))) <= 1e-11

    def test_rejects_odd_or_tiny_m(self):
        with pytest.raises(ValueError):
            spectral_derivative(np.zeros(15), 1)
        with pytest.raises(ValueError):
            spectral_derivative(np.zeros(1), 1)
        with pytest.raises(ValueError):
            spectral_derivative(np.zeros(16), 0)

    def test_composition_matches_second_order(self):
        a = grid(64)
        f = np.exp(np.sin(a))
        twice = spectral_derivative(spectral_derivative(f, 1), 1)
        direct = spectral_derivative(f, 2)
        assert np.max(np.abs(twice - direct)) <= 1e-10

    def test_trapezoid_exact_for_trig_polynomials(self, rng):
        m = 32
        a = grid(m)
        coeffs = rng.normal(size=10)
        f = np.full(m, coeffs[0])
        for k in range(1, 10):
            f += coeffs[k] * np.cos(k * a + 0.3 * k)
        integral = np.sum(f) * (2.0 * np.pi / m)
        assert abs(integral - 2.0 * np.pi * coeffs[0]) <= 1e-13 * max(
            1.0, abs(coeffs[0]))


class TestCurveMetrics:
    def test_circle_curvature_and_perimeter(self):
        met = ClosedCurve.circle(2.0, 64).metrics()
        assert np.max(np.abs(met.curvature - 0.5)) <= 1e-12
        assert abs(met.perimeter - 4.0 * np.pi) <= 1e-12

    def test_unit_circle_outward_normal_is_position(self):
        c = ClosedCurve.circle(1.0, 64)
        assert np.max(np.abs(c.metrics().normal - c.nodes)) <= 1e-13

    def test_ellipse_perimeter_against_quadrature_oracle(self):
        met = ClosedCurve.ellipse(2.0, 1.0, 128).metrics()
        speed = lambda b: np.hypot(2.0 * np.sin(b), np.cos(b))
        oracle, err = scipy.integrate.quad(speed, 0.0, 2.0 * np.pi, limit=200,
                                           epsabs=1e-13, epsrel=1e-13)
        assert err < 1e-10
        assert abs(oracle - ELLIPSE_PERIMETER) <= 1e-12
        assert abs(met.perimeter - oracle) <= 1e-10

    def test_degenerate_curve_rejected(self):
        nodes = np.zeros((2, 16))
        with pytest.raises(GeometryError):
            ClosedCurve(nodes).metrics()

    def test_x_ss_equals_minus_kappa_n(self):
        c = ClosedCurve.ellipse(1.5, 0.8, 128)
        met = c.metrics()
        x_s = spectral_derivative(c.nodes) / met.speed
        x_ss = spectral_derivative(x_s) / met.speed
        assert np.max(np.abs(x_ss + met.curvature * met.normal)) <= 1e-10


class TestWallGeometry:
    def test_flat_channel_nodes_and_weights(self):
        walls = build_wall_geometry("flat", 500, 8, d=D, h=1.0)
        assert np.allclose(walls.upper.nodes[1], 1.0, atol=0)
        assert np.allclose(walls.lower.nodes[1], -1.0, atol=0)
        assert np.max(np.abs(walls.upper.weights - D / 500)) <= 1e-14
        assert np.max(np.abs(walls.upper.curvature)) <= 1e-12

    def test_sine_curvature_matches_analytic(self):
        a_amp, k_wave = 0.3, 1
        walls = build_wall_geometry("sine", 128, 8, d=D, a=a_amp, k=k_wave, h=1.0)
        x1 = walls.upper.nodes[0]
        f1 = a_amp * k_wave * np.cos(k_wave * x1)
        f2 = -a_amp * k_wave**2 * np.sin(k_wave * x1)
        kappa_std = f2 / (1.0 + f1**2) ** 1.5
        # upper wall flips the curvature sign with its outward-up normal
        assert np.max(np.abs(walls.upper.curvature + kappa_std)) <= 1e-10
        assert np.max(np.abs(walls.lower.curvature - kappa_std)) <= 1e-10

    def test_wall_frame_consistency(self):
        walls = build_wall_geometry("serpentine", 256, 8, d=D,
                                    h=0.6, a1=1.0, a2=0.4)
        for wall in (walls.upper, walls.lower):
            assert np.max(np.abs(np.hypot(*wall.normal) - 1.0)) <= 1e-14
            # x_ss = -kappa * n with the stored signed curvature
            a = grid(wall.n)
            drift = walls.period / (2.0 * np.pi)
            periodic = wall.nodes - np.vstack([drift * a, np.zeros(wall.n)])
            xp = spectral_derivative(periodic)
            xp[0] += drift
            x_s = xp / wall.speed
            x_ss = spectral_derivative(x_s) / wall.speed
            assert np.max(np.abs(x_ss + wall.curvature * wall.normal)) <= 1e-9

    def test_right_side_is_left_shifted_exactly(self):
        walls = build_wall_geometry("sine", 64, 12, d=D, h=1.0, a=0.3, k=1)
        shift = walls.side_right - walls.side_left
        assert np.all(shift[0] == D)
        assert np.all(shift[1] == 0.0)

    def test_intersecting_walls_rejected(self):
        with pytest.raises(GeometryError):
            build_wall_geometry("pinch", 64, 8, d=D, h=0.5, a=0.6, s=3.0)

    def test_normals_point_out_of_the_fluid(self):
        walls = build_wall_geometry("sine", 64, 8, d=D, h=1.0, a=0.3, k=1)
        assert np.all(walls.upper.normal[1] > 0)
        assert np.all(walls.lower.normal[1] < 0)

    def test_gauss_legendre_degree_exactness(self, rng):
        k = 12
        x, w = gauss_legendre(k, -1.3, 0.7)
        coeffs = rng.normal(size=2 * k)  # degree 2k-1
        vals = np.polynomial.polynomial.polyval(x, coeffs)
        exact = np.diff(np.polynomial.polynomial.polyint(coeffs)
                        @ np.vander([-1.3, 0.7], 2 * k + 1, increasing=True).T)
        assert abs(np.dot(w, vals) - exact[0]) <= 1e-13 * max(1.0, abs(exact[0]))


class TestReparameterize:
    def test_circle_is_fixed_point(self):
        c = ClosedCurve.circle(1.0, 64)
        out = reparameterize(c)
        assert np.max(np.abs(out.nodes - c.nodes)) <= 1e-13
        astar = equal_arclength_params(c)
        assert np.max(np.abs(astar - c.params)) <= 1e-13

    def test_ellipse_gap_uniformity_against_dense_oracle(self):
        m = 64
        ell = ClosedCurve.ellipse(2.0, 1.0, m)
        astar = equal_arclength_params(ell)
        # brute-force arclength table at 64*M samples
        mm = 64 * m
        aa = 2.0 * np.pi * np.arange(mm) / mm
        dense = ClosedCurve(fourier_interpolate(ell.nodes, aa))
        sp = dense.metrics().speed
        s_cum = np.concatenate([[0.0], np.cumsum(sp) * 2.0 * np.pi / mm])
        total = s_cum[-1]
        s_at = np.interp(astar, np.concatenate([aa, [2.0 * np.pi]]), s_cum)
        gaps = np.diff(np.concatenate([s_at, [s_at[0] + total]]))
        assert np.max(np.abs(gaps - total / m)) <= 6.0 / m**2

    def test_perimeter_preserved_to_interpolation_accuracy(self):
        ell = ClosedCurve.ellipse(2.0, 1.0, 64)
        out = reparameterize(ell)
        rel = abs(out.metrics().perimeter - ell.metrics().perimeter)
        rel /= ell.metrics().perimeter
        assert rel <= 5e-9

    def test_idempotent_within_interpolation_error(self):
        ell = ClosedCurve.ellipse(2.0, 1.0, 64)
        once = reparameterize(ell)
        twice = reparameterize(once)
        first = np.max(np.hypot(*(once.nodes - ell.nodes)))
        second = np.max(np.hypot(*(twice.nodes - once.nodes)))
        assert second <= 0.05 * first

    def test_parameters_monotone_in_range(self):
        # a strongly uneven parameterization still inverts monotonically
        b = grid(32)
        s = b - 0.9 * np.sin(b)
        nodes = np.vstack([np.cos(s), np.sin(s)])
        astar = equal_arclength_params(ClosedCurve(nodes))
        assert astar[0] == 0.0
        assert np.all(np.diff(astar) > 0)
        assert astar[-1] < 2.0 * np.pi


class TestFourierInterpolate:
    def test_band_limited_exact(self):
        a = grid(16)
        out = fourier_interpolate(np.cos(3 * a), np.array([0.4]))
        assert abs(out[0] - np.cos(1.2)) <= 1e-13

    def test_identity_at_nodes(self, rng):
        vals = rng.normal(size=16)
        out = fourier_interpolate(vals, grid(16))
        assert np.max(np.abs(out - vals)) <= 1e-13

    def test_matches_direct_dft_sum(self, rng):
        m = 16
        vals = rng.normal(size=m)
        targets = rng.uniform(0.0, 2.0 * np.pi, size=1000)
        out = fourier_interpolate(vals, targets)
        # naive O(MT) trigonometric sum with the cos-Nyquist convention
        c = np.fft.fft(vals) / m
        oracle = np.real(c[0]) * np.ones_like(targets)
        for k in range(1, m // 2):
            oracle += 2.0 * np.real(c[k] * np.exp(1j * k * targets))
        oracle += np.real(c[m // 2]) * np.cos(m / 2 * targets)
        assert np.max(np.abs(out - oracle)) <= 1e-12

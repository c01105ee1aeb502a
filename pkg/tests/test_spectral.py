"""Real Fourier basis, frames, evaluation and the Euler nonlinearity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import field_from_function
from lagchaos.spectral import (
    ModeSetOverflowError,
    SpectralField,
    apply_dissipation,
    basis_eval,
    euler_nonlinearity,
    eval_gradient,
    eval_velocity,
    gamma_frame,
    grid_points,
    is_positive,
    mode_ball,
    norm_const,
    to_physical,
)

wavevectors2 = st.tuples(st.integers(-4, 4), st.integers(-4, 4)).filter(any)
wavevectors3 = st.tuples(st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3)).filter(any)


def random_field(rng, d, n_max=2, scale=1.0):
    modes = mode_ball(d, n_max)
    return SpectralField(d, modes, scale * rng.standard_normal((len(modes), d - 1)))


def direct_sum(u, x):
    """Term-by-term oracle: sum_k sum_i c_k^i e_k(x) gamma_k^i with sin/cos written out."""
    out = np.zeros(u.d)
    for k, c in zip(u.modes, u.coeffs):
        kx = float(np.dot(k, x))
        pos = k[-1] > 0 or (k[-1] == 0 and (k[0] > 0 or (k[0] == 0 and k[1] > 0)))
        e = np.sin(kx) if pos else np.cos(kx)
        out += e * (gamma_frame(k) @ c)
    return out


class TestBasis:
    def test_sine_on_positive_half(self):
        assert basis_eval((1, 0), (np.pi / 2, 0.0)) == pytest.approx(1.0)

    def test_cosine_on_negative_half(self):
        assert basis_eval((-1, 0), (0.0, 0.0)) == 1.0

    def test_zero_wavevector_rejected(self):
        with pytest.raises(ValueError):
            basis_eval((0, 0), (0.0, 0.0))

    @given(wavevectors3)
    def test_exactly_one_half_space(self, k):
        assert is_positive(k) != is_positive(tuple(-c for c in k))

    @given(wavevectors2, st.floats(0, 2 * np.pi), st.floats(0, 2 * np.pi))
    def test_pythagorean_identity(self, k, x1, x2):
        x = (x1, x2)
        minus = tuple(-c for c in k)
        assert basis_eval(k, x) ** 2 + basis_eval(minus, x) ** 2 == pytest.approx(1.0, abs=1e-14)

    def test_norm_constant_by_quadrature(self):
        y = grid_points(3, 8)
        vals = basis_eval((1, -2, 1), y) ** 2
        assert vals.mean() * (2 * np.pi) ** 3 == pytest.approx(norm_const(3), rel=1e-14)


class TestGammaFrame:
    def test_2d_unit_mode(self):
        np.testing.assert_allclose(gamma_frame((1, 0))[:, 0], [0.0, 1.0], atol=1e-15)

    def test_2d_antisymmetry_example(self):
        np.testing.assert_allclose(gamma_frame((-1, 0))[:, 0], [0.0, -1.0], atol=1e-15)

    def test_3d_vertical_mode(self):
        g = gamma_frame((0, 0, 1))
        assert np.max(np.abs(g.T @ g - np.eye(2))) < 1e-14
        np.testing.assert_allclose(g[2], 0.0, atol=1e-15)

    @given(wavevectors3)
    def test_orthonormal_and_transverse(self, k):
        g = gamma_frame(k)
        np.testing.assert_allclose(g.T @ g, np.eye(2), atol=1e-14)
        np.testing.assert_allclose(np.asarray(k, float) @ g, 0.0, atol=1e-13)
        np.testing.assert_allclose(gamma_frame(tuple(-c for c in k)), -g, atol=0)


class TestSpectralField:
    def test_rejects_unclosed_mode_set(self):
        with pytest.raises(ValueError, match="negation"):
            SpectralField(2, [[1, 0]], [[1.0]])

    def test_rejects_zero_mode(self):
        with pytest.raises(ValueError):
            SpectralField(2, [[0, 0]], [[1.0]])

    def test_coefficient_round_trip(self, rng):
        u = random_field(rng, 3, 2)
        n = 8
        vals = to_physical(u, n)
        y = grid_points(3, n)
        for k, c in zip(u.modes[::7], u.coeffs[::7]):
            e = basis_eval(k, y)
            for i in range(2):
                gam = gamma_frame(k)[:, i]
                inner = np.mean(np.einsum("j...,j->...", vals, gam) * e) * (2 * np.pi) ** 3
                assert inner / norm_const(3) == pytest.approx(c[i], abs=1e-13)

    def test_divergence_free_by_construction(self, rng):
        u = random_field(rng, 3, 2)
        x = rng.uniform(0, 2 * np.pi, (20, 3))
        assert np.max(np.abs(np.trace(eval_gradient(u, x), axis1=1, axis2=2))) < 1e-12

    def test_json_round_trip(self, rng):
        u = random_field(rng, 2, 2)
        v = SpectralField.from_json(u.to_json())
        np.testing.assert_array_equal(u.coeffs, v.coeffs)
        np.testing.assert_array_equal(u.modes, v.modes)


class TestEvaluation:
    def test_single_mode(self):
        u = SpectralField.from_dict(2, {(1, 0): [1.0]})
        np.testing.assert_allclose(eval_velocity(u, (np.pi / 2, 0.7)), [0.0, 1.0], atol=1e-15)

    def test_zero_field(self):
        u = SpectralField.zeros(2, mode_ball(2, 2))
        assert np.all(eval_velocity(u, np.random.default_rng(0).uniform(0, 6, (5, 2))) == 0)

    def test_matches_direct_sum(self, rng):
        modes = np.array([[1, 0], [0, 1], [1, 1], [2, -1]])
        u = SpectralField.zeros(2, modes)
        u = u.with_coeffs(rng.standard_normal(u.coeffs.shape))
        assert len(u.modes) == 8
        x = rng.uniform(0, 2 * np.pi, (10, 2))
        got = eval_velocity(u, x)
        want = np.array([direct_sum(u, p) for p in x])
        assert np.max(np.abs(got - want)) < 1e-13

    def test_gradient_matches_finite_difference(self, rng):
        u = random_field(rng, 3, 1)
        x = rng.uniform(0, 2 * np.pi, 3)
        h = 1e-6
        fd = np.column_stack([(eval_velocity(u, x + h * e) - eval_velocity(u, x - h * e)) / (2 * h)
                              for e in np.eye(3)])
        np.testing.assert_allclose(eval_gradient(u, x), fd, atol=1e-8)

    def test_shear_gradient_on_zero_strain_line(self):
        u = field_from_function(2, lambda y: np.stack([np.cos(y[..., 1]), 0 * y[..., 0]], -1))
        np.testing.assert_allclose(eval_gradient(u, (1.3, 0.0)), np.zeros((2, 2)), atol=1e-15)

    def test_cellular_gradient_at_origin(self):
        u = field_from_function(2, lambda y: np.stack([np.sin(y[..., 1]), np.sin(y[..., 0])], -1))
        np.testing.assert_allclose(eval_gradient(u, (0.0, 0.0)), [[0, 1], [1, 0]], atol=1e-15)


def leray_oracle(d, n, w):
    """Leray projection of grid data by FFT, written independently of the package."""
    k1 = np.fft.fftfreq(n, 1.0 / n)
    K = np.stack(np.meshgrid(*([k1] * d), indexing="ij"))
    wh = np.fft.fftn(w, axes=tuple(range(1, d + 1)))
    k2 = np.sum(K**2, axis=0)
    k2[(0,) * d] = 1.0
    kdotw = np.sum(K * wh, axis=0)
    return np.real(np.fft.ifftn(wh - K * kdotw / k2, axes=tuple(range(1, d + 1))))


class TestEulerNonlinearity:
    @pytest.mark.parametrize("b", [0.0, 0.8])
    def test_shear_is_steady(self, b):
        u = field_from_function(2, lambda y: np.stack([np.cos(y[..., 1] - b), 0 * y[..., 0]], -1))
        assert np.max(np.abs(euler_nonlinearity(u, 1).coeffs)) <= 1e-12

    @pytest.mark.parametrize("a,b", [(0.0, 0.0), (0.3, 1.1)])
    def test_cellular_is_steady(self, a, b):
        u = field_from_function(2, lambda y: np.stack([np.sin(y[..., 1] - b), -np.sin(y[..., 0] - a)], -1))
        assert np.max(np.abs(euler_nonlinearity(u, 1).coeffs)) <= 1e-12

    def test_hyperbolic_cell_against_projection_oracle(self):
        u = field_from_function(2, lambda y: np.stack([np.sin(y[..., 1]), np.sin(y[..., 0])], -1))
        n = 16
        y = grid_points(2, n)
        x1, x2 = y[..., 0], y[..., 1]
        conv = np.stack([np.sin(x1) * np.cos(x2), np.sin(x2) * np.cos(x1)])  # (u.grad)u
        want = leray_oracle(2, n, conv)
        got = to_physical(euler_nonlinearity(u, 2), n)
        assert np.max(np.abs(got - want)) < 1e-12

    @pytest.mark.parametrize("method", ["triad", "collocation"])
    def test_energy_conservation(self, rng, method):
        worst = 0.0
        for _ in range(100):
            u = random_field(rng, 2, 2)
            B = euler_nonlinearity(u, 4, method=method)
            uu = u.with_coeffs(u.coeffs)
            # <B, u> through coefficients on the common modes
            idx = B.index()
            s = sum(float(B.coeffs[idx[tuple(k)]] @ c) for k, c in zip(uu.modes.tolist(), uu.coeffs))
            worst = max(worst, abs(s) / (np.sum(u.coeffs**2) ** 1.5))
        assert worst < 1e-10

    def test_methods_agree_3d(self, rng):
        u = random_field(rng, 3, 1)
        a = euler_nonlinearity(u, 2, method="triad")
        b = euler_nonlinearity(u, 2, method="collocation")
        assert np.max(np.abs(a.coeffs - b.coeffs)) < 1e-12

    def test_overflow_without_target(self, rng):
        u = random_field(rng, 2, 1)
        with pytest.raises(ModeSetOverflowError):
            euler_nonlinearity(u)


class TestDissipation:
    def test_halving(self):
        u = SpectralField.from_dict(2, {(1, 0): [1.0]})
        out = apply_dissipation(u, 1.0, 0.0, np.log(2))
        assert out.coeffs[out.index()[(1, 0)], 0] == pytest.approx(0.5, rel=1e-15)

    def test_zero_step_is_identity(self, rng):
        u = random_field(rng, 3, 1)
        np.testing.assert_array_equal(apply_dissipation(u, 0.7, 0.1, 0.0).coeffs, u.coeffs)

    @settings(max_examples=30)
    @given(st.floats(0.01, 2.0), st.floats(0.01, 1.0), st.floats(1e-3, 1.0))
    def test_hyperviscosity_dominates(self, nu, eta, dt):
        u = SpectralField.zeros(2, mode_ball(2, 3)).with_coeffs(np.ones((48, 1)))
        a = apply_dissipation(u, nu, eta, dt).coeffs[:, 0]
        b = apply_dissipation(u, nu, 0.0, dt).coeffs[:, 0]
        big = np.max(np.abs(u.modes), axis=1) >= 2
        assert np.all(a[big] < b[big])

"""Two-point statistics, the KHM balance and the compensated flux."""

import numpy as np
import pytest
from scipy import special

from conftest import field_from_function
from lagchaos.fluid import VelocityPath
from lagchaos.forcing import build_scalar_forcing
from lagchaos.scalar import ScalarSolver, flux_spectrum, run_stationary, velocity_hat
from lagchaos.spectral import SpectralField, mode_ball
from lagchaos.yaglom import (
    SpectralStats,
    StructureFunctionTable,
    khm_residual,
    khm_residual_spectral,
    khm_terms,
    source_profile,
    source_term,
    structure_functions,
    tables_from_run,
    yaglom_check,
)

ELL = np.array([0.1, 0.3, 0.7, 1.2, 2.0])


def tensor_oracle(u_fn, g_fn, ell, n_x=64, n_theta=256):
    """D(l) and G(l) on d = 2 by uniform quadrature in x and in the angle."""
    x = 2 * np.pi * np.arange(n_x) / n_x
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    D, G = [], []
    g0 = g_fn(X1, X2)
    u0 = u_fn(X1, X2)
    for l in ell:
        dsum = gsum = 0.0
        for c, s in zip(np.cos(th), np.sin(th)):
            g1 = g_fn(X1 + l * c, X2 + l * s)
            u1 = u_fn(X1 + l * c, X2 + l * s)
            dn = (u1[0] - u0[0]) * c + (u1[1] - u0[1]) * s
            dsum += np.mean((g1 - g0) ** 2 * dn)
            gsum += np.mean(g0 * g1)
        D.append(dsum / n_theta)
        G.append(gsum / n_theta)
    return np.array(D), np.array(G)


def grid_base(n):
    x = 2 * np.pi * np.arange(n) / n
    return np.stack(np.meshgrid(x, x, indexing="ij"), -1).reshape(-1, 2)


class TestStructureFunctions:
    def test_constant_scalar_has_no_flux(self):
        u = field_from_function(2, lambda y: np.stack([np.sin(y[..., 1]), np.sin(y[..., 0])], -1))
        g = SpectralField.zeros(2, mode_ball(2, 1), scalar=True)
        tab = structure_functions([(u, g)], ELL, n_dirs=16, n_base=64)
        assert np.all(tab.D == 0)

    def test_shear_pair_against_tensor_quadrature(self):
        u = field_from_function(2, lambda y: np.stack([np.sin(y[..., 1]), 0 * y[..., 0]], -1))
        g = SpectralField.from_dict(2, {(1, 0): 1.0}, scalar=True)  # sin x1
        tab = structure_functions([(u, g)], ELL, n_dirs=128, base_points=grid_base(32))
        D, G = tensor_oracle(lambda a, b: (np.sin(b), 0 * a), lambda a, b: np.sin(a), ELL)
        np.testing.assert_allclose(tab.D, D, atol=1e-3)
        np.testing.assert_allclose(tab.G, G, atol=1e-3)
        np.testing.assert_allclose(G, 0.5 * special.j0(ELL), atol=1e-10)

    def test_mixed_pair_against_tensor_quadrature(self):
        u = field_from_function(2, lambda y: np.stack([np.sin(y[..., 1]), np.sin(y[..., 0])], -1))
        g = SpectralField.from_dict(2, {(1, 0): 1.0, (0, -1): 0.5, (1, 1): 0.3}, scalar=True)

        def g_fn(a, b):
            return np.sin(a) + 0.5 * np.cos(b) + 0.3 * np.sin(a + b)

        tab = structure_functions([(u, g)], ELL, n_dirs=128, base_points=grid_base(32))
        D, G = tensor_oracle(lambda a, b: (np.sin(b), np.sin(a)), g_fn, ELL)
        assert np.max(np.abs(D)) > 1e-2
        np.testing.assert_allclose(tab.D, D, atol=1e-3)
        np.testing.assert_allclose(tab.G, G, atol=1e-3)

    def test_spectral_flux_matches_point_evaluation(self, rng):
        """The exact sphere average of the flux spectrum equals the direct quadrature."""
        f = build_scalar_forcing({(1, 0): 1.0})
        solver = ScalarSolver(2, 3, 0.1, f, 0.01, truncation="cube")
        modes = mode_ball(2, 3)
        table = {tuple(k): float(c) for k, c in zip(modes.tolist(), rng.standard_normal(len(modes)))}
        g = SpectralField.from_dict(2, table, scalar=True)
        u = field_from_function(2, lambda y: np.stack([np.sin(y[..., 1]) + 0.4 * np.cos(y[..., 1]),
                                                       np.sin(y[..., 0])], -1))
        G = solver.from_field(g)
        pm, uh = velocity_hat(u.modes, u.positive(), u.amplitude_vectors())
        st = SpectralStats.from_arrays(2, solver.kvec, np.abs(G) ** 2, flux_spectrum(solver, G, pm, uh))
        tab = structure_functions([(u, g)], ELL, n_dirs=96, base_points=grid_base(24))
        np.testing.assert_allclose(st.D(ELL), tab.D, atol=1e-9)
        np.testing.assert_allclose(st.G(ELL), tab.G, atol=1e-9)


class TestSource:
    def test_profile_closed_forms(self):
        f2 = build_scalar_forcing({(1, 1): 2.0})
        np.testing.assert_allclose(source_profile(f2, ELL), 2.0 * special.j0(np.sqrt(2) * ELL), rtol=1e-13)
        f3 = build_scalar_forcing({(0, 2, 0): 1.0})
        np.testing.assert_allclose(source_profile(f3, ELL), 0.5 * np.sinc(2 * ELL / np.pi), rtol=1e-13)

    def test_profile_at_origin_is_injection(self):
        f = build_scalar_forcing({(1, 0, 0): 1.0, (1, 1, 0): 0.5})
        assert source_profile(f, np.array([0.0]))[0] == pytest.approx(f.epsilon_bar)

    @pytest.mark.parametrize("d", [2, 3])
    def test_source_term_is_radial_integral(self, d):
        k = (1, 2) if d == 2 else (1, 0, 2)
        f = build_scalar_forcing({k: 1.3})
        from scipy.integrate import quad

        for l in ELL:
            val, _ = quad(lambda s: s ** (d - 1) * source_profile(f, np.array([s]))[0], 0, l)
            assert source_term(f, np.array([l]))[0] == pytest.approx(4 * val / l ** (d - 1), rel=1e-9)


class TestKHM:
    def test_diffusion_term_linear_in_kappa(self):
        D = lambda r: -0.3 * r
        G = lambda r: np.cos(r)
        a = lambda r: np.exp(-r)
        f1, d1, s1 = khm_terms(3, D, G, a, 0.1, 1.0)
        f2, d2, s2 = khm_terms(3, D, G, a, 0.2, 1.0)
        assert (f1, s1) == (f2, s2)
        assert d2 == pytest.approx(2 * d1, rel=1e-14)

    def test_exact_profiles_balance(self):
        """Profiles built to satisfy D = -4 kappa G' - S give zero residual."""
        f = build_scalar_forcing({(1, 0, 0): 1.0, (0, 1, 1): 0.7})
        kappa = 0.2
        ell = np.linspace(0, 1.5, 3001)
        G = np.cos(ell) * np.exp(-ell)
        dG = -np.exp(-ell) * (np.sin(ell) + np.cos(ell))
        D = -4 * kappa * dG - source_term(f, ell)
        assert abs(khm_residual(ell, D, G, source_profile(f, ell), kappa, 1.0, 3)) < 1e-6

    def test_support_guard(self):
        with pytest.raises(ValueError):
            khm_terms(3, np.cos, np.cos, np.cos, 0.1, 4.0)

    def test_diffusive_scalar_without_flow(self):
        f = build_scalar_forcing({(1, 0, 0): 1.0, (0, 0, 1): 1.0})
        kappa, dt = 0.2, 0.05
        solver = ScalarSolver(3, 2, kappa, f, dt)
        path = VelocityPath(frozen=SpectralField.zeros(3, mode_ball(3, 1)), dt=dt)
        res = run_stationary(solver, path, seed=4, burn_in=20.0, horizon=800.0, sample_every=2,
                             flux_every=100, n_batches=20)
        batches, table = tables_from_run(res, f, np.linspace(0.05, 3.0, 30), solver.kvec)
        rep = khm_residual_spectral(batches, f, kappa, 1.0)
        assert rep["within_3se"]
        # no advection, no flux
        assert np.all(table.D == 0)
        assert yaglom_check(table)["plateau_decades"] == 0.0


class TestYaglomCheck:
    def synthetic(self, comp):
        ell = np.geomspace(0.01, 3.0, 60)
        eps = 2.0
        D = comp * ell * eps
        z = np.zeros_like(ell)
        return StructureFunctionTable(3, ell, D, z, z, z, z, dG=z, dG_se=z, source=z, kappa=0.0, epsilon_bar=eps)

    def test_exact_law_spans_grid(self):
        tab = self.synthetic(np.full(60, -4 / 3))
        rep = yaglom_check(tab)
        assert rep["pass"] and rep["sign_ok"]
        assert rep["plateau_decades"] == pytest.approx(np.log10(300.0))
        assert rep["plateau_mean"] == pytest.approx(-4 / 3)

    def test_plateau_broken_by_deviation(self):
        comp = np.full(60, -4 / 3)
        comp[::6] *= 0.5  # 50% off every sixth point
        rep = yaglom_check(self.synthetic(comp))
        assert rep["plateau_decades"] < 0.5 and not rep["pass"]

    def test_two_dimensional_target(self):
        ell = np.geomspace(0.01, 3.0, 20)
        z = np.zeros_like(ell)
        tab = StructureFunctionTable(2, ell, -2 * ell, z, z, z, z, dG=z, dG_se=z, source=z, kappa=0.0, epsilon_bar=1.0)
        assert yaglom_check(tab)["target"] == -2.0 and yaglom_check(tab)["pass"]

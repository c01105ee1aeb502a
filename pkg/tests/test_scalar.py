"""Advection-diffusion of a passive scalar and inviscid gradient growth."""

import numpy as np
import pytest

from conftest import field_from_function
from lagchaos.fluid import FluidModelConfig, VelocityPath
from lagchaos.forcing import ForcingSpec, build_scalar_forcing, stokes_remark_forcing
from lagchaos.lyapunov import estimate_exponents
from lagchaos.scalar import (
    ScalarSolver,
    ScalarState,
    inviscid_gradient_growth,
    renormalized_scalar,
    run_stationary,
    scalar_step,
)
from lagchaos.spectral import SpectralField, mode_ball

UNIT3 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def zero_path(d, dt):
    return VelocityPath(frozen=SpectralField.zeros(d, mode_ball(d, 1)), dt=dt)


class TestScalarStep:
    def test_pure_diffusion(self):
        f = build_scalar_forcing({(1, 2): 1.0})
        g = SpectralField.from_dict(2, {(1, 2): 1.0, (-2, 1): 0.5}, scalar=True)
        s = ScalarState(0.0, g, 0.3, f)
        for _ in range(10):
            s = scalar_step(s, None, 0.05, None, Ng=3)
        idx = s.g.index()
        assert s.g.coeffs[idx[(1, 2)]] == pytest.approx(np.exp(-0.3 * 5 * 0.5), rel=1e-13)
        assert s.g.coeffs[idx[(-2, 1)]] == pytest.approx(0.5 * np.exp(-0.3 * 5 * 0.5), rel=1e-13)

    def test_advection_conserves_variance(self, rng):
        """Without diffusion or source the mean square is invariant up to time-step error."""
        f = build_scalar_forcing({(1, 0): 1.0})
        u = field_from_function(2, lambda y: 0.3 * np.stack([np.sin(y[..., 1]), np.sin(y[..., 0])], -1))
        table = {tuple(k): float(c) for k, c in zip(mode_ball(2, 1).tolist(), rng.standard_normal(8))}
        g = SpectralField.from_dict(2, table, scalar=True)
        solver = ScalarSolver(2, 16, 0.0, f, 0.01, allow_inviscid=True)
        G = solver.from_field(g)
        from lagchaos.scalar import velocity_hat

        pm, uh = velocity_hat(u.modes, u.positive(), u.amplitude_vectors())
        m0 = solver.mean_square(G)
        for _ in range(50):
            G = solver.step(G, pm, uh, None)
        assert solver.mean_square(G) == pytest.approx(m0, rel=1e-6)

    def test_source_outside_truncation(self):
        with pytest.raises(ValueError):
            ScalarSolver(2, 2, 0.1, build_scalar_forcing({(3, 0): 1.0}), 0.01)

    def test_renormalisation_scaling(self, rng):
        g = SpectralField.zeros(3, mode_ball(3, 1), scalar=True).with_coeffs(rng.standard_normal(26))
        s = ScalarState(0.0, g, 0.037, build_scalar_forcing({(1, 0, 0): 1.0}))
        r = renormalized_scalar(s)
        assert r.g.l2_squared() == pytest.approx(0.037 * g.l2_squared(), rel=1e-14)
        with pytest.raises(ValueError):
            scalar_step(r, None, 0.1, None)


class TestStationaryStatistics:
    def test_ou_variance_without_flow(self):
        """u = 0: E avg g^2 = sum q^2 / (2 kappa |k|^2) in the unit mean-square basis."""
        q = {(1, 0, 0): 1.0, (0, 1, 1): 0.8}
        f = build_scalar_forcing(q)
        kappa, dt = 0.25, 0.05
        solver = ScalarSolver(3, 2, kappa, f, dt)
        res = run_stationary(solver, zero_path(3, dt), seed=1, burn_in=20.0, horizon=1500.0,
                             sample_every=4, flux_every=400, n_batches=30)
        target = sum(a * a / (2 * kappa * sum(c * c for c in k)) for k, a in q.items())
        s = res.summary(30)
        ms = s["kappa_mean_square"] / kappa
        assert abs(ms - target) < 3 * s["kappa_mean_square_se"] / kappa
        assert abs(s["dissipation"] - f.epsilon_bar) < 3 * s["dissipation_se"]

    def test_balance_with_stokes_flow(self):
        spec = ForcingSpec(3, table={k: 1.0 for k in UNIT3})
        cfg = FluidModelConfig("stokes", 3, spec, dt=0.02)
        f = build_scalar_forcing(spec)
        solver = ScalarSolver(3, 10, 0.1, f, 0.02)
        res = run_stationary(solver, VelocityPath(cfg), seed=2, burn_in=10.0, horizon=150.0, n_batches=15)
        s = res.summary(15)
        assert abs(s["balance_ratio_raw"] - 1) < 3 * s["dissipation_se"] / f.epsilon_bar
        # the control variate leaves only the boundary term plus an O(kappa k^2 dt) bias
        assert abs(s["balance_ratio"] - 1) < 3 * s["balance_ratio_se"] + 0.01
        assert s["balance_ratio_se"] < 0.5 * s["dissipation_se"] / f.epsilon_bar
        assert abs(np.mean(res.martingale)) < 3 * np.std(res.martingale) / np.sqrt(len(res.martingale))
        assert res.resolved

    def test_mismatched_dt(self):
        f = build_scalar_forcing({(1, 0): 1.0})
        with pytest.raises(ValueError):
            run_stationary(ScalarSolver(2, 2, 0.1, f, 0.01), zero_path(2, 0.02), seed=0)


class TestGradientGrowth:
    def test_zero_velocity_constant(self):
        f0 = SpectralField.from_dict(2, {(1, 0): 1.0}, scalar=True)
        rep = inviscid_gradient_growth(zero_path(2, 0.05), f0, 10.0, 64, n_real=2)
        assert max(abs(r) for r in rep["rates"]) < 1e-12
        assert np.ptp(rep["log_l1_mean"]) < 1e-12

    def test_strain_rate(self):
        F = 0.6
        u = field_from_function(2, lambda y: F * np.stack([np.sin(y[..., 1]), np.sin(y[..., 0])], -1))
        path = VelocityPath(frozen=u, dt=0.01)
        f0 = SpectralField.from_dict(2, {(1, 0): 1.0}, scalar=True)  # sin x1, gradient (1, 0) at 0
        rep = inviscid_gradient_growth(path, f0, 20.0, 4, n_real=2, x0=np.zeros(2), fit_from=0.5)
        assert rep["rate"] == pytest.approx(F, abs=1e-6)

    def test_stokes_lower_bound(self):
        path = VelocityPath(FluidModelConfig("stokes", 2, stokes_remark_forcing(), dt=0.02))
        ref = estimate_exponents(path, 400.0, 8, seed=21)
        f0 = SpectralField.from_dict(2, {(1, 0): 1.0}, scalar=True)
        rep = inviscid_gradient_growth(path, f0, 200.0, 64, n_real=8, seed=22, reference=ref)
        assert rep["rate"] >= ref.top - 2 * rep["joint_se"]
        # the typical (log-mean) growth is the top exponent itself
        assert abs(rep["typical_rate"] - ref.top) < 3 * np.hypot(rep["typical_rate_se"], ref.stderr[0])

"""Exponent estimation, expansion in all directions and the projective process."""

import numpy as np
import pytest

from conftest import field_from_function
from lagchaos.fluid import FluidModelConfig, VelocityPath
from lagchaos.forcing import stokes_remark_forcing
from lagchaos.lyapunov import (
    CocycleRun,
    estimate_exponents,
    estimate_with_prefix,
    expansion_all_directions,
    projective_measure_histogram,
    run_cocycle,
    tv_distance,
    x_marginal_uniformity,
)
from lagchaos.spectral import SpectralField, mode_ball

F = 0.7


@pytest.fixture(scope="module")
def stokes4():
    return VelocityPath(FluidModelConfig("stokes", 2, stokes_remark_forcing(), dt=0.02))


@pytest.fixture(scope="module")
def hyperbolic():
    """f (sin x2, sin x1): the origin is a fixed point with grad u = f [[0, 1], [1, 0]]."""
    u = field_from_function(2, lambda y: F * np.stack([np.sin(y[..., 1]), np.sin(y[..., 0])], -1))
    return VelocityPath(frozen=u, dt=0.01)


class TestFrozenFields:
    def test_zero_field_gives_zero(self):
        path = VelocityPath(frozen=SpectralField.zeros(2, mode_ball(2, 1)), dt=0.05)
        est = estimate_exponents(path, 20.0, 3, seed=0, n_batches=10)
        assert np.all(est.lam == 0.0)
        assert np.all(est.lam_invT == 0.0)

    def test_strain_exponents(self, hyperbolic):
        est = estimate_exponents(hyperbolic, 40.0, 2, seed=0, n_batches=10, x0=np.zeros(2))
        np.testing.assert_allclose(est.lam, [F, -F], atol=0.02)
        np.testing.assert_allclose(est.lam_invT, [F, -F], atol=0.02)

    def test_stable_direction_is_exceptional(self, hyperbolic):
        s = 1 / np.sqrt(2)
        V = np.array([[s, -s], [s, s], [1.0, 0.0], [0.0, 1.0]]).T
        rep = expansion_all_directions(hyperbolic, 20.0, 1, directions=V, x0=np.zeros(2))
        np.testing.assert_allclose(rep["rates"][0], -F, atol=1e-9)
        np.testing.assert_allclose(rep["rates"][1], F, atol=1e-9)
        # generic directions converge to +f up to the transient log|<v, e_u>| / T
        assert all(abs(r - F) < 0.05 for r in rep["rates"][2:])


class TestStokesExponents:
    def test_positive_with_ci(self, stokes4):
        est = estimate_exponents(stokes4, 400.0, 8, seed=3)
        assert est.ci[0, 0] > 0
        assert est.sum_zero_ok()

    def test_inverse_transpose_rate_matches(self, stokes4):
        est = estimate_exponents(stokes4, 400.0, 8, seed=4)
        joint = np.hypot(est.stderr[0], est.stderr_invT[0])
        assert abs(est.lam[0] - est.lam_invT[0]) < 1.96 * joint + 1e-12

    def test_prefix_is_consistent(self, stokes4):
        half, full = estimate_with_prefix(stokes4, 200.0, 4, seed=5, n_batches=10)
        assert half.horizon == pytest.approx(100.0)
        assert full.horizon == pytest.approx(200.0)
        assert half.ci[0, 0] <= full.ci[0, 1] and full.ci[0, 0] <= half.ci[0, 1]

    def test_all_directions_within_ci(self, stokes4):
        ref = estimate_exponents(stokes4, 300.0, 8, seed=6)
        rep = expansion_all_directions(stokes4, 300.0, 8, seed=6, n_dirs=8, reference=ref)
        assert rep["all_within_ci"]


class TestResumability:
    def test_resume_mid_horizon_is_bit_exact(self, stokes4):
        full = CocycleRun(stokes4, 60.0, 3, 7, n_batches=6)
        full.advance()
        part = CocycleRun(stokes4, 60.0, 3, 7, n_batches=6)
        part.advance(max_steps=4321)
        snap = {k: np.copy(v) for k, v in part.snapshot().items()}
        again = CocycleRun(stokes4, 60.0, 3, 7, n_batches=6)
        again.restore(snap)
        again.advance()
        a, b = full.record(), again.record()
        np.testing.assert_array_equal(a["logA"], b["logA"])
        np.testing.assert_array_equal(a["logAc"], b["logAc"])

    def test_blocks_reassemble(self, stokes4):
        whole = run_cocycle(stokes4, 20.0, 4, 8, n_batches=4)
        parts = []
        for first, n in ((0, 1), (1, 3)):
            run = CocycleRun(stokes4, 20.0, n, 8, n_batches=4, first_traj=first)
            run.advance()
            parts.append(run.record()["logA"])
        np.testing.assert_array_equal(whole["logA"], np.concatenate(parts))


class TestProjectiveMeasure:
    def test_zero_field_point_mass(self):
        path = VelocityPath(frozen=SpectralField.zeros(2, mode_ball(2, 1)), dt=0.05)
        rep = projective_measure_histogram(path, 10.0, v0=[1.0, 0.0], x0=[1.0, 1.0])
        assert rep["hist"].max() == pytest.approx(1.0)

    def test_x_marginal_uniform(self, stokes4):
        rep = projective_measure_histogram(stokes4, 4000.0, seed=1, x_bins=4, v_bins=8)
        # one sample every 10 steps (0.2 time units); correlation time is O(1)
        uni = x_marginal_uniformity(rep["hist"], 2, rep["n_samples"] / 10)
        assert uni["pvalue"] > 0.01

    def test_two_seeds_converge(self, stokes4):
        tv = []
        for T in (250.0, 1000.0, 4000.0):
            a = projective_measure_histogram(stokes4, T, seed=11, x_bins=4, v_bins=8)["hist"]
            b = projective_measure_histogram(stokes4, T, seed=12, x_bins=4, v_bins=8)["hist"]
            tv.append(tv_distance(a, b))
        assert tv[0] > tv[1] > tv[2]

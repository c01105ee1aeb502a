"""Passive scalar with diffusivity and a stochastic source, advected by a low-mode velocity.

The scalar is held as complex Fourier coefficients on a centred cube
``|k|_inf <= Ng`` (optionally masked to the ball ``|k| <= Ng``). Advection is
the exact Galerkin convolution with the few velocity modes, so no aliasing
occurs and the transport term conserves the mean square exactly. Time
stepping is integrating-factor RK4 for advection-diffusion with the
velocity frozen over the step, followed by the exact OU increment of the
forced modes.

Norms here are box averages: ``mean_square = avg g^2`` and
``mean_square_gradient = avg |grad g|^2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .forcing import NoiseSource, ScalarForcing, ou_factors
from .fluid import VelocityPath
from .lagrangian import RENORM_COLUMNS, ParticleEnsemble
from .spectral import SpectralField, complex_coefficients, eval_scalar_gradient, from_complex, is_positive

log = logging.getLogger(__name__)

TWO_PI = 2 * np.pi


class ResolutionError(RuntimeError):
    """The scalar spectrum is not resolved by the chosen grid."""


# -- kernels -------------------------------------------------------------------------


@numba.njit(cache=True)
def _advect(G, mask, Ng, pm, uh, out):
    """out_k = -i sum_p (uhat_p . k) G_{k-p} on the masked cube (3D layout, nz may be 1)."""
    n0, n1, n2 = G.shape
    c2 = Ng if n2 > 1 else 0
    for a in range(n0):
        for b in range(n1):
            for c in range(n2):
                out[a, b, c] = 0.0
                if not mask[a, b, c]:
                    continue
                kx = a - Ng
                ky = b - Ng
                kz = c - c2
                acc = 0.0 + 0.0j
                for j in range(pm.shape[0]):
                    qa = a - pm[j, 0]
                    qb = b - pm[j, 1]
                    qc = c - pm[j, 2]
                    if qa < 0 or qa >= n0 or qb < 0 or qb >= n1 or qc < 0 or qc >= n2:
                        continue
                    dot = uh[j, 0] * kx + uh[j, 1] * ky + uh[j, 2] * kz
                    acc += dot * G[qa, qb, qc]
                out[a, b, c] = -1j * acc


@numba.njit(cache=True)
def _axpy_stage(G, Y, F, s_g, s_y, out):
    """out = F * (G + s_g * Y) if s_y == 0 else F * G + s_y * Y, elementwise."""
    n0, n1, n2 = G.shape
    for a in range(n0):
        for b in range(n1):
            for c in range(n2):
                if s_y == 0.0:
                    out[a, b, c] = F[a, b, c] * (G[a, b, c] + s_g * Y[a, b, c])
                else:
                    out[a, b, c] = F[a, b, c] * G[a, b, c] + s_y * Y[a, b, c]


@numba.njit(cache=True)
def _if_rk4(G, E, E2, mask, Ng, pm, uh, h, ka, kb, kc, kd, X, out):
    """Integrating-factor RK4 step for dG = -(u.grad g)^ dt with exact decay factors E = exp(-kappa k^2 h)."""
    n0, n1, n2 = G.shape
    _advect(G, mask, Ng, pm, uh, ka)
    _axpy_stage(G, ka, E2, 0.5 * h, 0.0, X)
    _advect(X, mask, Ng, pm, uh, kb)
    _axpy_stage(G, kb, E2, 0.0, 0.5 * h, X)
    _advect(X, mask, Ng, pm, uh, kc)
    for a in range(n0):
        for b in range(n1):
            for c in range(n2):
                X[a, b, c] = E[a, b, c] * G[a, b, c] + h * E2[a, b, c] * kc[a, b, c]
    _advect(X, mask, Ng, pm, uh, kd)
    w = h / 6.0
    for a in range(n0):
        for b in range(n1):
            for c in range(n2):
                e = E[a, b, c]
                out[a, b, c] = e * G[a, b, c] + w * (e * ka[a, b, c] + 2.0 * E2[a, b, c]
                                                     * (kb[a, b, c] + kc[a, b, c]) + kd[a, b, c])


@numba.njit(cache=True)
def _convolve_components(G, Ng, pm, uh, out):
    """out[j]_k = sum_p uhat_{p,j} G_{k-p}: Fourier coefficients of g u_j on the cube."""
    n0, n1, n2 = G.shape
    d3 = uh.shape[1]
    for a in range(n0):
        for b in range(n1):
            for c in range(n2):
                for comp in range(d3):
                    out[comp, a, b, c] = 0.0
                for j in range(pm.shape[0]):
                    qa = a - pm[j, 0]
                    qb = b - pm[j, 1]
                    qc = c - pm[j, 2]
                    if qa < 0 or qa >= n0 or qb < 0 or qb >= n1 or qc < 0 or qc >= n2:
                        continue
                    gq = G[qa, qb, qc]
                    for comp in range(d3):
                        out[comp, a, b, c] += uh[j, comp] * gq


@numba.njit(cache=True)
def _square_at(G, Ng, pm, out):
    """Fourier coefficients of g^2 at the wavevectors pm (offsets in index units)."""
    n0, n1, n2 = G.shape
    for j in range(pm.shape[0]):
        acc = 0.0 + 0.0j
        for a in range(n0):
            qa = a + pm[j, 0]
            if qa < 0 or qa >= n0:
                continue
            # g^2 at k: sum_p G_p G_{k-p}; use G_{k-p} = conj(G_{p-k})
            for b in range(n1):
                qb = b + pm[j, 1]
                if qb < 0 or qb >= n1:
                    continue
                for c in range(n2):
                    qc = c + pm[j, 2]
                    if qc < 0 or qc >= n2:
                        continue
                    acc += G[qa, qb, qc] * np.conj(G[a, b, c])
        out[j] = acc


# -- solver ----------------------------------------------------------------------------


def velocity_hat(modes: np.ndarray, pos: np.ndarray, W: np.ndarray):
    """Complex velocity coefficients (wavevectors, uhat) of sum_k e_k(x) W_k.

    Returns arrays over the symmetric closure with uhat of shape (M, 3)
    (zero third component in 2D).
    """
    d = modes.shape[1]
    table = {}
    for k, p, w in zip(np.asarray(modes, dtype=int).tolist(), pos, W):
        nk = tuple(-c for c in k)
        if p:  # sin(k.x) = (e^{ikx} - e^{-ikx}) / 2i
            table[tuple(k)] = table.get(tuple(k), 0) + w / 2j
            table[nk] = table.get(nk, 0) - w / 2j
        else:  # cos(k.x)
            table[tuple(k)] = table.get(tuple(k), 0) + w / 2
            table[nk] = table.get(nk, 0) + w / 2
    keys = sorted(table)
    pm = np.zeros((len(keys), 3), dtype=np.int64)
    uh = np.zeros((len(keys), 3), dtype=complex)
    pm[:, :d] = np.array(keys)
    uh[:, :d] = np.array([table[k] for k in keys])
    return pm, uh


class ScalarSolver:
    """Advection-diffusion-source integrator on a fixed spectral truncation."""

    def __init__(self, d: int, Ng: int, kappa: float, forcing: ScalarForcing, dt: float,
                 truncation: str = "ball", allow_inviscid: bool = False):
        if d not in (2, 3):
            raise ValueError("d must be 2 or 3")
        if kappa < 0 or (kappa == 0 and not allow_inviscid):
            raise ValueError("diffusivity must be positive (the inviscid scalar is handled by the cocycle)")
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.d, self.Ng, self.kappa, self.dt = d, Ng, kappa, dt
        self.forcing = forcing
        n = 2 * Ng + 1
        shape = (n, n, n if d == 3 else 1)
        ax = np.arange(n) - Ng
        kz = ax if d == 3 else np.zeros(1, dtype=int)
        KX, KY, KZ = np.meshgrid(ax, ax, kz, indexing="ij")
        self.kvec = np.stack([KX, KY, KZ])
        self.k2 = (KX**2 + KY**2 + KZ**2).astype(float)
        mask = self.k2 > 0
        if truncation == "ball":
            mask &= self.k2 <= Ng**2
        elif truncation != "cube":
            raise ValueError("truncation must be 'ball' or 'cube'")
        self.mask = mask
        self.shape = shape
        lam = kappa * self.k2
        self.E = np.where(mask, np.exp(-lam * dt), 0.0)
        self.E2 = np.where(mask, np.exp(-lam * dt / 2), 0.0)
        self._work = None
        self._noise_index = None
        self._setup_noise()

    # noise layout: one real draw per forced basis coefficient, in forcing order
    def _setup_noise(self):
        f = self.forcing
        kk = np.asarray(f.modes, dtype=int)
        if np.max(np.abs(kk)) > self.Ng:
            raise ValueError("forced modes lie outside the scalar truncation")
        self.n_noise = len(kk)
        lam = self.kappa * np.sum(kk**2, axis=1)
        if self.kappa > 0:
            _, sd = ou_factors(lam, f.coefficient_amplitudes(), self.dt)
        else:
            sd = f.coefficient_amplitudes() * np.sqrt(self.dt)
        self._noise_modes = kk
        self._noise_sd = sd
        self._noise_pos = np.array([is_positive(k) for k in kk])

    def index(self, k) -> tuple:
        k = list(k) + [0] * (3 - len(k))
        return (k[0] + self.Ng, k[1] + self.Ng, k[2] + self.Ng if self.d == 3 else 0)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape, dtype=complex)

    def source(self, seed: int, trajectory: int = 0) -> NoiseSource:
        return NoiseSource(seed, trajectory, self.n_noise, "scalar")

    def noise_increment(self, xi: np.ndarray) -> np.ndarray:
        """Complex increment for one step given standard normals xi (one per forced coefficient)."""
        inc = self.zeros()
        a = self._noise_sd * xi[: self.n_noise]
        for k, p, da in zip(self._noise_modes, self._noise_pos, a):
            i = self.index(k)
            j = self.index(-k)
            # e_k = sin(k.x) for k in Z+: coefficient da adds -i da / 2 at k and +i da / 2 at -k
            if p:
                inc[i] += -0.5j * da
                inc[j] += 0.5j * da
            else:
                inc[i] += 0.5 * da
                inc[j] += 0.5 * da
        return inc

    def add_noise(self, G: np.ndarray, xi: np.ndarray) -> tuple[float, float]:
        """Add the source increment to G in place.

        Returns (Re <G, dG>, |dG|^2 - E|dG|^2) with G the state before the
        addition. Both have mean zero and feed the balance control variate.
        """
        if self._noise_index is None:
            idx, coef = [], []
            for n, (k, p) in enumerate(zip(self._noise_modes, self._noise_pos)):
                for sgn in (1, -1):
                    idx.append(self.index(sgn * k))
                    coef.append((-0.5j * sgn if p else 0.5, n))
            self._noise_index = (tuple(np.array(idx).T), np.array([c for c, _ in coef]),
                                 np.array([n for _, n in coef]))
            self._noise_var = 0.5 * float(np.sum(self._noise_sd**2))
        where, c, which = self._noise_index
        vals = c * (self._noise_sd * xi[: self.n_noise])[which]
        # modes k and -k of one basis function are distinct cells, but several basis
        # functions can share a cell (sin and cos of the same k), so accumulate
        eta = {}
        for cell, v in zip(zip(*where), vals):
            eta[cell] = eta.get(cell, 0.0) + v
        work = 0.0
        sq = 0.0
        for cell, v in eta.items():
            work += (np.conj(G[cell]) * v).real
            sq += abs(v) ** 2
            G[cell] += v
        return float(work), float(sq - self._noise_var)

    def rhs(self, G, pm, uh):
        out = np.empty_like(G)
        pm_idx = pm.copy()
        if self.d == 2:
            pm_idx[:, 2] = 0
        _advect(G, self.mask, self.Ng, pm_idx, uh, out)
        return out

    def step(self, G: np.ndarray, pm, uh, xi: np.ndarray | None) -> np.ndarray:
        """One IF-RK4 step of dg = (-u.grad g + kappa Lap g) dt followed by the source increment."""
        h = self.dt
        E, E2 = self.E, self.E2
        if pm is None or len(pm) == 0:
            Gn = E * G
        else:
            pm_idx = pm.copy()
            if self.d == 2:
                pm_idx[:, 2] = 0
            if self._work is None:
                self._work = [np.empty(self.shape, dtype=complex) for _ in range(5)]
            Gn = np.empty_like(G)
            _if_rk4(np.ascontiguousarray(G, dtype=complex), E, E2, self.mask, self.Ng, pm_idx,
                    np.asarray(uh, dtype=complex), h, *self._work, Gn)
        if xi is not None:
            Gn = Gn + self.noise_increment(xi)
        return Gn

    def symmetrize(self, G: np.ndarray) -> np.ndarray:
        """Project onto real-valued fields (Hermitian symmetry G_{-k} = conj G_k)."""
        flip = G[::-1, ::-1, ::-1] if self.d == 3 else G[::-1, ::-1, :]
        return 0.5 * (G + np.conj(flip))

    # diagnostics
    def mean_square(self, G) -> float:
        return float(np.sum(np.abs(G) ** 2))

    def mean_square_gradient(self, G) -> float:
        return float(np.sum(self.k2 * np.abs(G) ** 2))

    def gradient_spectrum_tail(self, power: np.ndarray, fraction: float = 2.0 / 3.0) -> float:
        """Share of sum |k|^2 P_k carried by |k| > fraction * Ng."""
        w = self.k2 * power
        tail = w[np.sqrt(self.k2) > fraction * self.Ng].sum()
        return float(tail / w.sum()) if w.sum() > 0 else 0.0

    def max_stable_dt(self, umax: float) -> float:
        """RK4 advective limit with a 2x margin (imaginary-axis stability ~2.8)."""
        kmax = self.Ng * (np.sqrt(self.d) if not np.any(~self.mask & (self.k2 > 0)) else 1.0)
        return 1.4 / max(umax * kmax, 1e-300)

    # conversions
    def to_field(self, G) -> SpectralField:
        idx = np.argwhere(self.mask)
        ks = idx.copy()
        ks[:, :2] -= self.Ng
        if self.d == 3:
            ks[:, 2] -= self.Ng
        ks = ks[:, : self.d]
        vals = G[tuple(idx.T)]
        return from_complex(self.d, ks, vals, scalar=True)

    def from_field(self, g: SpectralField) -> np.ndarray:
        modes, fh = complex_coefficients(g)
        G = self.zeros()
        for k, v in zip(modes.tolist(), fh):
            if max(abs(c) for c in k) > self.Ng:
                raise ValueError("field has modes outside the truncation")
            G[self.index(k)] = v
        return G * self.mask


@dataclass
class ScalarState:
    """Scalar field, diffusivity and source; ``renormalized`` marks f = sqrt(kappa) g."""

    t: float
    g: SpectralField
    kappa: float
    forcing: ScalarForcing
    step: int = 0
    renormalized: bool = False

    @property
    def epsilon_bar(self) -> float:
        return self.forcing.epsilon_bar


def scalar_step(s: ScalarState, u: SpectralField | None, dt: float, source: NoiseSource | None,
                Ng: int | None = None, truncation: str = "ball") -> ScalarState:
    """Single step through a frozen velocity ``u`` (None for no advection)."""
    if s.renormalized:
        raise ValueError("step the physical scalar, then renormalise")
    Ng = Ng or max(s.g.max_mode(), int(np.max(np.abs(s.forcing.modes))))
    solver = ScalarSolver(s.g.d, Ng, s.kappa, s.forcing, dt, truncation)
    G = solver.from_field(s.g)
    pm = uh = None
    if u is not None:
        pm, uh = velocity_hat(u.modes, u.positive(), u.amplitude_vectors())
    xi = None if source is None else source.normals(s.step, 1)[0]
    G = solver.step(G, pm, uh, xi)
    return ScalarState(s.t + dt, solver.to_field(G), s.kappa, s.forcing, s.step + 1)


def renormalized_scalar(s: ScalarState) -> ScalarState:
    """f = sqrt(kappa) g, whose stationary balance reads E avg|grad f|^2 = epsilon_bar."""
    if s.kappa <= 0:
        raise ValueError("renormalisation needs kappa > 0")
    return replace(s, g=s.g * np.sqrt(s.kappa), renormalized=True)


# -- stationary runs -------------------------------------------------------------------


@dataclass
class ScalarRunResult:
    """Time series and time-averaged spectral statistics of one stationary run."""

    kappa: float
    epsilon_bar: float
    t: np.ndarray
    mean_square: np.ndarray
    dissipation: np.ndarray  # kappa * avg |grad g|^2
    martingale: np.ndarray  # source work <g, dW> between consecutive samples, per unit time
    power: np.ndarray  # time average of |G_k|^2
    flux_hat: np.ndarray | None  # time average of the flux spectrum, shape (3,) + cube
    batch_power: list = field(default_factory=list)
    batch_flux: list = field(default_factory=list)
    tail_fraction: float = 0.0
    resolved: bool = True
    d: int = 3
    Ng: int = 0

    def summary(self, n_batches: int = 20) -> dict:
        from .fluid import batch_means

        m_diss, se_diss, _ = batch_means(self.dissipation, n_batches)
        m_cv = float(np.mean(self.dissipation - self.martingale))
        # what is left after the control variate is the boundary term (|g_0|^2 - |g_T|^2) / 2T
        span = self.t[-1] - self.t[0] + (self.t[1] - self.t[0] if len(self.t) > 1 else 0.0)
        se_cv = float(np.sqrt(0.5 * np.var(self.mean_square, ddof=1)) / span) if len(self.t) > 1 else float("nan")
        m_ms, se_ms, _ = batch_means(self.mean_square, n_batches)
        return {
            "kappa": self.kappa,
            "epsilon_bar": self.epsilon_bar,
            "dissipation": m_diss,
            "dissipation_se": se_diss,
            "dissipation_cv": m_cv,
            "dissipation_cv_se": se_cv,
            "balance_ratio": m_cv / self.epsilon_bar,
            "balance_ratio_se": se_cv / self.epsilon_bar,
            "balance_ratio_raw": m_diss / self.epsilon_bar,
            "kappa_mean_square": self.kappa * m_ms,
            "kappa_mean_square_se": self.kappa * se_ms,
            "tail_fraction": self.tail_fraction,
            "resolved": self.resolved,
        }


def flux_spectrum(solver: ScalarSolver, G: np.ndarray, pm: np.ndarray, uh: np.ndarray) -> np.ndarray:
    """Fourier coefficients of the vector D(y) = avg |g(x+y) - g(x)|^2 (u(x+y) - u(x)).

    With corr(a, b)(y) = avg a(x) b(x + y), whose coefficients are conj(a_k) b_k,

        D = corr(g^2, u) - corr(u, g^2) + 2 corr(g u, g) - 2 corr(g, g u).

    The velocity has only the modes ``pm``, so the first two terms live on
    those modes and the last two are exact convolutions on the scalar cube.
    """
    pm_idx = pm.copy()
    if solver.d == 2:
        pm_idx[:, 2] = 0
    gu = np.empty((3,) + G.shape, dtype=complex)
    _convolve_components(G, solver.Ng, pm_idx, uh, gu)
    gu[:, ~solver.mask] = 0.0  # the truncation only resolves g u inside the cube
    D = 2 * (np.conj(gu) * G[None] - np.conj(G)[None] * gu)
    sq = np.empty(len(pm), dtype=complex)
    _square_at(G, solver.Ng, pm_idx, sq)
    for j, k in enumerate(pm):
        i = solver.index(k[: solver.d])
        D[:, i[0], i[1], i[2]] += np.conj(sq[j]) * uh[j] - np.conj(uh[j]) * sq[j]
    return D


def run_stationary(solver: ScalarSolver, path: VelocityPath, seed: int, trajectory: int = 0,
                   burn_in: float = 50.0, horizon: float = 200.0, sample_every: int = 10,
                   flux_every: int = 50, n_batches: int = 20, check_resolution: bool = True,
                   G0: np.ndarray | None = None) -> ScalarRunResult:
    """Run the coupled (velocity, scalar) system and accumulate stationary statistics.

    The velocity path and the scalar solver must share dt. Flux spectra are
    accumulated every ``flux_every`` steps after burn-in, grouped into
    ``n_batches`` batches for error bars.

    Alongside the dissipation samples the run records the source work
    Re <g~, dG> of every noise increment, g~ being the state the increment is
    added to. That work has mean zero, and Ito's formula makes the time
    average of dissipation minus work equal to epsilon_bar up to a boundary
    term of order Var|g|^2 / T, so it is used as a control variate.
    """
    if abs(path.dt - solver.dt) > 1e-15:
        raise ValueError("velocity path and scalar solver must use the same dt")
    nb = int(round(burn_in / solver.dt))
    nh = int(round(horizon / solver.dt))
    total = nb + nh
    G = solver.zeros() if G0 is None else G0.copy()
    src = solver.source(seed, trajectory)
    ts, ms, diss, work = [], [], [], []
    power = np.zeros(solver.shape)
    n_power = 0
    bsize = max(1, nh // n_batches)
    batch_power, batch_flux = [], []
    cur_p = np.zeros(solver.shape)
    cur_f = np.zeros((3,) + solver.shape, dtype=complex)
    cur_np = cur_nf = 0
    step = 0
    for W in path.chunks(seed, trajectory, total):
        xi_all = src.normals(step, W.shape[0])
        for j in range(W.shape[0]):
            pm, uh = velocity_hat(path.modes, path.pos, W[j])
            if step >= nb:
                rel = step - nb
                if rel % sample_every == 0:
                    p = np.abs(G) ** 2
                    ts.append(step * solver.dt)
                    ms.append(float(p.sum()))
                    diss.append(solver.kappa * float(np.sum(solver.k2 * p)))
                    work.append(0.0)
                    cur_p += p
                    cur_np += 1
                if rel % flux_every == 0:
                    cur_f += flux_spectrum(solver, G, pm, uh)
                    cur_nf += 1
                if (rel + 1) % bsize == 0 and len(batch_power) < n_batches:
                    batch_power.append(cur_p / max(cur_np, 1))
                    batch_flux.append(cur_f / max(cur_nf, 1))
                    power += cur_p
                    n_power += cur_np
                    cur_p = np.zeros(solver.shape)
                    cur_f = np.zeros((3,) + solver.shape, dtype=complex)
                    cur_np = cur_nf = 0
            G = solver.step(G, pm, uh, None)
            w, excess = solver.add_noise(G, xi_all[j])
            if step >= nb:
                work[-1] += w + 0.5 * excess
            step += 1
            if step % 200 == 0:
                G = solver.symmetrize(G)
                if not np.all(np.isfinite(G)):
                    raise FloatingPointError(f"scalar blew up at t={step * solver.dt:.4g}")
    mean_power = np.mean(batch_power, axis=0)
    mean_flux = np.mean(batch_flux, axis=0)
    tail = solver.gradient_spectrum_tail(mean_power)
    resolved = tail < 0.01
    if check_resolution and not resolved:
        log.warning("kappa=%g: gradient tail fraction %.3g exceeds 1%%; increase Ng", solver.kappa, tail)
    work_rate = np.array(work) / (sample_every * solver.dt)
    res = ScalarRunResult(solver.kappa, solver.forcing.epsilon_bar, np.array(ts), np.array(ms), np.array(diss),
                          work_rate, mean_power, mean_flux, batch_power, batch_flux, tail, resolved, solver.d, solver.Ng)
    res.final_G = G
    return res


# -- inviscid gradient growth through the cocycle ------------------------------------------


def inviscid_gradient_growth(path: VelocityPath, f0: SpectralField, horizon: float, n_particles: int,
                             n_real: int = 8, seed: int = 0, record_every: float = 1.0,
                             fit_from: float = 0.1, reference=None, x0=None) -> dict:
    """Exponential growth of ||grad f_t||_{L^1} for the transported scalar without diffusion.

    Each realisation seeds ``n_particles`` uniform points x0 and carries
    w = grad f0(x0) by the inverse-transpose cocycle; the particle mean of
    |A_t^{-T} w| estimates the L^1 norm (the flow preserves volume).
    The rate is the least-squares slope of log(estimate) over
    ``[fit_from * horizon, horizon]``, averaged over realisations.
    Passing ``x0`` pins every particle to the given start point(s) instead.
    """
    if not f0.is_scalar:
        raise TypeError("f0 must be a scalar field")
    d = path.d
    n_steps = int(round(horizon / path.dt))
    rec_steps = max(1, int(round(record_every / path.dt)))
    rng = np.random.default_rng([seed, 4242])
    curves, typical = [], []
    times = None
    for r in range(n_real):
        draw = rng.uniform(0, TWO_PI, (n_particles, d))
        if x0 is not None:
            draw = np.array(np.broadcast_to(np.asarray(x0, dtype=float), (n_particles, d)))
        w = eval_scalar_gradient(f0, draw)
        nz = np.linalg.norm(w, axis=1) > 1e-12
        ens = ParticleEnsemble.create(draw[nz], A=np.tile(np.eye(d)[:, :1], (nz.sum(), 1, 1)),
                                      Ac=w[nz][:, :, None], mode=RENORM_COLUMNS)
        # the column mode logs log|A_check w| including the initial |w|
        logw0 = np.log(np.linalg.norm(w[nz], axis=1))
        ts, logl1, logtyp = [0.0], [_logmean(logw0, n_particles)], [float(np.mean(logw0))]
        done = 0
        pending = 0
        first = True
        for W in path.chunks(seed, r, n_steps):
            j = 0
            while j < W.shape[0]:
                m = min(W.shape[0] - j, rec_steps - pending)
                ens.advance(path.modes, path.pos, W[j:j + m], path.dt)
                if first:
                    first = False
                j += m
                done += m
                pending += m
                if pending == rec_steps:
                    pending = 0
                    lg = ens.lsAc[:, 0]
                    ts.append(done * path.dt)
                    logl1.append(_logmean(lg, n_particles))
                    logtyp.append(float(np.mean(lg)))
        times = np.array(ts)
        curves.append(logl1)
        typical.append(logtyp)
    curves = np.array(curves)
    typical = np.array(typical)
    sel = times >= fit_from * times[-1]
    rates = np.array([np.polyfit(times[sel], c[sel], 1)[0] for c in curves])
    typ_rates = (typical[:, -1] - typical[:, 0]) / times[-1]
    out = {
        "t": times.tolist(),
        "log_l1_mean": curves.mean(axis=0).tolist(),
        "rate": float(rates.mean()),
        "rate_se": float(rates.std(ddof=1) / np.sqrt(n_real)) if n_real > 1 else float("nan"),
        "rates": rates.tolist(),
        "typical_rate": float(typ_rates.mean()),
        "typical_rate_se": float(typ_rates.std(ddof=1) / np.sqrt(n_real)) if n_real > 1 else float("nan"),
        "n_particles": n_particles,
    }
    if reference is not None:
        joint = float(np.hypot(out["rate_se"], reference.stderr[0]))
        out["lambda_ref"] = reference.top
        out["joint_se"] = joint
        out["z"] = (out["rate"] - reference.top) / joint
    return out


def _logmean(logs: np.ndarray, n_total: int) -> float:
    """log of (1/n_total) sum exp(logs), stable."""
    if len(logs) == 0:
        return -np.inf
    m = np.max(logs)
    return float(m + np.log(np.sum(np.exp(logs - m))) - np.log(n_total))

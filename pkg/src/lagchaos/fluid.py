"""Time integration of the stochastic Stokes and (Galerkin) Navier-Stokes systems.

All variants are advanced in coefficient space with an exponential
Euler-Maruyama step: the linear dissipative part is integrated exactly,
the noise is added with the exact per-mode OU quadrature, and the Euler
nonlinearity (if any) is frozen over the step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.signal import lfilter

from .forcing import ForcingSpec, NoiseSource, ou_factors
from .spectral import (
    SpectralField,
    euler_nonlinearity,
    mode_ball,
    reindex,
    restrict,
    to_physical,
)

log = logging.getLogger(__name__)

VARIANTS = ("stokes", "galerkin", "nse2d", "hypernse3d")
BLOWUP_L2 = 1e8


class BlowUpError(RuntimeError):
    """Non-finite or exploding coefficients."""


@dataclass
class FluidModelConfig:
    variant: str
    d: int
    forcing: ForcingSpec
    nu: float = 1.0
    eta: float = 0.0
    N: int | None = None
    dt: float | None = None
    nonlinearity: str = "collocation"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")
        if self.eta < 0:
            raise ValueError("hyper-viscosity must be non-negative")
        if self.forcing.d != self.d:
            raise ValueError("forcing dimension does not match the model")
        if self.variant == "galerkin" and (self.N is None or self.N < 3):
            raise ValueError("Galerkin variant requires N >= 3")
        if self.variant in ("nse2d", "hypernse3d") and self.N is None:
            raise ValueError(f"{self.variant} is simulated as a truncation and needs N")
        if self.variant == "nse2d" and self.d != 2:
            raise ValueError("nse2d is two-dimensional")
        if self.variant == "hypernse3d" and (self.d != 3 or self.eta <= 0):
            raise ValueError("hypernse3d needs d = 3 and eta > 0")

    @property
    def linear(self) -> bool:
        return self.variant == "stokes"

    def mode_set(self) -> np.ndarray:
        if self.variant == "stokes":
            modes, _ = self.forcing.amplitudes()
            return restrict(SpectralField.zeros(self.d, modes), modes).modes
        return mode_ball(self.d, self.N)

    def default_dt(self) -> float:
        if self.dt is not None:
            return self.dt
        n = self.N if self.N is not None else int(np.max(np.abs(self.mode_set())))
        return 0.5 / (self.nu * n**2)


@dataclass
class FluidState:
    t: float
    u: SpectralField
    step: int = 0

    def to_dict(self) -> dict:
        return {"t": self.t, "step": self.step, "u": self.u.to_json()}

    @classmethod
    def from_dict(cls, obj: dict) -> "FluidState":
        return cls(obj["t"], SpectralField.from_json(obj["u"]), obj["step"])


class FluidIntegrator:
    """Precomputed per-coefficient rates and noise amplitudes for one config."""

    def __init__(self, cfg: FluidModelConfig, dt: float | None = None):
        self.cfg = cfg
        self.dt = cfg.default_dt() if dt is None else dt
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        self.template = SpectralField.zeros(cfg.d, cfg.mode_set())
        k2 = self.template.k_squared()
        lam = cfg.nu * k2 + cfg.eta * k2**2
        self.lam = np.repeat(lam[:, None], cfg.d - 1, axis=1)
        fmodes, q = cfg.forcing.amplitudes()
        qtab = {tuple(k): a for k, a in zip(fmodes.tolist(), q)}
        qk = np.array([qtab.get(tuple(k), 0.0) for k in self.template.modes.tolist()])
        if cfg.variant != "stokes":
            dropped = set(qtab) - {tuple(k) for k in self.template.modes.tolist()}
            if dropped:
                log.info("forcing on %d modes outside |k|_inf <= %s is truncated", len(dropped), cfg.N)
        self.q = np.repeat(qk[:, None], cfg.d - 1, axis=1)
        self.forced = self.q.ravel() != 0
        self.n_noise = int(np.count_nonzero(self.forced))
        self._set_dt(self.dt)

    def _set_dt(self, dt):
        self.decay, self.noise_sd = ou_factors(self.lam, self.q, dt)
        self.phi1 = -np.expm1(-self.lam * dt) / self.lam

    def source(self, seed: int, trajectory: int = 0) -> NoiseSource:
        return NoiseSource(seed, trajectory, max(self.n_noise, 1), "velocity")

    def initial(self, u0: SpectralField | None = None, t0: float = 0.0) -> FluidState:
        if u0 is None:
            return FluidState(t0, self.template, 0)
        return FluidState(t0, restrict(reindex(u0, self.template.modes), self.template.modes), 0)

    def noise_term(self, xi: np.ndarray) -> np.ndarray:
        full = np.zeros(self.q.size)
        full[self.forced] = xi[: self.n_noise]
        return self.noise_sd * full.reshape(self.q.shape)

    def drift_nonlinear(self, u: SpectralField) -> np.ndarray:
        if self.cfg.linear:
            return np.zeros_like(u.coeffs)
        return -euler_nonlinearity(u, target=u.modes, method=self.cfg.nonlinearity).coeffs

    def step(self, state: FluidState, xi: np.ndarray, noise: np.ndarray | None = None) -> FluidState:
        u = state.u
        c = u.coeffs * self.decay
        if not self.cfg.linear:
            c = c + self.phi1 * self.drift_nonlinear(u)
        c = c + (self.noise_term(xi) if noise is None else noise)
        if not np.all(np.isfinite(c)):
            raise BlowUpError(f"non-finite coefficients at t={state.t:.6g}")
        new = u.with_coeffs(c)
        if not self.cfg.linear and new.l2_squared() > BLOWUP_L2**2:
            raise BlowUpError(f"L2 norm exceeded {BLOWUP_L2:g} at t={state.t:.6g}")
        return FluidState(state.t + self.dt, new, state.step + 1)

    def run(self, state: FluidState, n_steps: int, source: NoiseSource, callback=None, chunk: int = 4096):
        done = 0
        while done < n_steps:
            m = min(chunk, n_steps - done)
            xi = source.normals(state.step, m)
            for j in range(m):
                state = self.step(state, xi[j])
                if callback is not None:
                    callback(state)
            done += m
        return state

    def cfl_dt(self, u: SpectralField, n_grid: int | None = None) -> float:
        """Largest dt with ||u||_inf dt <= 0.1 (2 pi / N)."""
        n = self.cfg.N if self.cfg.N is not None else u.max_mode()
        umax = sup_norm(u)
        return np.inf if umax == 0 else 0.1 * (2 * np.pi / n) / umax


def sup_norm(u: SpectralField, n_grid: int | None = None) -> float:
    n = n_grid or max(8, 4 * u.max_mode() + 4)
    vals = to_physical(u, n)
    if u.is_scalar:
        return float(np.max(np.abs(vals)))
    return float(np.max(np.sqrt(np.sum(vals**2, axis=0))))


def step_stokes(state: FluidState, cfg: FluidModelConfig, source: NoiseSource, dt: float | None = None) -> FluidState:
    """One exact-in-law OU step of every Stokes coefficient."""
    if cfg.variant != "stokes":
        raise ValueError("step_stokes needs the stokes variant")
    integ = FluidIntegrator(cfg, dt)
    xi = source.normals(state.step, 1)[0]
    return integ.step(state, xi)


def step_nse(state: FluidState, cfg: FluidModelConfig, source: NoiseSource, dt: float | None = None) -> FluidState:
    """One exponential Euler-Maruyama step of the (truncated) Navier-Stokes system."""
    if cfg.variant == "stokes":
        raise ValueError("use step_stokes for the linear system")
    integ = FluidIntegrator(cfg, dt)
    xi = source.normals(state.step, 1)[0]
    return integ.step(state, xi)


def energy_series(cfg: FluidModelConfig, n_steps: int, seed: int, trajectory: int = 0,
                  u0: SpectralField | None = None, every: int = 1, dt: float | None = None):
    """Columns (t, E, Z, sup|u|) with E the mean square velocity and Z the mean square gradient."""
    integ = FluidIntegrator(cfg, dt)
    state = integ.initial(u0)
    src = integ.source(seed, trajectory)
    rows = []

    def record(s):
        if s.step % every == 0:
            rows.append((s.t, s.u.mean_square(), s.u.mean_square_gradient(), sup_norm(s.u)))

    record(state)
    integ.run(state, n_steps, src, callback=record)
    return np.array(rows)


def sample_stationary(cfg: FluidModelConfig, burn_in: float, n: int, seed: int, trajectory: int = 0,
                      spacing: float = 2.0, dt: float | None = None) -> list[FluidState]:
    """n states from one trajectory after burn-in, taken every ``spacing`` time units."""
    if burn_in <= 0:
        raise ValueError("burn_in must be positive")
    integ = FluidIntegrator(cfg, dt)
    state = integ.initial()
    src = integ.source(seed, trajectory)
    state = integ.run(state, int(round(burn_in / integ.dt)), src)
    gap = max(1, int(round(spacing / integ.dt)))
    out = []
    for _ in range(n):
        state = integ.run(state, gap, src)
        out.append(state)
    return out


def stokes_ensemble(cfg: FluidModelConfig, n_traj: int, t: float, seed: int, dt: float | None = None,
                    u0: np.ndarray | None = None) -> np.ndarray:
    """Coefficients of n_traj independent Stokes trajectories at time t, shape (n_traj, m, d-1)."""
    integ = FluidIntegrator(cfg, dt)
    n_steps = int(round(t / integ.dt))
    c = np.zeros((n_traj,) + integ.q.shape) if u0 is None else np.array(u0, dtype=float)
    for r in range(n_traj):
        xi = integ.source(seed, r).normals(0, n_steps)
        for j in range(n_steps):
            c[r] = c[r] * integ.decay + integ.noise_term(xi[j])
    return c


# -- statistics helpers -----------------------------------------------------------


def batch_means(x: np.ndarray, n_batches: int = 50):
    """Mean and standard error of a correlated series by non-overlapping batches."""
    x = np.asarray(x, dtype=float)
    nb = min(n_batches, len(x))
    m = len(x) // nb
    b = x[: m * nb].reshape(nb, m).mean(axis=1)
    return float(b.mean()), float(b.std(ddof=1) / np.sqrt(nb)), b


def drift_test(t: np.ndarray, y: np.ndarray, n_batches: int = 20, level: float = 0.99) -> dict:
    """Regress batch means of y on batch mean times; stationary iff the slope CI covers 0."""
    _, _, yb = batch_means(y, n_batches)
    _, _, tb = batch_means(t, n_batches)
    res = stats.linregress(tb, yb)
    tq = stats.t.ppf(0.5 + level / 2, len(tb) - 2)
    lo, hi = res.slope - tq * res.stderr, res.slope + tq * res.stderr
    return {"slope": res.slope, "ci": (lo, hi), "stationary": bool(lo <= 0 <= hi)}


def two_sample_test(a: np.ndarray, b: np.ndarray, n_batches: int = 20) -> dict:
    """Welch t-test on batch means of two correlated series."""
    _, _, ab = batch_means(a, n_batches)
    _, _, bb = batch_means(b, n_batches)
    res = stats.ttest_ind(ab, bb, equal_var=False)
    return {"statistic": float(res.statistic), "pvalue": float(res.pvalue)}


# -- strong convergence on a fixed Brownian path ---------------------------------------


def strong_convergence_study(cfg: FluidModelConfig, u0: SpectralField, T: float, dts, seed: int,
                             fine_factor: int = 4) -> dict:
    """Errors at each dt against the finest run, all driven by one Brownian path.

    The stochastic convolution over each coarse step is assembled from the
    shared fine increments, so every run sees the same noise path.
    """
    dts = sorted(dts, reverse=True)
    h = dts[-1] / fine_factor
    n_fine = int(round(T / h))
    base = FluidIntegrator(cfg, h)
    dW = base.source(seed).normals(0, n_fine) * np.sqrt(h)
    finals = {}
    for dt in dts + [h]:
        integ = FluidIntegrator(cfg, dt)
        m = int(round(dt / h))
        state = integ.initial(u0)
        offs = (np.arange(m)[::-1] + 0.5) * h  # time from substep midpoint to coarse endpoint
        weights = np.exp(-integ.lam.ravel()[integ.forced][None, :] * offs[:, None])
        qf = integ.q.ravel()[integ.forced]
        for n in range(int(round(T / dt))):
            inc = dW[n * m:(n + 1) * m, : integ.n_noise]
            conv = qf * np.sum(weights * inc, axis=0)
            full = np.zeros(integ.q.size)
            full[integ.forced] = conv
            state = integ.step(state, None, noise=full.reshape(integ.q.shape))
        finals[dt] = state.u.coeffs
    ref = finals.pop(h)
    errors = {dt: float(np.sqrt(np.sum((c - ref) ** 2))) for dt, c in finals.items()}
    dl = np.log(np.array(list(errors.keys())))
    el = np.log(np.array(list(errors.values())))
    order = float(np.polyfit(dl, el, 1)[0]) if len(errors) > 1 else np.nan
    return {"errors": errors, "order": order}


def with_dt(cfg: FluidModelConfig, dt: float) -> FluidModelConfig:
    return replace(cfg, dt=dt)


# -- velocity paths for Lagrangian experiments -----------------------------------------


class VelocityPath:
    """Amplitude vectors W_n (shape (m, d)) of one velocity trajectory, step by step.

    Row n of a chunk is the field frozen over [n dt, (n+1) dt]. Stokes paths
    start from an exact draw of the stationary Gaussian law and are produced
    by a vectorised AR(1) recursion; the nonlinear variants are stepped with
    :class:`FluidIntegrator` after a burn-in from rest.
    """

    def __init__(self, cfg: FluidModelConfig | None = None, dt: float | None = None,
                 frozen: SpectralField | None = None, burn_in: float = 20.0):
        if (cfg is None) == (frozen is None):
            raise ValueError("give exactly one of cfg or frozen")
        self.cfg = cfg
        self.frozen = frozen
        self.burn_in = burn_in
        if frozen is not None:
            self.dt = dt if dt is not None else 0.01
            self.template = frozen
        else:
            self.integ = FluidIntegrator(cfg, dt)
            self.dt = self.integ.dt
            self.template = self.integ.template
        self.modes = self.template.modes.astype(float)
        self.pos = self.template.positive()
        self._gam = self.template.gammas()

    @property
    def d(self) -> int:
        return self.template.d

    def amplitudes(self, coeffs: np.ndarray) -> np.ndarray:
        """Map coefficient arrays (..., m, d-1) to amplitude vectors (..., m, d)."""
        return np.einsum("mdi,...mi->...md", self._gam, coeffs)

    def stationary_draw(self, seed: int, trajectory: int) -> np.ndarray:
        integ = self.integ
        z = integ.source(seed, trajectory).normals(0, 1)[0]
        full = np.zeros(integ.q.size)
        full[integ.forced] = z[: integ.n_noise]
        sd = np.where(integ.q > 0, integ.q / np.sqrt(2 * integ.lam), 0.0)
        return sd * full.reshape(integ.q.shape)

    def cursor(self, seed: int, trajectory: int) -> "PathCursor":
        return PathCursor(self, seed, trajectory)

    def chunks(self, seed: int, trajectory: int, n_steps: int, chunk: int = 20000):
        """Yield W arrays of shape (<= chunk, m, d) covering n_steps steps."""
        cur = self.cursor(seed, trajectory)
        done = 0
        while done < n_steps:
            m = min(chunk, n_steps - done)
            yield cur.take(m)
            done += m


class PathCursor:
    """Resumable position along one velocity trajectory.

    ``take(m)`` returns the next m frozen amplitude arrays. The state is a
    small dict of arrays, so a run can be checkpointed between calls and
    continued bit for bit.
    """

    def __init__(self, path: VelocityPath, seed: int, trajectory: int):
        self.path = path
        self.seed = seed
        self.trajectory = trajectory
        self.done = 0
        self._c = None
        self._fstate = None
        if path.frozen is None:
            self.src = path.integ.source(seed, trajectory)

    def _ensure_started(self):
        path = self.path
        if path.frozen is not None or self._c is not None or self._fstate is not None:
            return
        if path.cfg.linear:
            self._c = path.stationary_draw(self.seed, self.trajectory).ravel()
        else:
            integ = path.integ
            st = integ.initial()
            self._fstate = integ.run(st, int(round(path.burn_in / integ.dt)), self.src)

    def take(self, m: int) -> np.ndarray:
        path = self.path
        if path.frozen is not None:
            self.done += m
            W = path.frozen.amplitude_vectors()
            return np.broadcast_to(W, (m,) + W.shape)
        self._ensure_started()
        integ = path.integ
        if path.cfg.linear:
            c = self._c
            a = integ.decay.ravel()
            s = integ.noise_sd.ravel()
            fi = np.flatnonzero(integ.forced)
            xi = self.src.normals(1 + self.done, m)  # row j drives the update leaving step done + j
            out = np.zeros((m, c.size))
            for col, j in enumerate(fi):
                # row n holds the state at the start of step n: y_n = a y_{n-1} + s xi_{n-1}
                drive = np.empty(m)
                drive[0] = c[j]
                drive[1:] = s[j] * xi[:-1, col]
                out[:, j] = lfilter([1.0], [1.0, -a[j]], drive)
            c = np.zeros_like(c)
            c[fi] = a[fi] * out[-1, fi] + s[fi] * xi[-1, : len(fi)]
            self._c = c
            self.done += m
            return path.amplitudes(out.reshape((m,) + integ.q.shape))
        out = np.empty((m,) + integ.q.shape)
        state = self._fstate
        for j in range(m):
            out[j] = state.u.coeffs
            state = integ.run(state, 1, self.src)
        self._fstate = state
        self.done += m
        return path.amplitudes(out)

    def get_state(self) -> dict:
        self._ensure_started()
        st = {"done": np.array(self.done)}
        if self._c is not None:
            st["c"] = self._c.copy()
        if self._fstate is not None:
            st["coeffs"] = np.array(self._fstate.u.coeffs)
            st["t"] = np.array(self._fstate.t)
            st["step"] = np.array(self._fstate.step)
        return st

    def set_state(self, st: dict) -> None:
        self.done = int(st["done"])
        if "c" in st:
            self._c = np.array(st["c"], dtype=float)
        if "coeffs" in st:
            tmpl = self.path.integ.template
            self._fstate = FluidState(float(st["t"]), tmpl.with_coeffs(np.array(st["coeffs"])), int(st["step"]))

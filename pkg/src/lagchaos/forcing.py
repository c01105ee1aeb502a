"""Noise operators, counter-based Gaussian streams and exact OU updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import SpectralField, mode_ball, symmetric_closure

_PURPOSES = {"velocity": 1, "scalar": 2, "particles": 3, "control": 4, "misc": 5}
_U53 = 2.0**-53


def stream_key(seed: int, trajectory: int, purpose: str = "velocity") -> np.ndarray:
    """Philox key for a (seed, trajectory, purpose) triple."""
    tag = _PURPOSES.get(purpose)
    if tag is None:
        raise ValueError(f"unknown stream purpose {purpose!r}")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(trajectory), tag])
    return ss.generate_state(2, dtype=np.uint64)


def _normals_from_raw(raw: np.ndarray) -> np.ndarray:
    """Box-Muller on pairs of 64-bit words; len(raw) must be even."""
    a = ((raw[0::2] >> np.uint64(11)).astype(float) + 0.5) * _U53
    b = ((raw[1::2] >> np.uint64(11)).astype(float) + 0.5) * _U53
    r = np.sqrt(-2.0 * np.log(a))
    out = np.empty(len(raw))
    out[0::2] = r * np.cos(2 * np.pi * b)
    out[1::2] = r * np.sin(2 * np.pi * b)
    return out


@dataclass
class NoiseSource:
    """Standard normals indexed by (step, component) for one trajectory.

    Draws depend only on (seed, trajectory, purpose, step, component): the
    Philox counter is positioned at the requested step, so blocks can be
    generated in any order, resumed from a checkpoint, or split across workers.
    """

    seed: int
    trajectory: int
    n_components: int
    purpose: str = "velocity"
    _key: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("need at least one component")
        self._key = stream_key(self.seed, self.trajectory, self.purpose)

    @property
    def blocks_per_step(self) -> int:
        return (self.n_components + 3) // 4

    def normals(self, step0: int, n_steps: int) -> np.ndarray:
        """Array (n_steps, n_components) of N(0, 1) draws for steps step0, step0+1, ..."""
        if n_steps <= 0:
            return np.empty((0, self.n_components))
        bps = self.blocks_per_step
        bg = np.random.Philox(key=self._key, counter=np.array([step0 * bps, 0, 0, 0], dtype=np.uint64))
        raw = bg.random_raw(n_steps * bps * 4)
        z = _normals_from_raw(raw).reshape(n_steps, bps * 4)
        return z[:, : self.n_components]


@dataclass
class NoiseStream:
    """A single scalar Wiener stream keyed by (seed, trajectory, mode, component)."""

    seed: int
    trajectory: int
    mode: int
    component: int = 0
    counter: int = 0

    def _source(self) -> NoiseSource:
        # one independent source per (trajectory, mode, component)
        tid = (self.trajectory << 24) ^ (self.mode << 4) ^ self.component
        return NoiseSource(self.seed, tid, 1, "misc")

    def draw(self, n: int = 1) -> np.ndarray:
        z = self._source().normals(self.counter, n)[:, 0]
        self.counter += n
        return z


def wiener_increment(stream: NoiseStream, dt: float, n: int | None = None):
    """Brownian increment(s) over dt; advances the stream counter."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = stream.draw(1 if n is None else n) * np.sqrt(dt)
    return float(z[0]) if n is None else z


def ou_factors(lam, q, dt):
    """Decay factor and noise standard deviation of the exact OU transition."""
    lam = np.asarray(lam, dtype=float)
    decay = np.exp(-lam * dt)
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(lam > 0, -np.expm1(-2 * lam * dt) / (2 * np.where(lam > 0, lam, 1.0)), dt)
    return decay, np.asarray(q, dtype=float) * np.sqrt(var)


def ou_exact_step(z, lam, q, dt, xi):
    """z exp(-lam dt) + q sqrt((1 - exp(-2 lam dt)) / (2 lam)) xi, exact in law.

    ``xi`` is a standard normal draw (array or scalar) or a :class:`NoiseStream`.
    """
    if np.any(np.asarray(lam) <= 0):
        raise ValueError("OU rate must be positive")
    if isinstance(xi, NoiseStream):
        xi = xi.draw(np.size(z))
        xi = xi[0] if np.ndim(z) == 0 else xi.reshape(np.shape(z))
    decay, sd = ou_factors(lam, q, dt)
    return z * decay + sd * xi


# -- forcing specifications -----------------------------------------------------


@dataclass
class ForcingSpec:
    """Per-mode amplitudes q_k on a symmetric active set.

    Either give ``table`` ({k: q}) or a power law ``q_k = c |k|^-alpha`` on
    ``0 < |k|_inf <= kmax``. Flags request the low- and high-mode
    nondegeneracy checks in :meth:`check`.
    """

    d: int
    table: dict | None = None
    c: float = 1.0
    alpha: float | None = None
    kmax: int | None = None
    L: int = 1
    assumption_low_modes: bool = False
    assumption_high_modes: bool = False

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = 5 * self.d / 2 + 0.01
        if self.table is None and self.kmax is None:
            raise ValueError("forcing needs either a table or a power law with kmax")

    def amplitudes(self) -> tuple[np.ndarray, np.ndarray]:
        """(modes, q) on the symmetric closure of the active set (zeros dropped)."""
        if self.table is not None:
            keys = [tuple(int(c) for c in k) for k in self.table]
            modes = symmetric_closure(np.array(keys, dtype=np.int64).reshape(-1, self.d))
            tab = {k: float(v) for k, v in zip(keys, self.table.values())}
            q = []
            for k in modes.tolist():
                k = tuple(k)
                nk = tuple(-c for c in k)
                if k in tab and nk in tab and tab[k] != tab[nk]:
                    raise ValueError(f"inconsistent amplitudes for {k} and {nk}")
                q.append(tab.get(k, tab.get(nk, 0.0)))
            q = np.array(q)
        else:
            modes = mode_ball(self.d, self.kmax)
            q = self.c * np.linalg.norm(modes, axis=1) ** (-self.alpha)
        keep = q != 0
        return modes[keep], q[keep]

    def active_set(self) -> set:
        modes, _ = self.amplitudes()
        return {tuple(k) for k in modes.tolist()}

    def check(self) -> list[str]:
        """Problems with the requested assumptions (empty list means satisfied)."""
        problems = []
        modes, q = self.amplitudes()
        if len(modes) == 0:
            problems.append("forcing has no active modes")
            return problems
        active = {tuple(k) for k in modes.tolist()}
        if self.assumption_low_modes:
            missing = [k for k in mode_ball(self.d, 1).tolist() if tuple(k) not in active]
            if missing:
                problems.append(f"low-mode nondegeneracy fails; missing modes {missing}")
        if self.alpha <= 5 * self.d / 2 and (self.table is None or self.assumption_high_modes):
            problems.append(f"decay exponent alpha={self.alpha} must exceed 5d/2={5 * self.d / 2}")
        if self.assumption_high_modes:
            if self.table is not None:
                problems.append("high-mode nondegeneracy needs the power-law family")
            elif self.kmax is not None and self.kmax < self.L:
                problems.append(f"kmax={self.kmax} below cutoff L={self.L}")
        return problems


def stokes_remark_forcing(q: float = 1.0) -> ForcingSpec:
    """Minimal 2D set {+-(1,0), +-(0,1)} with equal amplitudes."""
    return ForcingSpec(d=2, table={(1, 0): q, (0, 1): q, (-1, 0): q, (0, -1): q})


@dataclass(frozen=True)
class ScalarForcing:
    """Scalar source sum_k q_k ehat_k dW_k with ehat_k = sqrt(2) e_k of unit mean square."""

    d: int
    modes: np.ndarray
    q: np.ndarray
    epsilon_bar: float

    def coefficient_amplitudes(self) -> np.ndarray:
        """Noise amplitude per e_k coefficient."""
        return np.sqrt(2.0) * self.q


def build_scalar_forcing(spec: ForcingSpec | dict) -> ScalarForcing:
    """Forcing table and injection rate epsilon_bar = 1/2 sum q_k^2.

    A :class:`ForcingSpec` is read on its symmetric active set. A plain
    ``{k: q}`` dict forces exactly the listed basis functions, which need not
    be closed under k -> -k (each e_k carries its own Wiener process).
    """
    if isinstance(spec, dict):
        keys = [tuple(int(c) for c in k) for k in spec]
        if not keys:
            raise ValueError("scalar forcing needs at least one active mode")
        if any(not any(k) for k in keys):
            raise ValueError("zero wavevector has no basis function")
        d = len(keys[0])
        q = np.array([float(v) for v in spec.values()])
        modes = np.array(keys, dtype=np.int64).reshape(-1, d)
        keep = q != 0
        modes, q = modes[keep], q[keep]
    else:
        d = spec.d
        modes, q = spec.amplitudes()
    if len(modes) == 0:
        raise ValueError("scalar forcing needs at least one active mode")
    k2 = np.sum(modes.astype(float) ** 2, axis=1)
    if not np.isfinite(np.sum(k2 * q**2)):
        raise ValueError("sum |k|^2 q_k^2 must be finite")
    return ScalarForcing(d, modes, q, 0.5 * float(np.sum(q**2)))


def velocity_injection_rate(spec: ForcingSpec) -> float:
    """d/dt of the mean square velocity injected by the noise: 1/2 sum (d-1) q_k^2."""
    _, q = spec.amplitudes()
    return 0.5 * (spec.d - 1) * float(np.sum(q**2))


def forcing_field(spec: ForcingSpec) -> SpectralField:
    """Per-coefficient noise amplitudes laid out as a velocity field."""
    modes, q = spec.amplitudes()
    f = SpectralField.zeros(spec.d, modes)
    idx = f.index()
    c = np.zeros_like(f.coeffs)
    for k, a in zip(modes.tolist(), q):
        c[idx[tuple(k)]] = a
    return f.with_coeffs(c)

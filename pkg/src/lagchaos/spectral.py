"""Real Fourier basis on the periodic box and divergence-free spectral fields.

Fields are stored as real coefficients on the basis

    e_k(x) = sin(k.x)   for k in Z^d_+
    e_k(x) = cos(k.x)   for k in Z^d_-

with velocity fields expanded as ``u = sum_k sum_i c[k, i] e_k gamma_k^i`` where
the columns ``gamma_k^i`` are an orthonormal basis of the plane orthogonal to k.
Both halves (k and -k) are stored explicitly since e_k and e_{-k} are distinct
basis functions.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

TWO_PI = 2.0 * np.pi


class ModeSetOverflowError(ValueError):
    """Raised when a quadratic product escapes the mode set of its input."""


def norm_const(d: int) -> float:
    """Squared L2 norm of a single basis function e_k gamma_k^i, pi (2 pi)^(d-1)."""
    return np.pi * TWO_PI ** (d - 1)


def is_positive(k) -> bool:
    """Membership of a nonzero integer vector in Z^d_+.

    k_d > 0, or k_d = 0 and k_1 > 0; for d = 3 vectors with k_1 = k_3 = 0 are
    decided by the sign of k_2 so that Z^d_0 splits into Z^d_+ and -Z^d_+.
    """
    k = tuple(int(c) for c in k)
    if not any(k):
        raise ValueError("zero wavevector has no basis function")
    if k[-1] != 0:
        return k[-1] > 0
    if k[0] != 0:
        return k[0] > 0
    for c in k[1:-1]:
        if c != 0:
            return c > 0
    raise AssertionError("unreachable")


def positive_mask(modes: np.ndarray) -> np.ndarray:
    modes = np.asarray(modes)
    return np.array([is_positive(k) for k in modes], dtype=bool)


def basis_eval(k, x) -> np.ndarray | float:
    """Evaluate e_k at one point or an array of points of shape (..., d)."""
    k = np.asarray(k, dtype=float)
    if not np.any(k):
        raise ValueError("zero wavevector has no basis function")
    phase = np.asarray(x, dtype=float) @ k
    return np.sin(phase) if is_positive(k) else np.cos(phase)


@lru_cache(maxsize=4096)
def _frame_positive(k: tuple) -> np.ndarray:
    kv = np.array(k, dtype=float)
    if len(k) == 2:
        g = np.array([[-kv[1]], [kv[0]]]) / np.linalg.norm(kv)
        return g
    a = np.array([0.0, 0.0, 1.0])
    if kv[0] == 0 and kv[1] == 0:
        a = np.array([1.0, 0.0, 0.0])
    g1 = np.cross(kv, a)
    g1 /= np.linalg.norm(g1)
    g2 = np.cross(kv, g1)
    g2 /= np.linalg.norm(g2)
    return np.column_stack([g1, g2])


def gamma_frame(k) -> np.ndarray:
    """The d x (d-1) matrix gamma_k with orthonormal columns orthogonal to k.

    Frames are computed for the Z^d_+ representative and negated on Z^d_- so
    that gamma_{-k} = -gamma_k.
    """
    k = tuple(int(c) for c in k)
    if is_positive(k):
        return _frame_positive(k).copy()
    return -_frame_positive(tuple(-c for c in k))


def mode_ball(d: int, n: int) -> np.ndarray:
    """All nonzero k with |k|_inf <= n, ordered lexicographically."""
    rng = range(-n, n + 1)
    modes = [k for k in itertools.product(rng, repeat=d) if any(k)]
    return np.array(modes, dtype=np.int64).reshape(-1, d)


def symmetric_closure(modes) -> np.ndarray:
    """Sorted union of ``modes`` and ``-modes`` (zero excluded)."""
    modes = np.asarray(modes, dtype=np.int64)
    if modes.ndim != 2:
        raise ValueError("modes must be an (m, d) integer array")
    allm = {tuple(int(c) for c in k) for k in modes} | {tuple(-int(c) for c in k) for k in modes}
    allm.discard(tuple([0] * modes.shape[1]))
    return np.array(sorted(allm), dtype=np.int64).reshape(-1, modes.shape[1])


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Real-basis coefficient table over a finite, negation-closed mode set.

    ``coeffs`` has shape (m, d-1) for a velocity field and (m,) for a scalar.
    """

    d: int
    modes: np.ndarray
    coeffs: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=np.int64).reshape(-1, self.d)
        coeffs = np.asarray(self.coeffs, dtype=float)
        if self.d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.d}")
        if np.any(np.all(modes == 0, axis=1)):
            raise ValueError("mode set contains the zero wavevector")
        keys = {tuple(k) for k in modes}
        if len(keys) != len(modes):
            raise ValueError("duplicate wavevectors in mode set")
        if any(tuple(-c for c in k) not in keys for k in keys):
            raise ValueError("mode set must be closed under negation")
        if coeffs.shape not in ((len(modes),), (len(modes), self.d - 1)):
            raise ValueError(f"coeffs shape {coeffs.shape} incompatible with {len(modes)} modes")
        modes.setflags(write=False)
        coeffs = coeffs.copy()
        coeffs.setflags(write=False)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "coeffs", coeffs)

    # -- construction -----------------------------------------------------
    @classmethod
    def zeros(cls, d: int, modes, scalar: bool = False) -> "SpectralField":
        modes = symmetric_closure(modes)
        shape = (len(modes),) if scalar else (len(modes), d - 1)
        return cls(d, modes, np.zeros(shape))

    @classmethod
    def from_dict(cls, d: int, table: dict, scalar: bool = False) -> "SpectralField":
        """Build from ``{k: value}``; missing negations are added with zero."""
        modes = symmetric_closure(np.array(list(table.keys()), dtype=np.int64).reshape(-1, d))
        index = {tuple(k): i for i, k in enumerate(modes)}
        shape = (len(modes),) if scalar else (len(modes), d - 1)
        coeffs = np.zeros(shape)
        for k, val in table.items():
            coeffs[index[tuple(int(c) for c in k)]] = val
        return cls(d, modes, coeffs)

    def with_coeffs(self, coeffs) -> "SpectralField":
        return SpectralField(self.d, self.modes, coeffs)

    # -- properties ---------------------------------------------------------
    @property
    def is_scalar(self) -> bool:
        return self.coeffs.ndim == 1

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def index(self) -> dict:
        if "index" not in self._cache:
            self._cache["index"] = {tuple(int(c) for c in k): i for i, k in enumerate(self.modes)}
        return self._cache["index"]

    def positive(self) -> np.ndarray:
        if "pos" not in self._cache:
            self._cache["pos"] = positive_mask(self.modes)
        return self._cache["pos"]

    def gammas(self) -> np.ndarray:
        """Array (m, d, d-1) of frames."""
        if "gam" not in self._cache:
            self._cache["gam"] = np.array([gamma_frame(k) for k in self.modes]).reshape(
                self.n_modes, self.d, self.d - 1
            )
        return self._cache["gam"]

    def pair_index(self) -> np.ndarray:
        """For each mode the row index of its negation."""
        if "neg" not in self._cache:
            idx = self.index()
            self._cache["neg"] = np.array([idx[tuple(-int(c) for c in k)] for k in self.modes])
        return self._cache["neg"]

    def amplitude_vectors(self) -> np.ndarray:
        """W[m] = sum_i c[m, i] gamma_m^i, shape (m, d); velocity only."""
        if self.is_scalar:
            raise TypeError("scalar field has no vector amplitudes")
        return np.einsum("mdi,mi->md", self.gammas(), self.coeffs)

    def k_squared(self) -> np.ndarray:
        return np.sum(self.modes.astype(float) ** 2, axis=1)

    def max_mode(self) -> int:
        return int(np.max(np.abs(self.modes))) if self.n_modes else 0

    # -- norms --------------------------------------------------------------
    def mean_square(self) -> float:
        """Spatial average of |u|^2 (or g^2): half the sum of squared coefficients."""
        return 0.5 * float(np.sum(self.coeffs**2))

    def mean_square_gradient(self) -> float:
        c2 = self.coeffs**2 if self.is_scalar else np.sum(self.coeffs**2, axis=1)
        return 0.5 * float(np.sum(self.k_squared() * c2))

    def l2_squared(self) -> float:
        """Unnormalized integral of |u|^2 over the box."""
        return float(np.sum(self.coeffs**2)) * norm_const(self.d)

    # -- algebra ------------------------------------------------------------
    def __add__(self, other: "SpectralField") -> "SpectralField":
        if other.d != self.d or other.is_scalar != self.is_scalar:
            raise ValueError("incompatible fields")
        if np.array_equal(self.modes, other.modes):
            return self.with_coeffs(self.coeffs + other.coeffs)
        return reindex(self, np.vstack([self.modes, other.modes])).__add__(
            reindex(other, np.vstack([self.modes, other.modes]))
        )

    def __mul__(self, s: float) -> "SpectralField":
        return self.with_coeffs(self.coeffs * s)

    __rmul__ = __mul__

    def __sub__(self, other):
        return self + (-1.0) * other

    # -- serialization ------------------------------------------------------
    def to_json(self) -> str:
        return json.dumps(
            {
                "d": self.d,
                "kind": "scalar" if self.is_scalar else "velocity",
                "modes": self.modes.tolist(),
                "coeffs": self.coeffs.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SpectralField":
        obj = json.loads(text) if isinstance(text, str) else text
        modes = np.array(obj["modes"], dtype=np.int64).reshape(-1, obj["d"])
        return cls(obj["d"], modes, np.array(obj["coeffs"], dtype=float))


def reindex(f: SpectralField, modes) -> SpectralField:
    """Express ``f`` on the (symmetric closure of the) union with ``modes``."""
    modes = symmetric_closure(np.vstack([f.modes, np.asarray(modes).reshape(-1, f.d)]))
    index = {tuple(int(c) for c in k): i for i, k in enumerate(modes)}
    shape = (len(modes),) + f.coeffs.shape[1:]
    coeffs = np.zeros(shape)
    rows = [index[tuple(int(c) for c in k)] for k in f.modes]
    coeffs[rows] = f.coeffs
    return SpectralField(f.d, modes, coeffs)


def restrict(f: SpectralField, modes) -> SpectralField:
    """Keep the coefficients on ``modes`` only (Galerkin projection)."""
    modes = symmetric_closure(modes)
    idx = f.index()
    shape = (len(modes),) + f.coeffs.shape[1:]
    coeffs = np.zeros(shape)
    for j, k in enumerate(modes):
        i = idx.get(tuple(int(c) for c in k))
        if i is not None:
            coeffs[j] = f.coeffs[i]
    return SpectralField(f.d, modes, coeffs)


# -- pointwise evaluation -------------------------------------------------------


def _basis_tables(f: SpectralField, x: np.ndarray):
    phase = x @ f.modes.T.astype(float)
    s, c = np.sin(phase), np.cos(phase)
    pos = f.positive()
    e = np.where(pos, s, c)
    e_neg = np.where(pos, c, -s)
    return e, e_neg


def eval_scalar(g: SpectralField, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    e, _ = _basis_tables(g, x)
    return e @ g.coeffs


def eval_scalar_gradient(g: SpectralField, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _, en = _basis_tables(g, x)
    return (en * g.coeffs) @ g.modes.astype(float)


def eval_velocity(u: SpectralField, x) -> np.ndarray:
    """u(x) by direct summation; x of shape (d,) or (n, d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    e, _ = _basis_tables(u, np.atleast_2d(x))
    out = e @ u.amplitude_vectors()
    return out[0] if single else out


def eval_gradient(u: SpectralField, x) -> np.ndarray:
    """Matrix (grad u)[l, j] = d u_l / d x_j at x; shape (d, d) or (n, d, d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    _, en = _basis_tables(u, np.atleast_2d(x))
    w = u.amplitude_vectors()
    out = np.einsum("nm,ml,mj->nlj", en, w, u.modes.astype(float))
    return out[0] if single else out


# -- complex / grid conversions -----------------------------------------------


def complex_coefficients(f: SpectralField) -> tuple[np.ndarray, np.ndarray]:
    """Complex exponential coefficients ``fhat`` with f(x) = sum fhat_k exp(i k.x).

    Returns (modes, fhat) over the same (symmetric) mode list; fhat has shape
    (m,) for scalars and (m, d) for velocities.
    """
    pos = f.positive()
    neg = f.pair_index()
    if f.is_scalar:
        a = f.coeffs  # sin part lives on k in Z+, cos part on -k
        sin_part = np.where(pos, a, a[neg])
        cos_part = np.where(pos, a[neg], a)
        fh = np.where(pos, (cos_part - 1j * sin_part) / 2, (cos_part + 1j * sin_part) / 2)
        return f.modes, fh
    gam = f.gammas()
    c = f.coeffs
    # for k in Z+: uhat_k = sum_i gamma_k^i (-c_{-k,i} - i c_{k,i}) / 2
    s_pos = (-c[neg] - 1j * c) / 2.0
    uh_pos = np.einsum("mdi,mi->md", gam, s_pos)
    uh = np.where(pos[:, None], uh_pos, np.conj(uh_pos[neg]))
    return f.modes, uh


def from_complex(d: int, modes, fhat, scalar: bool) -> SpectralField:
    """Inverse of :func:`complex_coefficients`; velocities are Leray-projected."""
    modes = np.asarray(modes, dtype=np.int64).reshape(-1, d)
    tmp = SpectralField.zeros(d, modes, scalar=scalar)
    # align to tmp ordering
    lookup = {tuple(int(c) for c in k): i for i, k in enumerate(modes)}
    order = np.array([lookup[tuple(int(c) for c in k)] for k in tmp.modes])
    fhat = np.asarray(fhat)[order]
    pos = tmp.positive()
    neg = tmp.pair_index()
    if scalar:
        c = np.empty(tmp.n_modes)
        fp = np.where(pos, fhat, fhat[neg])
        # k in Z+: g_k = -2 Im fhat_k ; g_{-k} = 2 Re fhat_k
        c[pos] = -2.0 * fp[pos].imag
        c[~pos] = 2.0 * fp[~pos].real
        return tmp.with_coeffs(c)
    gam = tmp.gammas()
    s = np.einsum("mdi,md->mi", gam, fhat)  # projection onto gamma_k (Leray)
    c = np.empty((tmp.n_modes, d - 1))
    c[pos] = -2.0 * s[pos].imag
    c[neg[pos]] = -2.0 * s[pos].real
    return tmp.with_coeffs(c)


def grid_size_for(n_max: int, dealias: bool = True) -> int:
    """Even FFT size resolving quadratic products of modes |k|_inf <= n_max exactly."""
    n = 3 * n_max + 2 if dealias else 2 * n_max + 2
    return n + (n % 2)


def to_grid_hat(f: SpectralField, n: int) -> np.ndarray:
    """Place complex coefficients into an FFT-ordered array of side n."""
    if 2 * f.max_mode() >= n:
        raise ValueError(f"grid of size {n} cannot hold modes up to {f.max_mode()}")
    modes, fh = complex_coefficients(f)
    shape = (n,) * f.d
    idx = tuple((modes % n).T)
    if f.is_scalar:
        out = np.zeros(shape, dtype=complex)
        out[idx] = fh
        return out
    out = np.zeros((f.d,) + shape, dtype=complex)
    for j in range(f.d):
        out[j][idx] = fh[:, j]
    return out


def from_grid_hat(hat: np.ndarray, d: int, modes, scalar: bool) -> SpectralField:
    n = hat.shape[-1]
    modes = symmetric_closure(modes)
    idx = tuple((modes % n).T)
    fh = hat[idx] if scalar else np.stack([hat[j][idx] for j in range(d)], axis=-1)
    return from_complex(d, modes, fh, scalar)


def to_physical(f: SpectralField, n: int) -> np.ndarray:
    """Values on the uniform n^d grid x_j = 2 pi j / n."""
    hat = to_grid_hat(f, n)
    axes = tuple(range(-f.d, 0))
    return np.real(np.fft.ifftn(hat, axes=axes) * n**f.d)


def project_physical(values: np.ndarray, d: int, modes, scalar: bool) -> SpectralField:
    """Coefficients of grid samples on ``modes`` (exact for resolved trigonometric data)."""
    n = values.shape[-1]
    axes = tuple(range(-d, 0))
    hat = np.fft.fftn(values, axes=axes) / n**d
    return from_grid_hat(hat, d, modes, scalar)


def grid_points(d: int, n: int) -> np.ndarray:
    """Grid coordinates with shape (n,)*d + (d,)."""
    x = TWO_PI * np.arange(n) / n
    return np.stack(np.meshgrid(*([x] * d), indexing="ij"), axis=-1)


# -- operators ----------------------------------------------------------------


def apply_dissipation(u: SpectralField, nu: float, eta: float, dt: float) -> SpectralField:
    """Multiply each mode by exp(-(nu |k|^2 + eta |k|^4) dt)."""
    if nu < 0 or eta < 0 or dt < 0:
        raise ValueError("nu, eta and dt must be non-negative")
    k2 = u.k_squared()
    fac = np.exp(-(nu * k2 + eta * k2**2) * dt)
    return u.with_coeffs(u.coeffs * (fac if u.is_scalar else fac[:, None]))


def divergence(u: SpectralField, x) -> np.ndarray:
    return np.trace(eval_gradient(u, np.atleast_2d(x)), axis1=1, axis2=2)


def _triad_convolution(u: SpectralField):
    """Complex coefficients of (u.grad)u on the full product support, by mode pairs."""
    modes, uh = complex_coefficients(u)
    kf = modes.astype(float)
    # w_k = sum_{p+q=k} (uhat_p . i q) uhat_q
    coef = 1j * (uh @ kf.T)  # [p, q] = uhat_p . i q
    sums = (modes[:, None, :] + modes[None, :, :]).reshape(-1, u.d)
    contrib = (coef[:, :, None] * uh[None, :, :]).reshape(-1, u.d)
    keep = np.any(sums != 0, axis=1)
    sums, contrib = sums[keep], contrib[keep]
    uniq, inv = np.unique(sums, axis=0, return_inverse=True)
    out = np.zeros((len(uniq), u.d), dtype=complex)
    np.add.at(out, inv.ravel(), contrib)
    return uniq, out


def euler_nonlinearity(
    u: SpectralField, target=None, method: str = "triad", allow_growth: bool = False
) -> SpectralField:
    """Leray-projected convective term B(u, u) restricted to a target mode set.

    ``target`` may be an integer N (the ball |k|_inf <= N), a mode array, or
    None for the input's own mode set. With ``target=None`` a product that
    leaves the mode set raises :class:`ModeSetOverflowError` unless
    ``allow_growth`` is set, in which case the full product support is kept.
    """
    if u.is_scalar:
        raise TypeError("B(u, u) needs a velocity field")
    if target is None:
        tmodes = u.modes
    elif np.isscalar(target):
        tmodes = mode_ball(u.d, int(target))
    else:
        tmodes = symmetric_closure(target)
    if method == "collocation":
        if target is None and allow_growth:
            raise ValueError("collocation path needs a bounded target")
        return _nonlinearity_collocation(u, tmodes)
    if method != "triad":
        raise ValueError(f"unknown method {method!r}")
    support, wh = _triad_convolution(u)
    if target is None:
        tset = {tuple(k) for k in tmodes.tolist()}
        outside = [i for i, k in enumerate(support.tolist()) if tuple(k) not in tset]
        if outside:
            # only the divergence-free part counts as overflow
            escaped = from_complex(u.d, support[outside], wh[outside], scalar=False)
            mag = float(np.max(np.abs(escaped.coeffs)))
            scale = max(float(np.max(np.abs(u.coeffs))) ** 2, 1e-300)
            if mag > 1e-12 * scale:
                if not allow_growth:
                    raise ModeSetOverflowError(
                        f"B(u,u) has {len(outside)} modes outside the input set; supply a target"
                    )
                tmodes = support
    lookup = {tuple(k): i for i, k in enumerate(support.tolist())}
    th = np.zeros((len(tmodes), u.d), dtype=complex)
    for j, k in enumerate(tmodes.tolist()):
        i = lookup.get(tuple(k))
        if i is not None:
            th[j] = wh[i]
    return from_complex(u.d, tmodes, th, scalar=False)


def _nonlinearity_collocation(u: SpectralField, tmodes: np.ndarray) -> SpectralField:
    n = grid_size_for(max(u.max_mode(), 1))
    n = max(n, 2 * int(np.max(np.abs(tmodes))) + 2)
    uh = to_grid_hat(u, n)
    d = u.d
    axes = tuple(range(-d, 0))
    kv = np.fft.fftfreq(n, 1.0 / n)
    kgrid = np.meshgrid(*([kv] * d), indexing="ij")
    scale = n**d
    uphys = np.real(np.fft.ifftn(uh, axes=axes)) * scale
    adv = np.zeros_like(uphys)
    for j in range(d):
        dj = np.real(np.fft.ifftn(1j * kgrid[j] * uh, axes=axes)) * scale  # d_j u (all components)
        adv += uphys[j] * dj
    wh = np.fft.fftn(adv, axes=axes) / scale
    return from_grid_hat(wh, d, tmodes, scalar=False)


def bilinear_nonlinearity(a: SpectralField, b: SpectralField, target) -> SpectralField:
    """Symmetrised B(a, b) + B(b, a) on ``target`` via polarisation."""
    s = a + b
    r = a - b
    bs = euler_nonlinearity(s, target=target)
    br = euler_nonlinearity(r, target=target)
    return (bs - br) * 0.5


def inner(u: SpectralField, w: SpectralField) -> float:
    """L2 inner product of two fields over the box."""
    idx = w.index()
    total = 0.0
    for i, k in enumerate(u.modes.tolist()):
        j = idx.get(tuple(k))
        if j is not None:
            total += float(np.sum(u.coeffs[i] * w.coeffs[j]))
    return total * norm_const(u.d)

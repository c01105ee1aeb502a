"""Two-point statistics of the stationary scalar, the KHM balance and Yaglom's law.

Sphere averages of homogeneous two-point quantities are evaluated from
their Fourier coefficients with the identities (d = 3; in d = 2 replace the
spherical Bessel functions j_n by J_n)

    avg_n exp(i l k.n)     = j0(|k| l)
    avg_n n exp(i l k.n)   = i khat j1(|k| l)

which makes the sphere averages exact for band-limited fields. A direct
Monte-Carlo path (base points x directions) is kept for arbitrary
snapshots and as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .forcing import ScalarForcing
from .spectral import SpectralField, eval_scalar, eval_velocity

TWO_PI = 2 * np.pi


def _bessel(d: int, order: int, z: np.ndarray, derivative: bool = False) -> np.ndarray:
    if d == 3:
        return special.spherical_jn(order, z, derivative=derivative)
    return special.jvp(order, z) if derivative else special.jv(order, z)


def source_profile(forcing: ScalarForcing, ell: np.ndarray) -> np.ndarray:
    """Sphere-averaged source covariance a(l) = 1/2 sum q_k^2 avg_n cos(l k.n); a(0) = epsilon_bar."""
    ell = np.asarray(ell, dtype=float)
    kn = np.linalg.norm(forcing.modes, axis=1)
    return 0.5 * np.sum(forcing.q[:, None] ** 2 * _bessel(forcing.d, 0, kn[:, None] * ell[None]), axis=0)


def source_term(forcing: ScalarForcing, ell: np.ndarray) -> np.ndarray:
    """S(l) = (4 / l^(d-1)) int_0^l s^(d-1) a(s) ds, the injection part of the integrated KHM ODE."""
    ell = np.asarray(ell, dtype=float)
    kn = np.linalg.norm(forcing.modes, axis=1)[:, None]
    L = ell[None]
    with np.errstate(invalid="ignore", divide="ignore"):
        if forcing.d == 3:
            z = kn * L
            inner = np.where(z > 1e-4, (np.sin(z) - z * np.cos(z)) / kn**3, L**3 / 3 - kn**2 * L**5 / 30)
            prof = 4 * inner / np.where(L > 0, L**2, 1.0)
        else:
            prof = 4 * L * special.j1(kn * L) / kn / np.where(L > 0, L, 1.0)
            prof = np.where(L > 0, prof, 0.0)
    prof = np.where(L > 0, prof, 0.0)
    return 0.5 * np.sum(forcing.q[:, None] ** 2 * prof, axis=0)


@dataclass
class SpectralStats:
    """Time-averaged spectral statistics binned by |k|^2.

    ``G_shell[s]`` is sum of E|g_k|^2 over the shell |k|^2 = s and
    ``D_shell[s]`` is sum of Re(i Dhat_k . khat), so that
    G(l) = sum_s G_shell[s] j0(sqrt(s) l) and D(l) = sum_s D_shell[s] j1(sqrt(s) l).
    """

    d: int
    k2: np.ndarray
    G_shell: np.ndarray
    D_shell: np.ndarray

    @classmethod
    def from_arrays(cls, d: int, kvec: np.ndarray, power: np.ndarray, flux: np.ndarray | None) -> "SpectralStats":
        k2 = np.sum(kvec.astype(float) ** 2, axis=0)
        ki = np.rint(k2).astype(np.int64).ravel()
        nonzero = ki > 0
        kn = np.sqrt(np.where(k2 > 0, k2, 1.0))
        G_shell = np.bincount(ki[nonzero], weights=power.ravel()[nonzero])
        if flux is None:
            D_shell = np.zeros_like(G_shell)
        else:
            proj = np.sum(flux * kvec[: flux.shape[0]], axis=0) / kn  # Dhat . khat
            vals = np.real(1j * proj).ravel()
            D_shell = np.bincount(ki[nonzero], weights=vals[nonzero], minlength=len(G_shell))
        shells = np.flatnonzero((G_shell != 0) | (D_shell != 0))
        shells = shells[shells > 0]
        return cls(d, shells.astype(float), G_shell[shells], D_shell[shells])

    def _z(self, ell):
        return np.sqrt(self.k2)[:, None] * np.asarray(ell, dtype=float)[None]

    def G(self, ell):
        return self.G_shell @ _bessel(self.d, 0, self._z(ell))

    def dG(self, ell):
        kn = np.sqrt(self.k2)
        return -(self.G_shell * kn) @ _bessel(self.d, 1, self._z(ell))

    def d2G(self, ell):
        kn = np.sqrt(self.k2)
        return -(self.G_shell * kn**2) @ _bessel(self.d, 1, self._z(ell), derivative=True)

    def D(self, ell):
        return self.D_shell @ _bessel(self.d, 1, self._z(ell))


@dataclass
class StructureFunctionTable:
    """Radial profiles with standard errors over batches (or snapshots)."""

    d: int
    ell: np.ndarray
    D: np.ndarray
    D_se: np.ndarray
    G: np.ndarray
    G_se: np.ndarray
    a: np.ndarray
    dG: np.ndarray | None = None
    dG_se: np.ndarray | None = None
    source: np.ndarray | None = None
    kappa: float | None = None
    epsilon_bar: float | None = None

    def compensated(self) -> np.ndarray:
        return self.D / (self.ell * self.epsilon_bar)

    def rows(self):
        """CSV rows (l, D, SE, G, a, D / (l eps))."""
        comp = self.compensated()
        return [
            (float(l), float(dv), float(se), float(g), float(a), float(c))
            for l, dv, se, g, a, c in zip(self.ell, self.D, self.D_se, self.G, self.a, comp)
        ]


def table_from_batches(batches: list[SpectralStats], forcing: ScalarForcing, ell, kappa: float) -> StructureFunctionTable:
    ell = np.asarray(ell, dtype=float)
    Ds = np.array([b.D(ell) for b in batches])
    Gs = np.array([b.G(ell) for b in batches])
    dGs = np.array([b.dG(ell) for b in batches])
    nb = len(batches)
    se = (lambda X: X.std(axis=0, ddof=1) / np.sqrt(nb)) if nb > 1 else (lambda X: np.zeros(X.shape[1]))
    return StructureFunctionTable(
        forcing.d, ell, Ds.mean(0), se(Ds), Gs.mean(0), se(Gs), source_profile(forcing, ell),
        dGs.mean(0), se(dGs), source_term(forcing, ell), kappa, forcing.epsilon_bar,
    )


def tables_from_run(result, forcing: ScalarForcing, ell, kvec: np.ndarray):
    """Per-batch spectral statistics and the averaged table of a stationary scalar run."""
    batches = [SpectralStats.from_arrays(result.d, kvec, p, f) for p, f in zip(result.batch_power, result.batch_flux)]
    return batches, table_from_batches(batches, forcing, ell, result.kappa)


# -- Monte-Carlo path ---------------------------------------------------------------------


def sphere_directions(d: int, n: int) -> np.ndarray:
    """Equispaced circle directions (d = 2) or a Fibonacci sphere (d = 3)."""
    if d == 2:
        th = TWO_PI * np.arange(n) / n
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z**2)
    phi = np.pi * (1 + 5**0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def structure_functions(snapshots, ell, n_dirs: int = 64, n_base: int = 256, seed: int = 0,
                        forcing: ScalarForcing | None = None, base_points: np.ndarray | None = None
                        ) -> StructureFunctionTable:
    """Monte-Carlo D(l) and G(l) from (u, g) snapshots by exact point evaluation.

    Base points are uniform (or given), directions are a fixed quadrature
    set. Standard errors are taken across snapshots, or across base points
    when a single snapshot is supplied.
    """
    snapshots = list(snapshots)
    ell = np.asarray(ell, dtype=float)
    d = snapshots[0][1].d
    rng = np.random.default_rng([seed, 31])
    dirs = sphere_directions(d, n_dirs)
    per_D, per_G = [], []
    for u, g in snapshots:
        x = rng.uniform(0, TWO_PI, (n_base, d)) if base_points is None else np.asarray(base_points, dtype=float)
        g0 = eval_scalar(g, x)
        u0 = eval_velocity(u, x)
        Drow = np.empty((len(x), len(ell)))
        Grow = np.empty((len(x), len(ell)))
        for j, l in enumerate(ell):
            y = (x[:, None, :] + l * dirs[None]).reshape(-1, d)
            g1 = eval_scalar(g, y).reshape(len(x), n_dirs)
            u1 = eval_velocity(u, y).reshape(len(x), n_dirs, d)
            dun = np.einsum("bnd,nd->bn", u1 - u0[:, None, :], dirs)
            Drow[:, j] = np.mean((g1 - g0[:, None]) ** 2 * dun, axis=1)
            Grow[:, j] = np.mean(g0[:, None] * g1, axis=1)
        per_D.append(Drow)
        per_G.append(Grow)
    if len(snapshots) > 1:
        Dm = np.array([r.mean(0) for r in per_D])
        Gm = np.array([r.mean(0) for r in per_G])
    else:
        Dm, Gm = per_D[0], per_G[0]
    n = Dm.shape[0]
    a = source_profile(forcing, ell) if forcing is not None else np.full(len(ell), np.nan)
    return StructureFunctionTable(
        d, ell, Dm.mean(0), Dm.std(0, ddof=1) / np.sqrt(n), Gm.mean(0), Gm.std(0, ddof=1) / np.sqrt(n), a,
        source=source_term(forcing, ell) if forcing is not None else None,
        epsilon_bar=forcing.epsilon_bar if forcing is not None else None,
    )


# -- KHM -----------------------------------------------------------------------------


def bump(R: float):
    """phi(r) = (1 - (r/R)^2)^3 on r < R with its first two derivatives."""

    def phi(r):
        s = np.clip(1 - (r / R) ** 2, 0, None)
        return s**3

    def dphi(r):
        s = np.clip(1 - (r / R) ** 2, 0, None)
        return -6 * r / R**2 * s**2

    def d2phi(r):
        s = np.clip(1 - (r / R) ** 2, 0, None)
        return -6 / R**2 * s**2 + 24 * r**2 / R**4 * s

    def lap_over(r, d):
        # phi'' + (d-1) phi'/r, finite at r = 0
        s = np.clip(1 - (r / R) ** 2, 0, None)
        return d2phi(r) - 6 * (d - 1) / R**2 * s**2

    return phi, dphi, d2phi, lap_over


def khm_terms(d: int, D, G, a, kappa: float, R: float, n_quad: int = 256):
    """Radial quadratures (flux, diffusion, source) of the weak KHM identity.

    ``D``, ``G`` and ``a`` are callables of the radius. The common factor
    |S^{d-1}| is dropped.
    """
    if R > np.pi:
        raise ValueError("test-function support exceeds the box half-width")
    r, w = np.polynomial.legendre.leggauss(n_quad)
    r = 0.5 * R * (r + 1)
    w = 0.5 * R * w
    phi, dphi, _, lap = bump(R)
    jac = r ** (d - 1)
    flux = 0.5 * np.sum(w * jac * dphi(r) * D(r))
    diff = 2 * kappa * np.sum(w * jac * lap(r, d) * G(r))
    src = 2 * np.sum(w * jac * phi(r) * a(r))
    return flux, diff, src


def khm_residual(ell, D, G, a, kappa: float, R: float, d: int) -> float:
    """Normalised residual (1/2 int grad eta.D - 2 kappa int Lap eta G - 2 int eta a) / (2 int eta a).

    Tabulated profiles on ``ell`` are interpolated by cubic splines; use a
    fine grid covering [0, R].
    """
    from scipy.interpolate import CubicSpline

    ell = np.asarray(ell, dtype=float)
    if R > np.pi:
        raise ValueError("test-function support exceeds the box half-width")
    if ell[-1] < R:
        raise ValueError("profiles must cover [0, R]")
    f = [CubicSpline(ell, np.asarray(v, dtype=float)) for v in (D, G, a)]
    flux, diff, src = khm_terms(d, f[0], f[1], f[2], kappa, R)
    return (flux - diff - src) / src


def khm_residual_spectral(batches: list[SpectralStats], forcing: ScalarForcing, kappa: float, R: float) -> dict:
    """KHM residual per batch of exact spectral statistics, with its standard error."""
    a = lambda r: source_profile(forcing, r)
    vals = []
    for b in batches:
        flux, diff, src = khm_terms(forcing.d, b.D, b.G, a, kappa, R)
        vals.append((flux - diff - src) / src)
    vals = np.array(vals)
    se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else float("nan")
    mean = float(vals.mean())
    return {"residual": mean, "se": se, "per_batch": vals.tolist(),
            "within_3se": bool(abs(mean) < 3 * se) if np.isfinite(se) else False}


# -- Yaglom ------------------------------------------------------------------------------


def dissipation_scale(table: StructureFunctionTable, threshold: float = 0.1) -> float:
    """Smallest l beyond which |4 kappa G'(l)| stays below ``threshold`` times the source term."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(4 * table.kappa * table.dG) / np.abs(table.source)
    bad = np.flatnonzero(ratio > threshold)
    if len(bad) == 0:
        return float(table.ell[0])
    i = bad[-1]
    if i + 1 >= len(table.ell):
        return float("inf")
    # log-linear interpolation of the crossing
    l0, l1 = table.ell[i], table.ell[i + 1]
    r0, r1 = np.log(ratio[i]), np.log(ratio[i + 1])
    f = (np.log(threshold) - r0) / (r1 - r0) if r1 != r0 else 0.0
    return float(np.exp(np.log(l0) + f * (np.log(l1) - np.log(l0))))


def yaglom_check(table: StructureFunctionTable, epsilon_bar: float | None = None, ell_I: float | None = None,
                 tol: float = 0.25, target: float | None = None) -> dict:
    """Compensated flux D(l)/(l eps) against -4/d over the inertial range [l_D, l_I].

    The plateau is the longest run of consecutive grid points with l >= l_D
    (and l <= l_I when given) whose compensated value is within ``tol`` of the
    target; its length is reported in decades.
    """
    eps = epsilon_bar if epsilon_bar is not None else table.epsilon_bar
    tgt = -4.0 / table.d if target is None else target
    comp = table.D / (table.ell * eps)
    comp_se = table.D_se / (table.ell * eps)
    ell_D = dissipation_scale(table) if table.kappa is not None else float(table.ell[0])
    hi = np.inf if ell_I is None else ell_I
    inside = (table.ell >= ell_D) & (table.ell <= hi)
    ok = inside & (np.abs(comp / tgt - 1) <= tol)
    best = (0, -1, -1)
    i = 0
    n = len(ok)
    while i < n:
        if ok[i]:
            j = i
            while j + 1 < n and ok[j + 1]:
                j += 1
            span = np.log10(table.ell[j] / table.ell[i])
            if span > best[0] or best[1] < 0:
                best = (span, i, j)
            i = j + 1
        else:
            i += 1
    span, i0, i1 = best
    # KHM pointwise consistency: D = -4 kappa G' - S(l)
    khm_pred = -4 * (table.kappa or 0.0) * (table.dG if table.dG is not None else 0.0) - table.source
    report = {
        "target": tgt,
        "ell_D": ell_D,
        "ell_I": ell_I,
        "empty_inertial_range": bool(not np.any(inside)),
        "plateau_decades": float(span) if i0 >= 0 else 0.0,
        "plateau_range": [float(table.ell[i0]), float(table.ell[i1])] if i0 >= 0 else None,
        "plateau_mean": float(np.mean(comp[i0:i1 + 1])) if i0 >= 0 else float("nan"),
        "sign_ok": bool(np.all(comp[inside] < 0)) if np.any(inside) else False,
        "compensated": comp.tolist(),
        "compensated_se": comp_se.tolist(),
        "khm_pointwise_max": float(np.max(np.abs(table.D - khm_pred) / (table.ell * eps))),
        "pass": bool(i0 >= 0 and span >= 0.5),
    }
    if not report["pass"]:
        report["note"] = "plateau shorter than half a decade at this resolution"
    return report

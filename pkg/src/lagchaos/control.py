"""Explicit smooth controls steering (u, x, v) and growing the Jacobian.

Every controlled velocity is one of four low-mode shapes, translated so the
particle sits where the shape does what is needed:

* a shear ``cos(y_j - c) e_i`` moves coordinate i at unit speed and has
  zero gradient on the line y_j = c, so directions are left untouched;
* the cellular flow ``(-sin(y_j - b), sin(y_i - a))`` in the (i, j) plane
  vanishes at (a, b) and rotates directions about the remaining axis;
* the hyperbolic flow ``(sin(y_2 - b), sin(y_1 - a))`` vanishes at (a, b)
  and stretches along (1, 1).

Each shape is a Stokes eigenfunction with |k| = 1 on which the Euler
nonlinearity vanishes, so the forcing (f' + nu f) * shape reproduces the
scheduled flow exactly in the deterministic Navier-Stokes equations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.linalg import expm

from .forcing import ForcingSpec
from .fluid import FluidIntegrator, FluidModelConfig
from .spectral import (
    TWO_PI,
    SpectralField,
    euler_nonlinearity,
    eval_gradient,
    eval_velocity,
    grid_points,
    mode_ball,
    project_physical,
    reindex,
    restrict,
)

log = logging.getLogger(__name__)

SHAPES = ("shear", "cellular", "hyperbolic")
ODE_TOL = 1e-12


def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = (s > 0) & (s < 1)
    si = s[inside]
    out[inside] = np.exp(-1.0 / (si * (1.0 - si)))
    return out


def _bump_prime(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = (s > 0) & (s < 1)
    si = s[inside]
    w = si * (1.0 - si)
    out[inside] = np.exp(-1.0 / w) * (1.0 - 2.0 * si) / w**2
    return out


BUMP_MASS = quad(lambda s: float(_bump(s)), 0.0, 1.0, epsabs=1e-15, epsrel=1e-13)[0]


def wrap_angle(a: float) -> float:
    """Representative of a in (-pi, pi]."""
    return float(-((-a + np.pi) % TWO_PI - np.pi))


def torus_distance(a, b) -> float:
    diff = (np.asarray(a, float) - np.asarray(b, float) + np.pi) % TWO_PI - np.pi
    return float(np.linalg.norm(diff))


@dataclass(frozen=True)
class Phase:
    """One window of a schedule.

    ``axes`` are (i, j): for a shear, coordinate i is moved using the profile
    in y_j; for cellular and hyperbolic flows (i, j) is the active plane.
    ``center`` holds the translation of the shape.
    """

    t0: float
    t1: float
    kind: str
    axes: tuple
    center: tuple
    integral: float

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValueError(f"unknown flow shape {self.kind!r}")
        if not self.t1 > self.t0:
            raise ValueError("phase window must have positive length")

    @property
    def amplitude(self) -> float:
        return self.integral / (BUMP_MASS * (self.t1 - self.t0))

    def profile(self, t):
        w = self.t1 - self.t0
        return self.amplitude * _bump((np.asarray(t, float) - self.t0) / w)

    def profile_prime(self, t):
        w = self.t1 - self.t0
        return self.amplitude * _bump_prime((np.asarray(t, float) - self.t0) / w) / w

    def shape(self, y: np.ndarray) -> np.ndarray:
        """Unit-amplitude velocity at points y of shape (..., d)."""
        i, j = self.axes
        c = np.asarray(self.center, dtype=float)
        out = np.zeros(y.shape)
        if self.kind == "shear":
            out[..., i] = np.cos(y[..., j] - c[j])
        elif self.kind == "cellular":
            out[..., i] = -np.sin(y[..., j] - c[j])
            out[..., j] = np.sin(y[..., i] - c[i])
        else:
            out[..., i] = np.sin(y[..., j] - c[j])
            out[..., j] = np.sin(y[..., i] - c[i])
        return out

    def shape_gradient(self, y: np.ndarray) -> np.ndarray:
        """(grad u)[l, m] = d u_l / d y_m for the unit shape at one point y."""
        i, j = self.axes
        c = np.asarray(self.center, dtype=float)
        g = np.zeros((len(y), len(y)))
        if self.kind == "shear":
            g[i, j] = -np.sin(y[j] - c[j])
        elif self.kind == "cellular":
            g[i, j] = -np.cos(y[j] - c[j])
            g[j, i] = np.cos(y[i] - c[i])
        else:
            g[i, j] = np.cos(y[j] - c[j])
            g[j, i] = np.cos(y[i] - c[i])
        return g


@dataclass
class ControlPlan:
    d: int
    phases: list = field(default_factory=list)
    start: tuple = ()
    target: tuple = ()
    horizon: float = 1.0

    def active(self, t: float) -> list:
        return [p for p in self.phases if p.t0 < t < p.t1 and p.integral != 0.0]

    def velocity(self, t: float, y: np.ndarray) -> np.ndarray:
        out = np.zeros_like(np.asarray(y, dtype=float))
        for p in self.active(t):
            out = out + p.profile(t) * p.shape(np.asarray(y, float))
        return out

    def gradient(self, t: float, y: np.ndarray) -> np.ndarray:
        g = np.zeros((self.d, self.d))
        for p in self.active(t):
            g += p.profile(t) * p.shape_gradient(np.asarray(y, float))
        return g

    @property
    def is_zero(self) -> bool:
        return all(p.integral == 0.0 for p in self.phases)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "start": [list(map(float, s)) for s in self.start],
            "target": [list(map(float, s)) for s in self.target],
            "phases": [
                {
                    "window": [p.t0, p.t1],
                    "flow": p.kind,
                    "axes": list(p.axes),
                    "center": list(map(float, p.center)),
                    "integral": p.integral,
                    "amplitude": p.amplitude,
                }
                for p in self.phases
            ],
        }


def _rotation_angle_plane(v, i, j) -> float:
    return float(np.arctan2(v[j], v[i]))


def _rotate(v, axis_plane, angle):
    i, j = axis_plane
    out = np.array(v, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    out[i] = c * v[i] - s * v[j]
    out[j] = s * v[i] + c * v[j]
    return out


def synthesize_control(x, v, x_target, v_target) -> ControlPlan:
    """Schedule moving (x, v) to (x', v') over the unit time interval.

    Displacements use the shortest representative on the torus and angles
    are taken in (-pi, pi].
    """
    x = np.asarray(x, float) % TWO_PI
    xt = np.asarray(x_target, float) % TWO_PI
    v = np.asarray(v, float) / np.linalg.norm(v)
    vt = np.asarray(v_target, float) / np.linalg.norm(v_target)
    d = len(x)
    if d not in (2, 3) or len(xt) != d or len(v) != d or len(vt) != d:
        raise ValueError("endpoints must be points of T^d x S^(d-1) with d in {2, 3}")
    n_sh = d
    n_rot = 1 if d == 2 else 3
    edges = np.concatenate([np.linspace(0.0, 0.5, n_sh + 1), np.linspace(0.5, 1.0, n_rot + 1)[1:]])
    phases = []
    pos = x.copy()
    for i in range(d):
        j = (i + 1) % d
        shift = wrap_angle(xt[i] - pos[i])
        phases.append(Phase(edges[i], edges[i + 1], "shear", (i, j), tuple(pos), shift))
        pos[i] = xt[i]
    centre = tuple(xt)
    t = edges[n_sh:]
    if d == 2:
        ang = wrap_angle(_rotation_angle_plane(vt, 0, 1) - _rotation_angle_plane(v, 0, 1))
        phases.append(Phase(t[0], t[1], "cellular", (0, 1), centre, ang))
    else:
        # longitude, latitude, longitude: z-axis, x-axis, z-axis rotations
        w = v.copy()
        a1 = 0.0
        if np.hypot(w[0], w[1]) > 1e-14:
            a1 = wrap_angle(np.pi / 2 - np.arctan2(w[1], w[0]))
        w = _rotate(w, (0, 1), a1)
        theta0 = np.arctan2(w[1], w[2])
        a2 = wrap_angle(theta0 - np.arccos(np.clip(vt[2], -1.0, 1.0)))
        w = _rotate(w, (1, 2), a2)
        a3 = 0.0
        if np.hypot(vt[0], vt[1]) > 1e-14:
            a3 = wrap_angle(np.arctan2(vt[1], vt[0]) - np.arctan2(w[1], w[0]))
        phases.append(Phase(t[0], t[1], "cellular", (0, 1), centre, a1))
        phases.append(Phase(t[1], t[2], "cellular", (1, 2), centre, a2))
        phases.append(Phase(t[2], t[3], "cellular", (0, 1), centre, a3))
    phases = [p if abs(p.integral) > 0 else Phase(p.t0, p.t1, p.kind, p.axes, p.center, 0.0) for p in phases]
    return ControlPlan(d, phases, (tuple(x), tuple(v)), (tuple(xt), tuple(vt)))


def hyperbolic_plan(M: float, x0, d: int = 2) -> ControlPlan:
    """Single hyperbolic phase on (0, 1) with integral log M, centred at x0."""
    if M < 1:
        raise ValueError("M must be at least 1")
    x0 = tuple(np.asarray(x0, float))
    return ControlPlan(d, [Phase(0.0, 1.0, "hyperbolic", (0, 1), x0, float(np.log(M)))], (x0,), (x0,))


# -- integration of the controlled particle system ----------------------------


@dataclass
class ControlledEndpoint:
    x: np.ndarray
    v: np.ndarray | None
    A: np.ndarray | None
    x_error: float
    v_error: float
    n_eval: int


def integrate_plan(plan: ControlPlan, x0, v0=None, A0=None, rtol: float = ODE_TOL, atol: float = ODE_TOL):
    """Integrate x' = u(t, x), v' = Pi_v (grad u) v, A' = (grad u) A phase by phase."""
    d = plan.d
    x = np.asarray(x0, float).copy()
    v = None if v0 is None else np.asarray(v0, float) / np.linalg.norm(v0)
    A = None if A0 is None else np.asarray(A0, float).copy()
    n_eval = 0

    def pack(x, v, A):
        parts = [x]
        if v is not None:
            parts.append(v)
        if A is not None:
            parts.append(A.ravel())
        return np.concatenate(parts)

    def unpack(y):
        xx = y[:d]
        off = d
        vv = AA = None
        if v is not None:
            vv = y[off : off + d]
            off += d
        if A is not None:
            AA = y[off:].reshape(d, d)
        return xx, vv, AA

    def rhs(t, y):
        xx, vv, AA = unpack(y)
        out = [plan.velocity(t, xx)]
        g = plan.gradient(t, xx)
        if vv is not None:
            gv = g @ vv
            out.append(gv - (vv @ gv) * vv)
        if AA is not None:
            out.append((g @ AA).ravel())
        return np.concatenate(out)

    y = pack(x, v, A)
    for p in sorted(plan.phases, key=lambda p: p.t0):
        if p.integral == 0.0:
            continue
        sol = solve_ivp(rhs, (p.t0, p.t1), y, method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise RuntimeError(sol.message)
        n_eval += sol.nfev
        y = sol.y[:, -1]
    x, v, A = unpack(y)
    x = x % TWO_PI
    return x, (None if v is None else v / np.linalg.norm(v)), A, n_eval


def endpoint_errors(plan: ControlPlan, rtol: float = ODE_TOL) -> ControlledEndpoint:
    (x0, v0), (x1, v1) = plan.start, plan.target
    x, v, _, n = integrate_plan(plan, x0, v0, rtol=rtol, atol=rtol)
    return ControlledEndpoint(
        x, v, None, torus_distance(x, x1), float(np.linalg.norm(v - np.asarray(v1))), n
    )


# -- forcing that realises the plan --------------------------------------------


def _shape_field(phase: Phase, d: int) -> SpectralField:
    y = grid_points(d, 8)
    vals = np.moveaxis(phase.shape(y), -1, 0)
    return project_physical(vals, d, mode_ball(d, 1), scalar=False)


class ControlForcing:
    """Time-dependent forcing Qg(t) = sum over phases of (f' + nu f) * shape."""

    def __init__(self, plan: ControlPlan, nu: float = 1.0):
        self.plan = plan
        self.nu = nu
        self.modes = mode_ball(plan.d, 1)
        self.shapes = [(p, _shape_field(p, plan.d)) for p in plan.phases if p.integral != 0.0]

    def __call__(self, t: float) -> SpectralField:
        c = np.zeros((len(self.modes), self.plan.d - 1))
        for p, s in self.shapes:
            lam = self.nu * float(s.k_squared()[np.argmax(np.sum(s.coeffs**2, axis=1))])
            c += (float(p.profile_prime(t)) + lam * float(p.profile(t))) * s.coeffs
        return SpectralField(self.plan.d, self.modes, c)

    def scheduled(self, t: float) -> SpectralField:
        c = np.zeros((len(self.modes), self.plan.d - 1))
        for p, s in self.shapes:
            c += float(p.profile(t)) * s.coeffs
        return SpectralField(self.plan.d, self.modes, c)

    def support(self) -> int:
        """Largest |k|_inf carrying nonzero forcing."""
        used = [np.max(np.abs(s.modes[np.any(np.abs(s.coeffs) > 1e-14, axis=1)])) for _, s in self.shapes]
        return int(max(used, default=0))


def control_to_forcing(plan: ControlPlan, nu: float = 1.0) -> ControlForcing:
    return ControlForcing(plan, nu)


def controlled_pde_residual(plan: ControlPlan, N: int = 2, nu: float = 1.0, n_check: int = 41, rtol: float = 1e-12):
    """Max over check times of |u(t) - scheduled(t)| for the deterministic Galerkin NSE.

    The velocity starts at rest; the norm is the coefficient 2-norm.
    """
    g = control_to_forcing(plan, nu)
    tmpl = SpectralField.zeros(plan.d, mode_ball(plan.d, N))
    k2 = np.repeat(tmpl.k_squared()[:, None], plan.d - 1, axis=1).ravel()
    def rhs(t, y):
        u = tmpl.with_coeffs(y.reshape(tmpl.coeffs.shape))
        b = euler_nonlinearity(u, target=tmpl.modes).coeffs.ravel() if np.any(y) else 0.0
        return -nu * k2 * y - b + reindex(g(t), tmpl.modes).coeffs.ravel()

    times = np.linspace(0.0, plan.horizon, n_check)
    sol = solve_ivp(rhs, (0.0, plan.horizon), np.zeros(tmpl.coeffs.size), method="DOP853",
                    rtol=rtol, atol=rtol * 1e-2, t_eval=times)
    if not sol.success:
        raise RuntimeError(sol.message)
    worst = 0.0
    for t, y in zip(sol.t, sol.y.T):
        ref = reindex(g.scheduled(t), tmpl.modes).coeffs.ravel()
        worst = max(worst, float(np.linalg.norm(y - ref)))
    return worst


# -- Jacobian growth -------------------------------------------------------------


def jacobian_growth_demo(M: float, x0=(0.0, 0.0), rtol: float = ODE_TOL) -> dict:
    """Grow |A| to M with the hyperbolic cell centred on the particle.

    The closed form is A_1 = exp(log M * S) with S = [[0, 1], [1, 0]].
    """
    plan = hyperbolic_plan(M, x0)
    v0 = np.array([1.0, 1.0]) / np.sqrt(2)
    x, v, A, n = integrate_plan(plan, x0, v0, np.eye(2), rtol=rtol, atol=rtol)
    exact = expm(np.log(M) * np.array([[0.0, 1.0], [1.0, 0.0]]))
    norm = float(np.linalg.norm(A, 2))
    return {
        "M": float(M),
        "norm_A1": norm,
        "relative_error": abs(norm - M) / M,
        "closed_form_error": float(np.max(np.abs(A - exact)) / np.max(np.abs(exact))),
        "particle_drift": torus_distance(x, x0),
        "unstable_direction_drift": float(np.linalg.norm(v - v0)),
        "det_A1": float(np.linalg.det(A)),
        "pass": bool(norm >= M * (1 - 1e-5) and torus_distance(x, x0) < 1e-8),
        "n_eval": n,
    }


# -- noisy shadowing probe ---------------------------------------------------------


def low_mode_forcing(d: int, q: float) -> ForcingSpec:
    """Equal amplitude q on every mode with |k|_inf = 1."""
    ks = [tuple(int(c) for c in k) for k in mode_ball(d, 1)]
    return ForcingSpec(d, table={k: q for k in ks})


def noise_shadowing_probe(plan: ControlPlan, eps, n_traj: int = 200, q: float = 0.5, dt: float = 0.01,
                          seed: int = 0, variant: str = "stokes", controlled: bool = True) -> dict:
    """Fraction of noisy trajectories from (0, x, v) ending near (0, x', v').

    The velocity is the stochastic system with low-mode noise of amplitude q;
    with ``controlled`` the plan's forcing is added to the drift, so the
    probe measures how often noisy paths shadow the controlled one. Without
    it only the noise drives the flow. The particle and direction are
    advanced with RK4 along the velocity. ``eps`` may be a scalar or a
    sequence; hit fractions are returned for each value.
    """
    eps_list = np.atleast_1d(np.asarray(eps, dtype=float))
    cfg = FluidModelConfig(variant, plan.d, low_mode_forcing(plan.d, q), N=1, dt=dt)
    integ = FluidIntegrator(cfg, dt)
    n_steps = int(round(plan.horizon / dt))
    (x0, v0), (x1, v1) = plan.start, plan.target
    gfor = control_to_forcing(plan, cfg.nu) if controlled and not plan.is_zero else None
    gsteps = None
    if gfor is not None:
        # exponential-Euler weight for a forcing frozen at the step midpoint
        gsteps = [
            integ.phi1 * restrict(reindex(gfor((n + 0.5) * dt), integ.template.modes), integ.template.modes).coeffs
            for n in range(n_steps)
        ]
    dist = np.zeros((n_traj, 3))
    for tr in range(n_traj):
        src = integ.source(seed, tr)
        xi = src.normals(0, n_steps)
        st = integ.initial()
        x = np.array(x0, float)
        v = np.array(v0, float)
        for n in range(n_steps):
            u = st.u
            x, v = _rk4_xv(u, x, v, dt)
            st = integ.step(st, xi[n])
            if gsteps is not None:
                st = type(st)(st.t, st.u.with_coeffs(st.u.coeffs + gsteps[n]), st.step)
        dist[tr] = (
            np.sqrt(np.sum(st.u.coeffs**2)),
            torus_distance(x % TWO_PI, x1),
            np.linalg.norm(v - np.asarray(v1)),
        )
    worst = dist.max(axis=1)
    hits = [float(np.mean(worst < e)) for e in eps_list]
    return {"eps": eps_list.tolist(), "hit_fraction": hits, "n_traj": n_traj, "q": q, "controlled": controlled}


def _rk4_xv(u: SpectralField, x, v, dt):
    def f(x, v):
        g = eval_gradient(u, x)
        gv = g @ v
        return eval_velocity(u, x), gv - (v @ gv) * v

    k1 = f(x, v)
    k2 = f(x + 0.5 * dt * k1[0], v + 0.5 * dt * k1[1])
    k3 = f(x + 0.5 * dt * k2[0], v + 0.5 * dt * k2[1])
    k4 = f(x + dt * k3[0], v + dt * k3[1])
    x = x + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    v = v + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return x, v / np.linalg.norm(v)

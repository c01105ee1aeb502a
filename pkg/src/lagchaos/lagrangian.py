"""Particle, projective and matrix processes carried by a velocity field.

The state of one particle is (x, v, v_check, A, A_check) with

    x' = u(x)
    v' = Pi_v G v,            G = grad u(x)
    v_check' = -Pi_vc G^T v_check
    A' = G A
    A_check' = -G^T A_check   (so A_check = A^{-T} along exact solutions)

The velocity field is frozen over each step and the system is advanced by
classical RK4. ``A_check`` is integrated on its own rather than inverted from
``A``, which keeps the duality relations a genuine numerical check.

Matrices may hold any number of columns r: r = d gives the full cocycle,
other choices track a set of tangent vectors. Three renormalisation modes
are supported by the ensemble kernel:

* ``RENORM_NORM``: divide by the Frobenius norm when it leaves [1e-6, 1e6]
* ``RENORM_QR``: modified Gram-Schmidt every ``qr_every`` steps
* ``RENORM_COLUMNS``: normalise every column each step
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .spectral import SpectralField, eval_gradient, eval_velocity

RENORM_NORM, RENORM_QR, RENORM_COLUMNS = 0, 1, 2
NORM_LOW, NORM_HIGH = 1e-6, 1e6


# -- numba kernels ---------------------------------------------------------------


@numba.njit(cache=True, fastmath=False)
def _field(x, modes, pos, W, u, G):
    d = x.shape[0]
    for a in range(d):
        u[a] = 0.0
        for b in range(d):
            G[a, b] = 0.0
    for j in range(modes.shape[0]):
        ph = 0.0
        for a in range(d):
            ph += modes[j, a] * x[a]
        s = math.sin(ph)
        c = math.cos(ph)
        if pos[j]:
            e, en = s, c
        else:
            e, en = c, -s
        for a in range(d):
            w = W[j, a]
            u[a] += e * w
            for b in range(d):
                G[a, b] += en * w * modes[j, b]


@numba.njit(cache=True)
def _deriv(G, v, vc, A, Ac, dv, dvc, dA, dAc):
    d = G.shape[0]
    r = A.shape[1]
    gv = 0.0
    gvc = 0.0
    for a in range(d):
        s1 = 0.0
        s2 = 0.0
        for b in range(d):
            s1 += G[a, b] * v[b]
            s2 -= G[b, a] * vc[b]
        dv[a] = s1
        dvc[a] = s2
        gv += v[a] * s1
        gvc += vc[a] * s2
    for a in range(d):
        dv[a] -= gv * v[a]
        dvc[a] -= gvc * vc[a]
    for a in range(d):
        for c in range(r):
            s1 = 0.0
            s2 = 0.0
            for b in range(d):
                s1 += G[a, b] * A[b, c]
                s2 -= G[b, a] * Ac[b, c]
            dA[a, c] = s1
            dAc[a, c] = s2


@numba.njit(cache=True)
def _mgs(M, logs):
    """In-place modified Gram-Schmidt on the columns of M; adds log R_ii to logs."""
    d, r = M.shape
    for c in range(r):
        for p in range(c):
            dot = 0.0
            for a in range(d):
                dot += M[a, p] * M[a, c]
            for a in range(d):
                M[a, c] -= dot * M[a, p]
        nrm = 0.0
        for a in range(d):
            nrm += M[a, c] * M[a, c]
        nrm = math.sqrt(nrm)
        logs[c] += math.log(nrm)
        for a in range(d):
            M[a, c] /= nrm


@numba.njit(cache=True)
def _renorm(M, logs, log_total, mode, do_qr):
    d, r = M.shape
    if mode == 0:
        nrm = 0.0
        for a in range(d):
            for c in range(r):
                nrm += M[a, c] * M[a, c]
        nrm = math.sqrt(nrm)
        if nrm > 1e6 or nrm < 1e-6:
            for a in range(d):
                for c in range(r):
                    M[a, c] /= nrm
            return log_total + math.log(nrm)
        return log_total
    if mode == 1:
        if do_qr:
            _mgs(M, logs)
        return log_total
    for c in range(r):
        nrm = 0.0
        for a in range(d):
            nrm += M[a, c] * M[a, c]
        nrm = math.sqrt(nrm)
        logs[c] += math.log(nrm)
        for a in range(d):
            M[a, c] /= nrm
    return log_total


@numba.njit(cache=True)
def advance_kernel(x, v, vc, A, Ac, logA, logAc, lsA, lsAc, modes, pos, Wseq, dt, substeps,
                   mode, qr_every, step0, reproject):
    """Advance every particle through len(Wseq) frozen-field steps in place."""
    n, d = x.shape
    r = A.shape[2]
    h = dt / substeps
    u = np.empty(d)
    G = np.empty((d, d))
    kx = np.empty((4, d))
    kv = np.empty((4, d))
    kvc = np.empty((4, d))
    kA = np.empty((4, d, r))
    kAc = np.empty((4, d, r))
    xs = np.empty(d)
    vs = np.empty(d)
    vcs = np.empty(d)
    As = np.empty((d, r))
    Acs = np.empty((d, r))
    wts = np.array([1.0, 2.0, 2.0, 1.0])
    for step in range(Wseq.shape[0]):
        W = Wseq[step]
        for p in range(n):
            for sub in range(substeps):
                for st in range(4):
                    fac = 0.0 if st == 0 else (0.5 * h if st < 3 else h)
                    for a in range(d):
                        xs[a] = x[p, a] + (fac * kx[st - 1, a] if st > 0 else 0.0)
                        vs[a] = v[p, a] + (fac * kv[st - 1, a] if st > 0 else 0.0)
                        vcs[a] = vc[p, a] + (fac * kvc[st - 1, a] if st > 0 else 0.0)
                        for c in range(r):
                            As[a, c] = A[p, a, c] + (fac * kA[st - 1, a, c] if st > 0 else 0.0)
                            Acs[a, c] = Ac[p, a, c] + (fac * kAc[st - 1, a, c] if st > 0 else 0.0)
                    _field(xs, modes, pos, W, u, G)
                    for a in range(d):
                        kx[st, a] = u[a]
                    _deriv(G, vs, vcs, As, Acs, kv[st], kvc[st], kA[st], kAc[st])
                for a in range(d):
                    x[p, a] += h / 6.0 * (kx[0, a] + 2 * kx[1, a] + 2 * kx[2, a] + kx[3, a])
                    v[p, a] += h / 6.0 * (kv[0, a] + 2 * kv[1, a] + 2 * kv[2, a] + kv[3, a])
                    vc[p, a] += h / 6.0 * (kvc[0, a] + 2 * kvc[1, a] + 2 * kvc[2, a] + kvc[3, a])
                    for c in range(r):
                        sA = 0.0
                        sAc = 0.0
                        for st in range(4):
                            sA += wts[st] * kA[st, a, c]
                            sAc += wts[st] * kAc[st, a, c]
                        A[p, a, c] += h / 6.0 * sA
                        Ac[p, a, c] += h / 6.0 * sAc
                nv = 0.0
                nvc = 0.0
                for a in range(d):
                    nv += v[p, a] * v[p, a]
                    nvc += vc[p, a] * vc[p, a]
                nv = math.sqrt(nv)
                nvc = math.sqrt(nvc)
                for a in range(d):
                    v[p, a] /= nv
                    vc[p, a] /= nvc
            do_qr = qr_every > 0 and (step0 + step + 1) % qr_every == 0
            logA[p] = _renorm(A[p], lsA[p], logA[p], mode, do_qr)
            logAc[p] = _renorm(Ac[p], lsAc[p], logAc[p], mode, do_qr)
            if reproject and r == d:
                # rescale so that the true matrix exp(logA) A has unit determinant
                det = np.linalg.det(A[p])
                s = (math.exp(-d * logA[p]) / det) ** (1.0 / d)
                for a in range(d):
                    for c in range(r):
                        A[p, a, c] *= s
            # wrap every step so results do not depend on how steps are batched into calls
            for a in range(d):
                x[p, a] = x[p, a] % (2.0 * math.pi)


# -- single-particle API -------------------------------------------------------------


@dataclass
class LagrangianState:
    """One particle with its projective and matrix companions.

    ``log_norm`` and ``log_norm_invT`` accumulate the logarithms of every
    factor divided out of ``A`` and ``A_check``; the true matrices are
    ``exp(log_norm) A`` and ``exp(log_norm_invT) A_check``.
    """

    x: np.ndarray
    v: np.ndarray
    v_check: np.ndarray
    A: np.ndarray
    A_check: np.ndarray
    log_norm: float = 0.0
    log_norm_invT: float = 0.0
    t: float = 0.0

    @classmethod
    def initial(cls, x, v=None, v_check=None) -> "LagrangianState":
        x = np.asarray(x, dtype=float)
        d = x.shape[0]
        e1 = np.eye(d)[0]
        v = e1 if v is None else np.asarray(v, dtype=float) / np.linalg.norm(v)
        vc = e1 if v_check is None else np.asarray(v_check, dtype=float) / np.linalg.norm(v_check)
        return cls(x.copy(), v.copy(), vc.copy(), np.eye(d), np.eye(d))

    @property
    def d(self) -> int:
        return self.x.shape[0]

    def log_det(self) -> float:
        sign, ld = np.linalg.slogdet(self.A)
        if sign <= 0:
            return -np.inf
        return ld + self.d * self.log_norm

    def det(self) -> float:
        return float(np.exp(self.log_det()))

    def log_opnorm(self) -> float:
        return float(np.log(np.linalg.norm(self.A, 2)) + self.log_norm)

    def log_opnorm_invT(self) -> float:
        return float(np.log(np.linalg.norm(self.A_check, 2)) + self.log_norm_invT)


class _Frozen:
    """Adapter giving a SpectralField the velocity/gradient interface."""

    def __init__(self, u: SpectralField):
        self.u = u

    def velocity(self, x):
        return eval_velocity(self.u, x)

    def gradient(self, x):
        return eval_gradient(self.u, x)


def _rhs_python(field_, x, v, vc, A, Ac):
    G = field_.gradient(x)
    gv = G @ v
    gtc = -G.T @ vc
    return (
        field_.velocity(x),
        gv - (v @ gv) * v,
        gtc - (vc @ gtc) * vc,
        G @ A,
        -G.T @ Ac,
    )


def flow_step(ls: LagrangianState, u, dt: float, substeps: int = 1, reproject: bool = False) -> LagrangianState:
    """Advance one particle by dt through the frozen field ``u``.

    ``u`` is a velocity :class:`SpectralField` or any object with
    ``velocity(x)`` and ``gradient(x)`` methods (e.g. a linear strain).
    """
    if isinstance(u, SpectralField):
        ens = ParticleEnsemble.from_states([ls])
        ens.advance_frozen(u, dt, 1, substeps=substeps, reproject=reproject)
        return ens.state(0, t=ls.t + dt)
    h = dt / substeps
    y = [ls.x, ls.v, ls.v_check, ls.A, ls.A_check]
    for _ in range(substeps):
        k1 = _rhs_python(u, *y)
        k2 = _rhs_python(u, *[a + 0.5 * h * b for a, b in zip(y, k1)])
        k3 = _rhs_python(u, *[a + 0.5 * h * b for a, b in zip(y, k2)])
        k4 = _rhs_python(u, *[a + h * b for a, b in zip(y, k3)])
        y = [a + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)]
        y[1] = y[1] / np.linalg.norm(y[1])
        y[2] = y[2] / np.linalg.norm(y[2])
    x, v, vc, A, Ac = y
    out = LagrangianState(x, v, vc, A, Ac, ls.log_norm, ls.log_norm_invT, ls.t + dt)
    for name, logname in (("A", "log_norm"), ("A_check", "log_norm_invT")):
        M = getattr(out, name)
        nrm = np.linalg.norm(M)
        if not NORM_LOW <= nrm <= NORM_HIGH:
            setattr(out, name, M / nrm)
            setattr(out, logname, getattr(out, logname) + np.log(nrm))
    return out


def pullback_gradient(ls: LagrangianState, grad0) -> np.ndarray:
    """A^{-T} grad0, the gradient at x_t of a scalar transported without diffusion."""
    return np.exp(ls.log_norm_invT) * (ls.A_check @ np.asarray(grad0, dtype=float))


def inverse_transpose(A: np.ndarray) -> np.ndarray:
    return np.linalg.inv(A).T


def duality_check(ls_or_matrix, rtol: float = 1e-8) -> dict:
    """Compare singular values of A with those of the tracked A^{-T}.

    Accepts a :class:`LagrangianState` (uses the independently integrated
    ``A_check``) or a plain matrix (uses its exact inverse transpose).
    Logs are compared, so no overflow occurs on long runs.
    """
    if isinstance(ls_or_matrix, LagrangianState):
        ls = ls_or_matrix
        logsA = np.log(np.linalg.svd(ls.A, compute_uv=False)) + ls.log_norm
        logsC = np.log(np.linalg.svd(ls.A_check, compute_uv=False)) + ls.log_norm_invT
    else:
        A = np.asarray(ls_or_matrix, dtype=float)
        logsA = np.log(np.linalg.svd(A, compute_uv=False))
        logsC = np.log(np.linalg.svd(inverse_transpose(A), compute_uv=False))
    predicted = -logsA[::-1]
    rel = np.abs(np.expm1(logsC - predicted))
    return {
        "log_sv_A": logsA.tolist(),
        "log_sv_invT": logsC.tolist(),
        "max_rel_error": float(np.max(rel)),
        "ok": bool(np.max(rel) <= rtol),
    }


# -- particle ensembles --------------------------------------------------------------


@dataclass
class ParticleEnsemble:
    """Arrays for n particles sharing one velocity trajectory."""

    x: np.ndarray
    v: np.ndarray
    vc: np.ndarray
    A: np.ndarray
    Ac: np.ndarray
    logA: np.ndarray
    logAc: np.ndarray
    lsA: np.ndarray
    lsAc: np.ndarray
    mode: int = RENORM_NORM
    qr_every: int = 10
    steps: int = 0

    @classmethod
    def create(cls, x, v=None, vc=None, A=None, Ac=None, mode: int = RENORM_NORM, qr_every: int = 10):
        x = np.array(x, dtype=float, ndmin=2)
        n, d = x.shape
        e1 = np.zeros((n, d))
        e1[:, 0] = 1.0
        v = e1.copy() if v is None else np.array(v, dtype=float).reshape(n, d)
        vc = e1.copy() if vc is None else np.array(vc, dtype=float).reshape(n, d)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        vc /= np.linalg.norm(vc, axis=1, keepdims=True)
        A = np.tile(np.eye(d), (n, 1, 1)) if A is None else np.array(A, dtype=float).reshape(n, d, -1)
        Ac = np.tile(np.eye(d), (n, 1, 1)) if Ac is None else np.array(Ac, dtype=float).reshape(n, d, -1)
        return cls(x, v, vc, A, Ac, np.zeros(n), np.zeros(n), np.zeros((n, A.shape[2])),
                   np.zeros((n, Ac.shape[2])), mode, qr_every)

    @classmethod
    def from_states(cls, states) -> "ParticleEnsemble":
        ens = cls.create(
            [s.x for s in states], [s.v for s in states], [s.v_check for s in states],
            [s.A for s in states], [s.A_check for s in states],
        )
        ens.logA[:] = [s.log_norm for s in states]
        ens.logAc[:] = [s.log_norm_invT for s in states]
        return ens

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def state(self, i: int, t: float = 0.0) -> LagrangianState:
        return LagrangianState(self.x[i].copy(), self.v[i].copy(), self.vc[i].copy(), self.A[i].copy(),
                               self.Ac[i].copy(), float(self.logA[i]), float(self.logAc[i]), t)

    def advance(self, modes: np.ndarray, pos: np.ndarray, Wseq: np.ndarray, dt: float,
                substeps: int = 1, reproject: bool = False) -> None:
        """Advance through the frozen amplitude vectors Wseq[j] (shape (m, d)), one per step."""
        Wseq = np.ascontiguousarray(Wseq, dtype=float)
        advance_kernel(self.x, self.v, self.vc, self.A, self.Ac, self.logA, self.logAc, self.lsA,
                       self.lsAc, np.ascontiguousarray(modes, dtype=float), np.ascontiguousarray(pos),
                       Wseq, float(dt), int(substeps), int(self.mode), int(self.qr_every), int(self.steps),
                       bool(reproject))
        self.steps += Wseq.shape[0]

    def advance_frozen(self, u: SpectralField, dt: float, n_steps: int, substeps: int = 1,
                       reproject: bool = False) -> None:
        W = u.amplitude_vectors()
        self.advance(u.modes, u.positive(), np.broadcast_to(W, (n_steps,) + W.shape), dt, substeps, reproject)

    def log_growth(self, which: str = "A") -> np.ndarray:
        """Per-column log growth (n, r) under the column or QR renormalisation modes."""
        return self.lsA.copy() if which == "A" else self.lsAc.copy()

    def log_det(self) -> np.ndarray:
        sign, ld = np.linalg.slogdet(self.A)
        return np.where(sign > 0, ld + self.d * self.logA, -np.inf)


def warmup() -> None:
    """Compile the kernels on a tiny problem (numba caches the result on disk)."""
    ens = ParticleEnsemble.create(np.zeros((1, 2)))
    ens.advance(np.array([[1.0, 0.0]]), np.array([True]), np.zeros((1, 1, 2)), 0.1)

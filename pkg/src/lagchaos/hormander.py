"""Lie-bracket spanning checks for the projective and matrix processes.

Two kinds of tangent vectors appear. Noise directions e_k gamma_k^i are
constant fields on the velocity space, so brackets between them vanish and
the only nontrivial brackets involve the drift X_0 = U(u) + V(u, x, .):

* ``[c, X_0](y) = (DU(u) c, V(c, x, .))`` for any constant direction c;
* ``[g, [c, X_0]] = -(B(g, c) + B(c, g))``, again a constant direction.

The second identity is exact because the drift is quadratic, so the closure
is generated by repeatedly applying the symmetrised bilinear form to the
current span and the forcing directions.

Ranks are measured in orthonormal tangent coordinates. The sphere factor is
parametrised by an orthonormal basis of v-perp and the SL_d factor by an
orthonormal basis of sl_d after right-translation to the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import null_space

from .spectral import (
    SpectralField,
    basis_eval,
    bilinear_nonlinearity,
    eval_gradient,
    eval_velocity,
    gamma_frame,
    is_positive,
    mode_ball,
    symmetric_closure,
)

RANK_RTOL = 1e-8
GAP_RATIO = 1e3
TARGETS = ("projective", "projective_check", "matrix")


def _e_minus(k, x) -> float:
    """The companion function e_{-k} entering grad e_k = k e_{-k}."""
    k = np.asarray(k, dtype=float)
    phase = float(np.asarray(x, dtype=float) @ k)
    return np.cos(phase) if is_positive(k) else -np.sin(phase)


def _proj(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    return w - (w @ v) * v


def sphere_basis(v: np.ndarray) -> np.ndarray:
    """Orthonormal columns spanning the tangent plane of the sphere at v."""
    return null_space(np.asarray(v, dtype=float)[None, :])


def sl_basis(d: int) -> np.ndarray:
    """Orthonormal basis of trace-free d x d matrices, shape (d*d - 1, d, d)."""
    out = []
    for i in range(d):
        for j in range(d):
            if i != j:
                m = np.zeros((d, d))
                m[i, j] = 1.0
                out.append(m)
    diag = null_space(np.ones((1, d)))
    for c in diag.T:
        out.append(np.diag(c))
    return np.array(out)


def tangent_dim(d: int, target: str) -> int:
    if target == "matrix":
        return d + d * d - 1
    return 2 * d - 1


@dataclass
class BracketVector:
    """A tangent vector at (x, v) or (x, A).

    ``fibre`` holds the v-component (a vector orthogonal to v) or, for the
    matrix process, the sl_d element obtained by right-translating by A^{-1}.
    """

    kind: str
    x: np.ndarray
    point: np.ndarray
    x_part: np.ndarray
    fibre: np.ndarray

    def at_point(self) -> np.ndarray:
        """Fibre component in the ambient tangent space at the base point."""
        if self.kind == "matrix":
            return self.fibre @ self.point
        return self.fibre

    def coords(self, basis: np.ndarray | None = None) -> np.ndarray:
        """Coordinates in the orthonormal tangent frame at the base point."""
        if self.kind == "matrix":
            b = sl_basis(len(self.x)) if basis is None else basis
            fib = np.einsum("aij,ij->a", b, self.fibre)
        else:
            b = sphere_basis(self.point) if basis is None else basis
            fib = b.T @ self.fibre
        return np.concatenate([self.x_part, fib])


def projective_bracket(k, i: int, x, v, check: bool = False) -> BracketVector:
    """[e_k gamma_k^i, V] at (x, v).

    With ``check`` the inverse-transpose direction process is used, whose
    fibre part is -(gamma . v) e_{-k}(x) Pi_v k.
    """
    k = np.asarray(k, dtype=float)
    if not np.any(k):
        raise ValueError("k must be nonzero")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    g = gamma_frame(k.astype(int))[:, i]
    ek = float(basis_eval(k, x))
    em = _e_minus(k, x)
    if check:
        fib = -(g @ v) * em * _proj(v, k)
    else:
        fib = (k @ v) * em * _proj(v, g)
    return BracketVector("projective", x, v, ek * g, fib)


def matrix_bracket(k, i: int, x, A) -> BracketVector:
    """[e_k gamma_k^i, G] at (x, A), fibre reported in sl_d."""
    k = np.asarray(k, dtype=float)
    if not np.any(k):
        raise ValueError("k must be nonzero")
    x = np.asarray(x, dtype=float)
    g = gamma_frame(k.astype(int))[:, i]
    return BracketVector(
        "matrix", x, np.asarray(A, dtype=float), float(basis_eval(k, x)) * g, _e_minus(k, x) * np.outer(g, k)
    )


@dataclass
class PointRank:
    rank: int
    dim: int
    singular_values: np.ndarray
    status: str
    gap_ratio: float
    null_directions: np.ndarray

    @property
    def full(self) -> bool:
        return self.rank == self.dim


def numerical_rank(vectors: np.ndarray, dim: int | None = None) -> PointRank:
    """Rank of the row span with threshold RANK_RTOL * sigma_max.

    The status is INCONCLUSIVE when the singular values straddling the
    threshold are separated by less than GAP_RATIO. ``null_directions`` are
    orthonormal tangent vectors missed by the span.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    dim = vectors.shape[1] if dim is None else dim
    _, s, vt = np.linalg.svd(vectors, full_matrices=True)
    smax = s[0] if s.size else 0.0
    if smax == 0.0:
        return PointRank(0, dim, s, "FAIL", np.inf, np.eye(dim))
    tol = RANK_RTOL * smax
    r = int(np.sum(s > tol))
    kept = s[r - 1]
    dropped = s[r] if r < len(s) else 0.0
    if r < dim and dropped > 0.0:
        gap = kept / dropped
    else:
        gap = kept / tol
    status = "PASS" if r == dim else "FAIL"
    if gap < GAP_RATIO:
        status = "INCONCLUSIVE"
    return PointRank(r, dim, s, status, float(gap), vt[r:].copy())


def random_points(d: int, target: str, n: int, seed: int = 0):
    """Uniform x, uniform v on the sphere or A in SL_d with log-normal spread."""
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0.0, 2 * np.pi, size=(n, d))
    if target == "matrix":
        out = []
        for _ in range(n):
            a = rng.standard_normal((d, d))
            if np.linalg.det(a) < 0:
                a[:, 0] *= -1
            out.append(a / abs(np.linalg.det(a)) ** (1.0 / d))
        return xs, np.array(out)
    v = rng.standard_normal((n, d))
    return xs, v / np.linalg.norm(v, axis=1, keepdims=True)


def bracket_vectors(modes, x, p, target: str, combined: bool = True) -> np.ndarray:
    """Rows of tangent coordinates for all brackets at one point.

    With ``combined`` the pairwise recombinations e_k[k] - e_{-k}[-k] and
    e_{-k}[k] + e_k[-k] are appended; they separate the base and fibre parts
    without changing the span.
    """
    modes = symmetric_closure(modes)
    d = modes.shape[1]
    basis = sl_basis(d) if target == "matrix" else sphere_basis(p)
    rows = {}
    for k in modes:
        for i in range(d - 1):
            if target == "matrix":
                bv = matrix_bracket(k, i, x, p)
            else:
                bv = projective_bracket(k, i, x, p, check=(target == "projective_check"))
            rows[(tuple(int(c) for c in k), i)] = bv.coords(basis)
    out = list(rows.values())
    if combined:
        for (k, i), r in rows.items():
            if not is_positive(k):
                continue
            # gamma_{-k} = -gamma_k, so flip the partner back to gamma_k
            r_neg = -rows[(tuple(-c for c in k), i)]
            ek = float(basis_eval(k, x))
            em = _e_minus(k, x)
            em_neg = float(basis_eval(np.negative(k), x))
            out.append(ek * r + em_neg * r_neg)
            out.append(em * r - ek * r_neg)
    return np.array(out)


@dataclass
class SpanReport:
    target: str
    d: int
    dim: int
    n_points: int
    min_rank: int
    passed: bool
    n_inconclusive: int
    failures: list = field(default_factory=list)

    @property
    def status(self) -> str:
        """One definite rank deficit is conclusive; borderline points alone are not."""
        if self.passed:
            return "PASS"
        return "FAIL" if len(self.failures) > self.n_inconclusive else "INCONCLUSIVE"

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "d": self.d,
            "dim": self.dim,
            "n_points": self.n_points,
            "min_rank": self.min_rank,
            "status": self.status,
            "n_inconclusive": self.n_inconclusive,
            "failures": self.failures[:20],
            "n_failures": len(self.failures),
        }


def spanning_rank(modes, target: str = "projective", n_points: int = 1000, seed: int = 0, points=None) -> SpanReport:
    """Rank of the bracket span at random (x, v) or (x, A) samples.

    PASS iff the span is the whole tangent space at every sample. Each rank
    deficient point is listed with its missing directions, expressed as
    ambient (x-part, fibre-part) vectors.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    modes = np.asarray(modes, dtype=np.int64)
    keys = {tuple(k) for k in modes.tolist()}
    if any(tuple(-c for c in k) not in keys for k in keys):
        raise ValueError("mode set must satisfy K = -K")
    d = modes.shape[1]
    dim = tangent_dim(d, target)
    xs, ps = random_points(d, target, n_points, seed) if points is None else points
    basis_sl = sl_basis(d) if target == "matrix" else None
    min_rank = dim
    failures = []
    n_inc = 0
    for x, p in zip(xs, ps):
        rk = numerical_rank(bracket_vectors(modes, x, p, target), dim)
        min_rank = min(min_rank, rk.rank)
        if rk.status == "INCONCLUSIVE":
            n_inc += 1
        if rk.status != "PASS":
            failures.append(
                {
                    "x": x.tolist(),
                    "point": np.asarray(p).tolist(),
                    "rank": rk.rank,
                    "status": rk.status,
                    "null_directions": [_ambient(nd, d, p, target, basis_sl) for nd in rk.null_directions],
                }
            )
    return SpanReport(target, d, dim, len(xs), min_rank, not failures, n_inc, failures)


def _ambient(coords, d, p, target, basis_sl):
    xpart = coords[:d]
    if target == "matrix":
        return {"x": xpart.tolist(), "sl": np.einsum("a,aij->ij", coords[d:], basis_sl).tolist()}
    return {"x": xpart.tolist(), "v": (sphere_basis(p) @ coords[d:]).tolist()}


# -- closure with the drift ---------------------------------------------------


def _field_from_vector(d, modes, vec) -> SpectralField:
    return SpectralField(d, modes, np.asarray(vec).reshape(len(modes), d - 1))


def _orth(vectors: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal rows spanning the given rows."""
    if len(vectors) == 0:
        return vectors
    _, s, vt = np.linalg.svd(vectors, full_matrices=False)
    return vt[s > tol * max(s[0], 1e-300)]


@dataclass
class ClosureReport:
    drift: str
    target: str
    d: int
    state_dim: int
    manifold_dim: int
    depth_ranks: list
    u_ranks: list
    passed: bool
    residual_codim: int
    depth_reached: int | None

    def to_dict(self) -> dict:
        return {
            "drift": self.drift,
            "target": self.target,
            "d": self.d,
            "state_dim": self.state_dim,
            "manifold_dim": self.manifold_dim,
            "total_dim": self.state_dim + self.manifold_dim,
            "rank_by_depth": self.depth_ranks,
            "velocity_rank_by_depth": self.u_ranks,
            "status": "PASS" if self.passed else "FAIL",
            "residual_codim": self.residual_codim,
            "depth_reached": self.depth_reached,
        }


def hormander_closure(
    modes,
    drift: str = "stokes",
    depth: int = 4,
    n_points: int = 10,
    target: str = "projective",
    N: int | None = None,
    nu: float = 1.0,
    seed: int = 0,
) -> ClosureReport:
    """Rank of the parabolic Hormander span as the bracket depth grows.

    ``drift`` is ``"stokes"`` (state space spanned by the forced modes) or
    ``"galerkin"`` (state space |k|_inf <= N). Depth n means the constant
    velocity directions have been closed n times under the bilinear form.
    """
    forced = symmetric_closure(np.asarray(modes, dtype=np.int64))
    d = forced.shape[1]
    if drift == "stokes":
        smodes = forced
    elif drift == "galerkin":
        if N is None:
            raise ValueError("galerkin drift needs N")
        smodes = mode_ball(d, N)
    else:
        raise ValueError("drift must be 'stokes' or 'galerkin'")
    index = {tuple(k): j for j, k in enumerate(smodes.tolist())}
    n_u = len(smodes) * (d - 1)
    gens = []
    for k in forced.tolist():
        if tuple(k) not in index:
            raise ValueError(f"forced mode {k} outside the state space")
        for i in range(d - 1):
            e = np.zeros(n_u)
            e[index[tuple(k)] * (d - 1) + i] = 1.0
            gens.append(e)
    gens = np.array(gens)
    ksq = np.repeat(np.sum(smodes.astype(float) ** 2, axis=1), d - 1)
    m_dim = tangent_dim(d, target)
    rng = np.random.default_rng(seed)
    xs, ps = random_points(d, target, n_points, seed)
    us = [rng.standard_normal(n_u) for _ in range(n_points)]

    def btilde(a, b):
        if drift == "stokes":
            return np.zeros(n_u)
        fa = _field_from_vector(d, smodes, a)
        fb = _field_from_vector(d, smodes, b)
        return bilinear_nonlinearity(fa, fb, smodes).coeffs.ravel()

    span = _orth(gens)
    depth_ranks, u_ranks = [], []
    reached = None
    for level in range(depth + 1):
        if level > 0:
            new = [btilde(g, c) for g in gens for c in span]
            span = _orth(np.vstack([span, *new])) if new else span
        ranks = []
        for x, p, u in zip(xs, ps, us):
            rows = _closure_rows(span, smodes, d, x, p, u, target, ksq, nu, btilde)
            ranks.append(numerical_rank(rows, n_u + m_dim).rank)
        depth_ranks.append(int(min(ranks)))
        u_ranks.append(int(len(span)))
        if reached is None and depth_ranks[-1] == n_u + m_dim:
            reached = level
            break
    full = depth_ranks[-1] == n_u + m_dim
    return ClosureReport(
        drift, target, d, n_u, m_dim, depth_ranks, u_ranks, full, n_u + m_dim - depth_ranks[-1], reached
    )


def _closure_rows(span, smodes, d, x, p, u, target, ksq, nu, btilde):
    basis = sl_basis(d) if target == "matrix" else sphere_basis(p)
    rows = []
    for c in span:
        rows.append(np.concatenate([c, np.zeros(tangent_dim(d, target))]))
        du = -btilde(c, u) - nu * ksq * c
        f = _field_from_vector(d, smodes, c)
        xv = eval_velocity(f, x)
        grad = eval_gradient(f, x)
        if target == "matrix":
            fib = np.einsum("aij,ij->a", basis, grad)
        elif target == "projective_check":
            fib = basis.T @ _proj(p, -grad.T @ p)
        else:
            fib = basis.T @ _proj(p, grad @ p)
        rows.append(np.concatenate([du, xv, fib]))
    return np.array(rows)


SUFFICIENT_PROJECTIVE = {
    2: [(1, 0), (0, 1)],
    3: [(1, 0, 0), (0, 1, 0), (0, 0, 1)],
}
SUFFICIENT_MATRIX = {
    2: [(1, 0), (0, 1), (1, 1)],
    3: [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)],
}


def sufficient_modes(d: int, target: str, drop: Sequence[int] = ()) -> np.ndarray:
    """Sufficient mode sets for the projective and matrix spanning checks.

    ``drop`` removes generators by position, to probe necessity.
    """
    table = SUFFICIENT_MATRIX if target == "matrix" else SUFFICIENT_PROJECTIVE
    keep = [k for j, k in enumerate(table[d]) if j not in set(drop)]
    return symmetric_closure(np.array(keep, dtype=np.int64).reshape(-1, d))

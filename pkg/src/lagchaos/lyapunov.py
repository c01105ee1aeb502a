"""Lyapunov exponents, expansion in every direction and projective occupation measures."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .fluid import VelocityPath
from .lagrangian import RENORM_COLUMNS, RENORM_QR, ParticleEnsemble

log = logging.getLogger(__name__)

TWO_PI = 2 * np.pi


@dataclass
class ExponentEstimate:
    """QR-based exponent estimates with batch-means and cross-trajectory errors.

    ``stderr`` is the larger of the two standard errors and drives ``ci``.
    """

    lam: np.ndarray
    horizon: float
    stderr: np.ndarray
    ci: np.ndarray
    stderr_batch: np.ndarray
    stderr_traj: np.ndarray
    per_traj: np.ndarray
    lam_invT: np.ndarray
    stderr_invT: np.ndarray
    per_traj_invT: np.ndarray
    sum_se: float
    warnings: list = field(default_factory=list)

    @property
    def top(self) -> float:
        return float(self.lam[0])

    def sum_zero_ok(self, n_se: float = 3.0) -> bool:
        total = float(np.sum(self.lam))
        return abs(total) <= n_se * max(self.sum_se, 1e-300) or abs(total) < 1e-12

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam.tolist(),
            "stderr": self.stderr.tolist(),
            "ci": self.ci.tolist(),
            "horizon": self.horizon,
            "lambda_invT": self.lam_invT.tolist(),
            "stderr_invT": self.stderr_invT.tolist(),
            "n_traj": int(self.per_traj.shape[0]),
            "warnings": list(self.warnings),
        }


def _initial_points(d: int, n: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 9001]).uniform(0, TWO_PI, (n, d))


def _summarise(rates: np.ndarray, batch_rates: np.ndarray, level: float):
    """rates: (n_traj, d); batch_rates: (n_traj, n_batches, d)."""
    n_traj, nb = batch_rates.shape[:2]
    lam = rates.mean(axis=0)
    flat = batch_rates.reshape(n_traj * nb, -1)
    se_batch = flat.std(axis=0, ddof=1) / np.sqrt(flat.shape[0]) if flat.shape[0] > 1 else np.full(lam.shape, np.inf)
    se_traj = rates.std(axis=0, ddof=1) / np.sqrt(n_traj) if n_traj > 1 else np.full(lam.shape, np.nan)
    se = np.fmax(se_batch, np.nan_to_num(se_traj, nan=0.0))
    dof = (n_traj - 1) if n_traj > 1 else flat.shape[0] - 1
    tq = stats.t.ppf(0.5 + level / 2, max(dof, 1))
    ci = np.stack([lam - tq * se, lam + tq * se], axis=1)
    sums = batch_rates.sum(axis=2).reshape(-1)
    sum_se = float(sums.std(ddof=1) / np.sqrt(len(sums))) if len(sums) > 1 else np.inf
    if n_traj > 1:
        sum_se = max(sum_se, float(rates.sum(axis=1).std(ddof=1) / np.sqrt(n_traj)))
    return lam, se, ci, se_batch, se_traj, sum_se


class CocycleRun:
    """Resumable QR (or column) cocycle over n_traj independent trajectories.

    Trajectories run one after another; ``first_traj`` offsets the
    trajectory ids so disjoint blocks can run in parallel. Cumulative log growths are recorded
    at the end of every batch for A and for A^{-T}. ``advance`` may be called
    repeatedly with a step budget, and ``snapshot``/``restore`` carry the
    full state, so an interrupted run resumes bit for bit.
    """

    def __init__(self, path: VelocityPath, horizon: float, n_traj: int, seed: int, n_batches: int = 50,
                 qr_every: int = 10, substeps: int = 1, x0: np.ndarray | None = None,
                 columns: np.ndarray | None = None, first_traj: int = 0):
        self.path = path
        self.first_traj = first_traj
        self.n_steps = int(round(horizon / path.dt))
        if self.n_steps < n_batches:
            raise ValueError("horizon too short for the requested number of batches")
        self.n_traj = n_traj
        self.seed = seed
        self.qr_every = qr_every
        self.substeps = substeps
        self.columns = None if columns is None else np.asarray(columns, dtype=float)
        self.bounds = np.linspace(0, self.n_steps, n_batches + 1).round().astype(int)
        self.x0 = (_initial_points(path.d, first_traj + n_traj, seed)[first_traj:] if x0 is None
                   else np.array(np.broadcast_to(x0, (n_traj, path.d)), dtype=float))
        self.rec, self.recc = [], []
        self.traj = 0
        self._start_traj()

    def _start_traj(self):
        r = self.traj
        if r >= self.n_traj:
            self.ens = None
            return
        if self.columns is None:
            self.ens = ParticleEnsemble.create(self.x0[r:r + 1], mode=RENORM_QR, qr_every=self.qr_every)
        else:
            cols = self.columns
            self.ens = ParticleEnsemble.create(self.x0[r:r + 1], A=cols[None], Ac=cols[None], mode=RENORM_COLUMNS)
        self.cursor = self.path.cursor(self.seed, self.first_traj + r)
        self.rows, self.rowsc = [], []
        self.done = 0
        self.b = 1

    @property
    def finished(self) -> bool:
        return self.traj >= self.n_traj

    def _snap(self):
        ens = self.ens
        if self.columns is None and self.qr_every > 1:
            # fold the pending partial QR interval into this batch
            return _qr_logs(ens.A[0]) + ens.lsA[0], _qr_logs(ens.Ac[0]) + ens.lsAc[0]
        return ens.lsA[0].copy(), ens.lsAc[0].copy()

    def advance(self, max_steps: int | None = None, chunk: int = 20000) -> bool:
        """Run at most max_steps particle steps; return True when all trajectories are done."""
        budget = np.inf if max_steps is None else max_steps
        path = self.path
        while not self.finished and budget > 0:
            m = int(min(chunk, self.bounds[self.b] - self.done, budget))
            W = self.cursor.take(m)
            self.ens.advance(path.modes, path.pos, W, path.dt, self.substeps)
            self.done += m
            budget -= m
            if self.done == self.bounds[self.b]:
                a, c = self._snap()
                self.rows.append(a)
                self.rowsc.append(c)
                self.b += 1
                if self.b == len(self.bounds):
                    self.rec.append(self.rows)
                    self.recc.append(self.rowsc)
                    self.traj += 1
                    self._start_traj()
        return self.finished

    def record(self) -> dict:
        if not self.finished:
            raise RuntimeError("cocycle run not finished")
        return {"t": self.bounds[1:] * self.path.dt, "logA": np.array(self.rec), "logAc": np.array(self.recc)}

    _ENS_FIELDS = ("x", "v", "vc", "A", "Ac", "logA", "logAc", "lsA", "lsAc")

    def snapshot(self) -> dict:
        """Flat dict of arrays suitable for ``np.savez``."""
        nb = len(self.bounds) - 1
        st = {
            "traj": np.array(self.traj),
            "rec": np.array(self.rec).reshape(len(self.rec), nb, self._width()),
            "recc": np.array(self.recc).reshape(len(self.recc), nb, self._width()),
        }
        if not self.finished:
            st.update({"done": np.array(self.done), "b": np.array(self.b), "ens_steps": np.array(self.ens.steps),
                       "rows": np.array(self.rows).reshape(-1, self._width()),
                       "rowsc": np.array(self.rowsc).reshape(-1, self._width())})
            for f in self._ENS_FIELDS:
                st["ens_" + f] = getattr(self.ens, f).copy()
            for k, v in self.cursor.get_state().items():
                st["cursor_" + k] = v
        return st

    def restore(self, st: dict) -> None:
        self.traj = int(st["traj"])
        self.rec = [list(r) for r in np.asarray(st["rec"])]
        self.recc = [list(r) for r in np.asarray(st["recc"])]
        self._start_traj()
        if self.finished:
            return
        self.done = int(st["done"])
        self.b = int(st["b"])
        self.rows = list(np.asarray(st["rows"]))
        self.rowsc = list(np.asarray(st["rowsc"]))
        for f in self._ENS_FIELDS:
            getattr(self.ens, f)[...] = st["ens_" + f]
        self.ens.steps = int(st["ens_steps"])
        self.cursor.set_state({k[len("cursor_"):]: v for k, v in st.items() if k.startswith("cursor_")})

    def _width(self) -> int:
        return self.path.d if self.columns is None else self.columns.shape[1]


def run_cocycle(path: VelocityPath, horizon: float, n_traj: int, seed: int, n_batches: int = 50,
                qr_every: int = 10, substeps: int = 1, x0: np.ndarray | None = None,
                columns: np.ndarray | None = None) -> dict:
    """Run :class:`CocycleRun` to completion and return its record.

    ``columns`` switches from QR to tracking individual tangent vectors.
    """
    run = CocycleRun(path, horizon, n_traj, seed, n_batches, qr_every, substeps, x0, columns)
    run.advance()
    return run.record()


def _qr_logs(M: np.ndarray) -> np.ndarray:
    r = np.linalg.qr(M, mode="r")
    return np.log(np.abs(np.diag(r)))


def _estimate_from_record(rec: dict, upto: int | None = None, level: float = 0.95) -> ExponentEstimate:
    t = rec["t"]
    nb = len(t) if upto is None else upto
    T = t[nb - 1]
    out = {}
    for key in ("logA", "logAc"):
        L = rec[key][:, :nb, :]
        rates = L[:, -1, :] / T
        inc = np.diff(np.concatenate([np.zeros_like(L[:, :1, :]), L], axis=1), axis=1)
        dts = np.diff(np.concatenate([[0.0], t[:nb]]))
        out[key] = (rates, inc / dts[None, :, None])
    lam, se, ci, seb, set_, sum_se = _summarise(*out["logA"], level)
    lamc, sec, _, _, _, _ = _summarise(*out["logAc"], level)
    return ExponentEstimate(lam, float(T), se, ci, seb, set_, out["logA"][0], lamc, sec, out["logAc"][0], sum_se)


def estimate_exponents(path: VelocityPath, horizon: float, n_traj: int, seed: int = 0, n_batches: int = 50,
                       qr_every: int = 10, substeps: int = 1, ci_width: float | None = None,
                       level: float = 0.95, x0=None) -> ExponentEstimate:
    """Top-to-bottom exponents of A (and of A^{-T}) by periodic QR."""
    rec = run_cocycle(path, horizon, n_traj, seed, n_batches, qr_every, substeps, x0=x0)
    est = _estimate_from_record(rec, level=level)
    if ci_width is not None and np.any(est.ci[:, 1] - est.ci[:, 0] > ci_width):
        msg = f"horizon {horizon} too short: CI width exceeds {ci_width}"
        log.warning(msg)
        est.warnings.append(msg)
    return est


def estimate_with_prefix(path: VelocityPath, horizon: float, n_traj: int, seed: int = 0, n_batches: int = 50,
                         qr_every: int = 10, substeps: int = 1, level: float = 0.95):
    """Estimates at horizon/2 and horizon from one run (the shorter is a prefix of the longer)."""
    if n_batches % 2:
        raise ValueError("n_batches must be even")
    rec = run_cocycle(path, horizon, n_traj, seed, n_batches, qr_every, substeps)
    return _estimate_from_record(rec, n_batches // 2, level), _estimate_from_record(rec, None, level)


def direction_grid(d: int, n: int, seed: int = 0) -> np.ndarray:
    """n unit vectors: equispaced angles on the half circle for d = 2, a spiral set for d = 3."""
    if d == 2:
        th = np.pi * np.arange(n) / n
        return np.stack([np.cos(th), np.sin(th)], axis=0)
    i = np.arange(n) + 0.5
    z = 1 - i / n  # upper hemisphere suffices projectively
    r = np.sqrt(1 - z**2)
    phi = np.pi * (1 + 5**0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=0)


def expansion_all_directions(path: VelocityPath, horizon: float, n_traj: int, seed: int = 0,
                             n_dirs: int = 32, directions: np.ndarray | None = None,
                             reference: ExponentEstimate | None = None, x0=None) -> dict:
    """Growth rates (1/T) log|A_T v| for a grid of initial directions v.

    With a reference estimate the report says whether every direction's
    mean rate lies in the reference CI for the top exponent.
    """
    V = direction_grid(path.d, n_dirs, seed) if directions is None else np.asarray(directions, dtype=float)
    rec = run_cocycle(path, horizon, n_traj, seed, n_batches=1, columns=V, x0=x0)
    T = rec["t"][-1]
    rates = rec["logA"][:, -1, :] / T  # (n_traj, n_dirs)
    rates_c = rec["logAc"][:, -1, :] / T
    mean = rates.mean(axis=0)
    se = rates.std(axis=0, ddof=1) / np.sqrt(n_traj) if n_traj > 1 else np.zeros_like(mean)
    report = {
        "directions": V.T.tolist(),
        "rates": mean.tolist(),
        "stderr": se.tolist(),
        "rates_invT": rates_c.mean(axis=0).tolist(),
        "horizon": float(T),
    }
    if reference is not None:
        lo, hi = reference.ci[0]
        report["reference_ci"] = [float(lo), float(hi)]
        report["max_deviation"] = float(np.max(np.abs(mean - reference.top)))
        report["all_within_ci"] = bool(np.all((mean >= lo) & (mean <= hi)))
    return report


def initial_condition_anova(path: VelocityPath, horizon: float, n_inits: int = 10, n_traj: int = 4,
                            seed: int = 0) -> dict:
    """One-way ANOVA of top-exponent estimates grouped by initial particle position."""
    rng = np.random.default_rng([seed, 77])
    groups = []
    for i in range(n_inits):
        x0 = rng.uniform(0, TWO_PI, path.d)
        rec = run_cocycle(path, horizon, n_traj, seed + 1000 * (i + 1), n_batches=1, x0=x0)
        groups.append(rec["logA"][:, -1, 0] / rec["t"][-1])
    res = stats.f_oneway(*groups)
    return {"F": float(res.statistic), "pvalue": float(res.pvalue), "means": [float(np.mean(g)) for g in groups]}


# -- projective occupation measure -----------------------------------------------------


def _projective_coords(v: np.ndarray) -> np.ndarray:
    """Coordinates on projective space: angle in [0, pi) for d = 2; (cos theta, phi) for d = 3."""
    if v.shape[-1] == 2:
        return np.mod(np.arctan2(v[..., 1], v[..., 0]), np.pi)[..., None]
    w = np.where(v[..., 2:3] < 0, -v, v)
    return np.stack([w[..., 2], np.mod(np.arctan2(w[..., 1], w[..., 0]), TWO_PI)], axis=-1)


def projective_measure_histogram(path: VelocityPath, horizon: float, seed: int = 0, trajectory: int = 0,
                                 x_bins: int = 8, v_bins: int = 16, record_every: int = 10,
                                 x0=None, v0=None) -> dict:
    """Occupation histogram of (x_t, [v_t]) along one long trajectory (normalised to sum 1)."""
    d = path.d
    n_steps = int(round(horizon / path.dt))
    x0 = _initial_points(d, 1, seed + trajectory)[0] if x0 is None else np.asarray(x0, dtype=float)
    ens = ParticleEnsemble.create(x0[None], v=None if v0 is None else np.asarray(v0)[None])
    if d == 2:
        edges = [np.linspace(0, TWO_PI, x_bins + 1)] * 2 + [np.linspace(0, np.pi, v_bins + 1)]
    else:
        edges = [np.linspace(0, TWO_PI, x_bins + 1)] * 3 + [np.linspace(0, 1, v_bins // 2 + 1),
                                                            np.linspace(0, TWO_PI, v_bins + 1)]
    hist = np.zeros([len(e) - 1 for e in edges])
    samples = []
    for W in path.chunks(seed, trajectory, n_steps):
        for j in range(0, W.shape[0], record_every):
            ens.advance(path.modes, path.pos, W[j:j + record_every], path.dt)
            samples.append(np.concatenate([ens.x[0], _projective_coords(ens.v[0])]))
        if len(samples) > 50000:
            hist += np.histogramdd(np.array(samples), bins=edges)[0]
            samples = []
    if samples:
        hist += np.histogramdd(np.array(samples), bins=edges)[0]
    total = hist.sum()
    return {"hist": hist / total, "edges": edges, "n_samples": int(total)}


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def x_marginal_uniformity(hist: np.ndarray, d: int, n_samples_eff: float) -> dict:
    """Chi-square style check that the x-marginal is uniform (n_samples_eff accounts for correlation)."""
    xm = hist.sum(axis=tuple(range(d, hist.ndim)))
    p = xm.ravel()
    expected = 1.0 / p.size
    chi2 = n_samples_eff * float(np.sum((p - expected) ** 2) / expected)
    dof = p.size - 1
    return {"chi2": chi2, "dof": dof, "pvalue": float(stats.chi2.sf(chi2, dof)),
            "max_rel_dev": float(np.max(np.abs(p / expected - 1)))}

"""Experiment runners behind the command line.

Each runner takes a parsed :class:`ExperimentConfig` and an output
directory, writes its artifacts (CSV time series, JSON summaries, JSONL
progress lines, ``.npz`` checkpoints) and returns the summary dict. The
summary never contains wall-clock data, so two runs of one config with one
seed produce byte-identical ``summary.json`` files.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dumps
from .fluid import FluidIntegrator, FluidState, VelocityPath, sup_norm, with_dt
from .forcing import ForcingSpec, build_scalar_forcing
from .lyapunov import CocycleRun, _estimate_from_record, expansion_all_directions
from .spectral import SpectralField

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.npz"


class CheckpointMismatch(RuntimeError):
    """The checkpoint on disk was written by a different configuration."""


# -- small IO helpers -----------------------------------------------------------------


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


class JsonLines:
    def __init__(self, path: Path, append: bool):
        self.fh = open(path, "a" if append else "w")

    def write(self, obj) -> None:
        self.fh.write(json.dumps(obj, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def save_checkpoint(out: Path, cfg: ExperimentConfig, state: dict) -> None:
    tmp = out / (CHECKPOINT + ".tmp.npz")
    np.savez(tmp, config_hash=np.array(cfg.config_hash()), **state)
    os.replace(tmp, out / CHECKPOINT)


def load_checkpoint(out: Path, cfg: ExperimentConfig) -> dict | None:
    path = out / CHECKPOINT
    if not path.exists():
        return None
    with np.load(path, allow_pickle=False) as z:
        data = {k: z[k] for k in z.files}
    if str(data.pop("config_hash")) != cfg.config_hash():
        raise CheckpointMismatch(f"{path} was written by a different configuration; refusing to resume")
    return data


# -- runners ------------------------------------------------------------------------------


def _path(cfg: ExperimentConfig, dt: float | None = None) -> VelocityPath:
    fl = cfg.fluid if dt is None else with_dt(cfg.fluid, dt)
    return VelocityPath(fl, burn_in=cfg.sections["fluid"]["burn_in"])


def run_simulate(cfg: ExperimentConfig, out: Path, resume: bool = False, threads: int = 1) -> dict:
    p = cfg.params
    integ = FluidIntegrator(cfg.fluid, cfg.fluid.dt)
    n_steps = int(round(p["horizon"] / integ.dt))
    src = integ.source(cfg.seed, 0)
    state = integ.initial()
    rows = []
    ck = load_checkpoint(out, cfg) if resume else None
    if ck is not None:
        state = FluidState(float(ck["t"]), integ.template.with_coeffs(ck["coeffs"]), int(ck["step"]))
        rows = [list(r) for r in ck["rows"]]
    every = p["record_every"]
    ckpt = cfg.checkpoint_every
    while state.step < n_steps:
        if state.step % every == 0:
            u = state.u
            rows.append([state.t, u.mean_square(), u.mean_square_gradient(), sup_norm(u)])
        state = integ.run(state, 1, src)
        if ckpt and state.step % ckpt == 0 and state.step < n_steps:
            save_checkpoint(out, cfg, {"t": np.array(state.t), "coeffs": state.u.coeffs,
                                       "step": np.array(state.step), "rows": np.array(rows)})
    write_csv(out / "energy.csv", ["t", "energy", "enstrophy", "sup_u"], rows)
    arr = np.array(rows)
    half = arr[len(arr) // 2:]
    return {
        "variant": cfg.fluid.variant,
        "steps": n_steps,
        "dt": integ.dt,
        "mean_energy_second_half": float(half[:, 1].mean()),
        "mean_enstrophy_second_half": float(half[:, 2].mean()),
        "final_energy": float(arr[-1, 1]),
    }


def _cocycle_block(args):
    path, horizon, n, seed, nb, qr, sub, first = args
    run = CocycleRun(path, horizon, n, seed, nb, qr, sub, first_traj=first)
    run.advance()
    return run.record()


def _cocycle_record(cfg: ExperimentConfig, out: Path, resume: bool, threads: int, progress: JsonLines) -> dict:
    p = cfg.params
    path = _path(cfg)
    args = (p["horizon"], p["n_traj"], cfg.seed, p["n_batches"], p["qr_every"], p["substeps"])
    if threads > 1 and not cfg.checkpoint_every:
        blocks = np.array_split(np.arange(p["n_traj"]), threads)
        jobs = [(path, p["horizon"], len(b), cfg.seed, p["n_batches"], p["qr_every"], p["substeps"], int(b[0]))
                for b in blocks if len(b)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            recs = list(pool.map(_cocycle_block, jobs))
        # fixed concatenation order keeps the reduction independent of scheduling
        return {"t": recs[0]["t"], "logA": np.concatenate([r["logA"] for r in recs]),
                "logAc": np.concatenate([r["logAc"] for r in recs])}
    run = CocycleRun(path, *args)
    ck = load_checkpoint(out, cfg) if resume else None
    if ck is not None:
        run.restore(ck)
        progress.write({"event": "resumed", "trajectory": run.traj})
    budget = cfg.checkpoint_every or None
    while not run.finished:
        before = run.traj
        run.advance(budget)
        if run.traj != before:
            progress.write({"event": "trajectory_done", "trajectory": run.traj - 1})
        if budget and not run.finished:
            save_checkpoint(out, cfg, run.snapshot())
    return run.record()


def run_lyapunov(cfg: ExperimentConfig, out: Path, resume: bool = False, threads: int = 1) -> dict:
    progress = JsonLines(out / "progress.jsonl", append=resume)
    try:
        rec = _cocycle_record(cfg, out, resume, threads, progress)
    finally:
        progress.close()
    nb = cfg.params["n_batches"]
    est = _estimate_from_record(rec)
    summary = est.to_dict()
    summary["sum_zero_within_3se"] = est.sum_zero_ok()
    summary["ci_excludes_zero"] = bool(est.ci[0, 0] > 0)
    if nb % 2 == 0:
        half = _estimate_from_record(rec, nb // 2)
        summary["half_horizon"] = {"lambda": half.lam.tolist(), "ci": half.ci.tolist(), "horizon": half.horizon}
    ciw = cfg.params.get("ci_width")
    if ciw is not None and np.any(est.ci[:, 1] - est.ci[:, 0] > ciw):
        summary["warnings"].append(f"CI wider than {ciw}; increase the horizon")
    rows = []
    for i in range(rec["logA"].shape[0]):
        T = rec["t"][-1]
        rows.append([i, *(rec["logA"][i, -1] / T), *(rec["logAc"][i, -1] / T)])
    d = cfg.fluid.d
    write_csv(out / "per_trajectory.csv",
              ["trajectory", *[f"lambda_{j + 1}" for j in range(d)], *[f"lambda_invT_{j + 1}" for j in range(d)]],
              rows)
    return summary


def run_expansion(cfg: ExperimentConfig, out: Path, resume: bool = False, threads: int = 1) -> dict:
    p = cfg.params
    path = _path(cfg)
    ref_run = CocycleRun(path, p["horizon"], p["n_traj"], cfg.seed, 50)
    ref_run.advance()
    ref = _estimate_from_record(ref_run.record())
    rep = expansion_all_directions(path, p["horizon"], p["n_traj"], cfg.seed, p["n_dirs"], reference=ref)
    rows = [[*v, r, s] for v, r, s in zip(rep["directions"], rep["rates"], rep["stderr"])]
    write_csv(out / "directions.csv", [*[f"v{j + 1}" for j in range(cfg.fluid.d)], "rate", "stderr"], rows)
    return {k: rep[k] for k in ("reference_ci", "max_deviation", "all_within_ci", "horizon")} | {
        "lambda_ref": ref.top}


def run_gradient(cfg: ExperimentConfig, out: Path, resume: bool = False, threads: int = 1) -> dict:
    from .scalar import inviscid_gradient_growth

    p = cfg.params
    path = _path(cfg)
    d = cfg.fluid.d
    mode = tuple(p["initial_mode"] or ([1] + [0] * (d - 1)))
    f0 = SpectralField.from_dict(d, {mode: 1.0}, scalar=True)
    ref_run = CocycleRun(path, p["horizon"], max(p["n_real"], 2), cfg.seed + 1, 50)
    ref_run.advance()
    ref = _estimate_from_record(ref_run.record())
    rep = inviscid_gradient_growth(path, f0, p["horizon"], p["n_particles"], p["n_real"], cfg.seed,
                                   p["record_every"], p["fit_from"], reference=ref)
    write_csv(out / "growth.csv", ["t", "log_l1_mean"], zip(rep["t"], rep["log_l1_mean"]))
    return {k: v for k, v in rep.items() if k not in ("t", "log_l1_mean")}


def _scalar_forcing(cfg: ExperimentConfig):
    """Scalar source on its own modes when given, otherwise on the velocity forcing modes."""
    from .config import forcing_from_section

    sec = cfg.sections["scalar"]
    if sec["modes"] is None:
        return build_scalar_forcing(cfg.forcing)
    q = 1.0 if sec["q"] is None else sec["q"]
    return build_scalar_forcing(forcing_from_section({"modes": sec["modes"], "q": q}, cfg.fluid.d, "scalar"))


def scalar_sweep(cfg: ExperimentConfig, out: Path, keep_results: bool = False):
    """One stationary run per diffusivity in the sweep; returns rows and results."""
    from .scalar import ScalarSolver, run_stationary

    sec = cfg.sections["scalar"]
    fs = _scalar_forcing(cfg)
    rows, results, solvers = [], [], []
    dts = sec["dt"] or [cfg.fluid.dt or cfg.fluid.default_dt()] * len(sec["kappa"])
    for i, (kappa, ng, dt) in enumerate(zip(sec["kappa"], sec["Ng"], dts)):
        path = _path(cfg, dt)
        sol = ScalarSolver(cfg.fluid.d, ng, kappa, fs, dt, truncation=sec["truncation"])
        res = run_stationary(sol, path, cfg.seed, 0, sec["burn_in"], sec["horizon"], sec["sample_every"],
                             sec["flux_every"], sec["n_batches"])
        s = res.summary(sec["n_batches"])
        rows.append(s)
        write_csv(out / f"timeseries_{i}.csv", ["t", "mean_square", "dissipation", "source_work"],
                  zip(res.t, res.mean_square, res.dissipation, res.martingale))
        np.savez_compressed(out / f"spectra_{i}.npz", kvec=sol.kvec, power=np.array(res.batch_power),
                            flux=np.array(res.batch_flux), kappa=kappa, epsilon_bar=fs.epsilon_bar)
        if keep_results:
            results.append(res)
            solvers.append(sol)
    return rows, results, solvers, fs


def _sweep_summary(rows: list[dict]) -> dict:
    balance = [abs(r["balance_ratio"] - 1) <= 0.05 for r in rows]
    wad = []
    for a, b in zip(rows, rows[1:]):
        diff = a["kappa_mean_square"] - b["kappa_mean_square"] if a["kappa"] < b["kappa"] else \
            b["kappa_mean_square"] - a["kappa_mean_square"]
        se = np.hypot(a["kappa_mean_square_se"], b["kappa_mean_square_se"])
        wad.append(bool(diff < -2 * se))
    return {"balance_within_5pct": balance, "wad_steps_decreasing": wad,
            "all_resolved": all(r["resolved"] for r in rows)}


def run_scalar(cfg: ExperimentConfig, out: Path, resume: bool = False, threads: int = 1) -> dict:
    rows, _, _, _ = scalar_sweep(cfg, out)
    write_csv(out / "sweep.csv", list(rows[0].keys()), [list(r.values()) for r in rows])
    return {"runs": rows, **_sweep_summary(rows)}


def run_yaglom(cfg: ExperimentConfig, out: Path, resume: bool = False, threads: int = 1) -> dict:
    from .yaglom import khm_residual_spectral, tables_from_run, yaglom_check

    ysec = cfg.sections["yaglom"]
    rows, results, solvers, fs = scalar_sweep(cfg, out, keep_results=True)
    ell = np.geomspace(ysec["ell_min"], ysec["ell_max"], ysec["n_ell"])
    checks = []
    for i, (res, sol) in enumerate(zip(results, solvers)):
        batches, table = tables_from_run(res, fs, ell, sol.kvec)
        rep = yaglom_check(table, tol=ysec["tol"])
        khm = khm_residual_spectral(batches, fs, res.kappa, ysec["khm_radius"])
        write_csv(out / f"structure_{i}.csv",
                  ["ell", "D", "D_se", "G", "a", "compensated", "compensated_se"],
                  [[*r, cs] for r, cs in zip(table.rows(), rep["compensated_se"])])
        checks.append({
            "kappa": res.kappa,
            "ell_D": rep["ell_D"],
            "plateau_decades": rep["plateau_decades"],
            "plateau_range": rep["plateau_range"],
            "plateau_mean": rep["plateau_mean"],
            "sign_ok": rep["sign_ok"],
            "khm_residual": khm["residual"],
            "khm_se": khm["se"],
            "khm_within_3se": khm["within_3se"],
            "resolved": res.resolved,
            "pass": rep["pass"],
        })
    order = np.argsort([c["kappa"] for c in checks])
    ells = [checks[i]["ell_D"] for i in order]
    return {"runs": rows, "yaglom": checks, **_sweep_summary(rows),
            "ell_D_increasing_with_kappa": all(a < b for a, b in zip(ells, ells[1:])),
            "resolution_limited": not checks[order[0]]["pass"]}


def run_hormander(cfg: ExperimentConfig, out: Path, resume: bool = False, threads: int = 1) -> dict:
    from .hormander import hormander_closure, sufficient_modes, spanning_rank

    p = cfg.params
    d = p["dim"]
    modes = (np.array(p["modes"], dtype=np.int64).reshape(-1, d) if p["modes"] is not None
             else sufficient_modes(d, p["target"]))
    from .spectral import symmetric_closure

    modes = symmetric_closure(modes)
    span = spanning_rank(modes, p["target"], p["samples"], cfg.seed).to_dict()
    closure = hormander_closure(modes, p["system"], p["depth"], min(p["samples"], 10), p["target"],
                                N=p["N"] if p["system"] == "galerkin" else None, seed=cfg.seed).to_dict()
    return {"modes": modes.tolist(), "spanning": span, "closure": closure}


def run_control(cfg: ExperimentConfig, out: Path, resume: bool = False, threads: int = 1) -> dict:
    from .control import (
        controlled_pde_residual,
        endpoint_errors,
        jacobian_growth_demo,
        noise_shadowing_probe,
        synthesize_control,
    )

    p = cfg.params
    d = p["dim"]
    rng = np.random.default_rng([cfg.seed, 7])
    pairs = []
    if p["x"] is not None:
        for key in ("v", "x_target", "v_target"):
            if p[key] is None:
                raise ConfigError(f"control.{key}", "missing required field when control.x is given")
        pairs.append((p["x"], p["v"], p["x_target"], p["v_target"]))
    for _ in range(p["n_random"]):
        x, xt = rng.uniform(0, 2 * np.pi, (2, d))
        v, vt = rng.standard_normal((2, d))
        pairs.append((x, v, xt, vt))
    plans = []
    for x, v, xt, vt in pairs:
        plan = synthesize_control(x, v, xt, vt)
        e = endpoint_errors(plan)
        plans.append({"plan": plan.to_dict(), "x_error": e.x_error, "v_error": e.v_error})
    summary = {"plans": plans,
               "max_endpoint_error": max([max(q["x_error"], q["v_error"]) for q in plans], default=0.0)}
    if plans:
        first = synthesize_control(*pairs[0])
        summary["pde_residual"] = controlled_pde_residual(first, N=2 if d == 2 else 1)
        if p["shadow_traj"]:
            summary["shadowing"] = noise_shadowing_probe(first, p["shadow_eps"], p["shadow_traj"], seed=cfg.seed)
    if d == 2:
        summary["jacobian_growth"] = [jacobian_growth_demo(float(M)) for M in p["M"]]
    return summary


RUNNERS = {
    "simulate": run_simulate,
    "lyapunov": run_lyapunov,
    "expansion": run_expansion,
    "gradient": run_gradient,
    "scalar": run_scalar,
    "yaglom": run_yaglom,
    "hormander": run_hormander,
    "control": run_control,
}


def execute(cfg: ExperimentConfig, out: Path, resume: bool = False, threads: int = 1) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    summary = RUNNERS[cfg.kind](cfg, out, resume=resume, threads=threads)
    (out / "summary.json").write_text(dumps(summary))
    ck = out / CHECKPOINT
    if ck.exists():
        ck.unlink()
    return summary

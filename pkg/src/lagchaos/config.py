"""Experiment configuration: TOML parsing, static validation and run manifests.

A configuration is a TOML document with a top-level ``kind`` and one table
per component. Unknown keys are rejected and every error names the dotted
path of the offending field, e.g. ``fluid.variant``.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from . import __version__
from .fluid import VARIANTS, FluidModelConfig
from .forcing import ForcingSpec

KINDS = ("simulate", "lyapunov", "expansion", "gradient", "scalar", "yaglom", "hormander", "control")
ASSUMPTION_KINDS = {"lyapunov", "expansion", "gradient", "scalar", "yaglom"}


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_REQ = object()

# (type, default) per field; _REQ marks required fields
SCHEMA: dict[str, dict[str, tuple]] = {
    "fluid": {
        "variant": (str, _REQ),
        "d": (int, _REQ),
        "nu": (float, 1.0),
        "eta": (float, 0.0),
        "N": (int, None),
        "dt": (float, None),
        "nonlinearity": (str, "collocation"),
        "burn_in": (float, 20.0),
    },
    "forcing": {
        "modes": (list, None),
        "q": (object, 1.0),
        "c": (float, 1.0),
        "alpha": (float, None),
        "kmax": (int, None),
        "L": (int, 1),
        "assumption_low_modes": (bool, False),
        "assumption_high_modes": (bool, False),
        "stokes_weak_condition": (bool, False),
    },
    "simulate": {"horizon": (float, _REQ), "record_every": (int, 10)},
    "lyapunov": {
        "horizon": (float, _REQ),
        "n_traj": (int, 16),
        "n_batches": (int, 50),
        "qr_every": (int, 10),
        "substeps": (int, 1),
        "ci_width": (float, None),
    },
    "expansion": {"horizon": (float, _REQ), "n_traj": (int, 16), "n_dirs": (int, 32)},
    "gradient": {
        "horizon": (float, _REQ),
        "n_particles": (int, 256),
        "n_real": (int, 8),
        "record_every": (float, 1.0),
        "fit_from": (float, 0.1),
        "initial_mode": (list, None),
    },
    "scalar": {
        "kappa": (object, _REQ),
        "Ng": (object, _REQ),
        "dt": (object, None),
        "burn_in": (float, 20.0),
        "horizon": (float, _REQ),
        "n_batches": (int, 10),
        "sample_every": (int, 10),
        "flux_every": (int, 20),
        "modes": (list, None),
        "q": (object, None),
        "truncation": (str, "ball"),
    },
    "yaglom": {
        "ell_min": (float, 0.02),
        "ell_max": (float, 3.0),
        "n_ell": (int, 60),
        "tol": (float, 0.25),
        "khm_radius": (float, 1.0),
    },
    "hormander": {
        "system": (str, "stokes"),
        "dim": (int, 2),
        "modes": (list, None),
        "target": (str, "projective"),
        "depth": (int, 4),
        "samples": (int, 1000),
        "N": (int, 3),
    },
    "control": {
        "dim": (int, 2),
        "x": (list, None),
        "v": (list, None),
        "x_target": (list, None),
        "v_target": (list, None),
        "n_random": (int, 0),
        "M": (list, [10.0, 1000.0]),
        "shadow_eps": (list, [0.5, 1.0]),
        "shadow_traj": (int, 0),
    },
}


def _coerce(path: str, value: Any, typ) -> Any:
    if typ is object:
        return value
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ is bool and isinstance(value, bool):
        return value
    if typ is str and isinstance(value, str):
        return value
    if typ is list and isinstance(value, list):
        return value
    raise ConfigError(path, f"expected {typ.__name__}, got {type(value).__name__}")


def _section(raw: dict, name: str, required: bool) -> dict:
    if name not in raw:
        if required:
            raise ConfigError(name, "missing required table")
        data = {}
    else:
        data = raw[name]
        if not isinstance(data, dict):
            raise ConfigError(name, "expected a table")
    schema = SCHEMA[name]
    unknown = sorted(set(data) - set(schema))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", "unknown field")
    out = {}
    for key, (typ, default) in schema.items():
        path = f"{name}.{key}"
        if key in data:
            out[key] = _coerce(path, data[key], typ)
        elif default is _REQ:
            raise ConfigError(path, "missing required field")
        else:
            out[key] = default
    return out


def _mode_list(path: str, modes, d: int) -> list[tuple]:
    try:
        arr = np.array(modes, dtype=np.int64).reshape(-1, d)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, f"expected a list of {d}-component integer wavevectors") from exc
    if np.any(np.all(arr == 0, axis=1)):
        raise ConfigError(path, "zero wavevector is not allowed")
    return [tuple(int(c) for c in k) for k in arr]


def forcing_from_section(sec: dict, d: int, path: str = "forcing") -> ForcingSpec:
    if sec.get("modes") is not None:
        modes = _mode_list(f"{path}.modes", sec["modes"], d)
        q = sec.get("q", 1.0)
        if isinstance(q, list):
            if len(q) != len(modes):
                raise ConfigError(f"{path}.q", f"needs {len(modes)} amplitudes, got {len(q)}")
            qs = [float(a) for a in q]
        else:
            qs = [float(q)] * len(modes)
        table = dict(zip(modes, qs))
        return ForcingSpec(d, table=table, assumption_low_modes=sec.get("assumption_low_modes", False),
                           assumption_high_modes=sec.get("assumption_high_modes", False))
    if sec.get("kmax") is None:
        raise ConfigError(f"{path}.modes", "give either modes or a power law with kmax")
    return ForcingSpec(d, c=sec["c"], alpha=sec["alpha"], kmax=sec["kmax"], L=sec["L"],
                       assumption_low_modes=sec["assumption_low_modes"],
                       assumption_high_modes=sec["assumption_high_modes"])


@dataclass
class ExperimentConfig:
    """Parsed configuration. ``raw`` keeps the normalised tables for hashing."""

    kind: str
    seed: int
    out: str
    checkpoint_every: int
    sections: dict
    fluid: FluidModelConfig | None = None
    forcing: ForcingSpec | None = None
    source_path: str | None = None
    raw: dict = field(default_factory=dict)

    @property
    def params(self) -> dict:
        return self.sections.get(self.kind, {})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "out": self.out,
                "checkpoint_every": self.checkpoint_every, **self.sections}

    def config_hash(self) -> str:
        """Hash of everything that determines the output (the output path excluded)."""
        body = {k: v for k, v in self.to_dict().items() if k != "out"}
        text = json.dumps(body, sort_keys=True, default=_json_default)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serialisable: {type(o)}")


def parse_config(raw: dict, source_path: str | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a table")
    allowed_top = {"kind", "seed", "out", "checkpoint_every"} | set(SCHEMA)
    unknown = sorted(set(raw) - allowed_top)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    if "kind" not in raw:
        raise ConfigError("kind", "missing required field")
    kind = _coerce("kind", raw["kind"], str)
    if kind not in KINDS:
        raise ConfigError("kind", f"must be one of {', '.join(KINDS)}")
    seed = _coerce("seed", raw.get("seed", 0), int)
    out = _coerce("out", raw.get("out", f"runs/{kind}"), str)
    ckpt = _coerce("checkpoint_every", raw.get("checkpoint_every", 0), int)
    sections = {}
    fluid = forcing = None
    needs_fluid = kind not in ("hormander", "control")
    if needs_fluid:
        fsec = _section(raw, "fluid", True)
        if fsec["variant"] not in VARIANTS:
            raise ConfigError("fluid.variant", f"must be one of {', '.join(VARIANTS)}")
        if fsec["d"] not in (2, 3):
            raise ConfigError("fluid.d", "must be 2 or 3")
        sections["fluid"] = fsec
        gsec = _section(raw, "forcing", True)
        sections["forcing"] = gsec
        forcing = forcing_from_section(gsec, fsec["d"])
        try:
            fluid = FluidModelConfig(fsec["variant"], fsec["d"], forcing, nu=fsec["nu"], eta=fsec["eta"],
                                     N=fsec["N"], dt=fsec["dt"], nonlinearity=fsec["nonlinearity"])
        except ValueError as exc:
            raise ConfigError("fluid", str(exc)) from exc
    if kind == "yaglom":
        sections["scalar"] = _section(raw, "scalar", True)
        sections["yaglom"] = _section(raw, "yaglom", False)
    else:
        sections[kind] = _section(raw, kind, kind not in ("hormander", "control"))
    for name in ("scalar",):
        if name in sections:
            _check_sweep(sections[name])
    return ExperimentConfig(kind, seed, out, ckpt, sections, fluid, forcing, source_path, raw)


def _check_sweep(sec: dict):
    kap = sec["kappa"] if isinstance(sec["kappa"], list) else [sec["kappa"]]
    ng = sec["Ng"] if isinstance(sec["Ng"], list) else [sec["Ng"]] * len(kap)
    if len(ng) != len(kap):
        raise ConfigError("scalar.Ng", "needs one entry per kappa")
    for k in kap:
        if not isinstance(k, (int, float)) or k <= 0:
            raise ConfigError("scalar.kappa", "diffusivities must be positive numbers")
    for n in ng:
        if not isinstance(n, int) or n < 2:
            raise ConfigError("scalar.Ng", "resolutions must be integers >= 2")
    dts = sec["dt"]
    if isinstance(dts, list) and len(dts) != len(kap):
        raise ConfigError("scalar.dt", "needs one entry per kappa")
    sec["kappa"] = [float(k) for k in kap]
    sec["Ng"] = list(ng)
    if dts is not None and not isinstance(dts, list):
        sec["dt"] = [float(dts)] * len(kap)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"TOML syntax error: {exc}") from exc
    return parse_config(raw, str(path))


# -- static validation --------------------------------------------------------------


def _check(name: str, status: str, detail: str) -> dict:
    return {"name": name, "status": status, "detail": detail}


def _gradient_rms(forcing: ForcingSpec, d: int, nu: float) -> float:
    """Root mean square velocity gradient of the stationary Stokes field."""
    modes, q = forcing.amplitudes()
    # each coefficient has variance q^2 / (2 nu |k|^2); avg |grad u|^2 = 1/2 sum |k|^2 c^2
    return math.sqrt(0.5 * (d - 1) * float(np.sum(q**2)) / (2 * nu))


def stokes_weak_modes(d: int) -> list[tuple]:
    return [tuple(int(c) for c in row) for row in np.vstack([np.eye(d, dtype=int), -np.eye(d, dtype=int)])]


def validate(cfg: ExperimentConfig) -> dict:
    """Static checks of forcing assumptions, stability and resolution guards."""
    checks = []
    if cfg.forcing is not None:
        fsec = cfg.sections["forcing"]
        d = cfg.fluid.d
        problems = cfg.forcing.check()
        if problems:
            checks.append(_check("forcing.assumptions", "FAIL", "; ".join(problems)))
        elif fsec["assumption_low_modes"] or fsec["assumption_high_modes"]:
            checks.append(_check("forcing.assumptions", "PASS", "requested nondegeneracy assumptions hold"))
        weak_ok = False
        if fsec["stokes_weak_condition"]:
            active = cfg.forcing.active_set()
            missing = [k for k in stokes_weak_modes(d) if k not in active]
            if cfg.fluid.variant != "stokes":
                checks.append(_check("forcing.stokes_weak_condition", "FAIL",
                                     "the weaker condition applies to the Stokes system only"))
            elif missing:
                checks.append(_check("forcing.stokes_weak_condition", "FAIL", f"missing modes {missing}"))
            else:
                weak_ok = True
                checks.append(_check("forcing.stokes_weak_condition", "PASS",
                                     "symmetric set containing the coordinate wavevectors"))
        hyp = weak_ok or ((fsec["assumption_low_modes"] or fsec["assumption_high_modes"]) and not problems)
        if cfg.kind in ASSUMPTION_KINDS and not hyp:
            checks.append(_check("hypothesis", "WARN",
                                 f"{cfg.kind} needs a nondegenerate forcing but no assumption flag is set"))
        checks.extend(_stability_checks(cfg))
    if cfg.kind in ("scalar", "yaglom"):
        checks.extend(_resolution_checks(cfg))
    if cfg.kind == "hormander":
        p = cfg.params
        if p["system"] not in ("stokes", "galerkin"):
            checks.append(_check("hormander.system", "FAIL", "must be stokes or galerkin"))
        if p["target"] not in ("projective", "projective_check", "matrix"):
            checks.append(_check("hormander.target", "FAIL", "must be projective, projective_check or matrix"))
    worst = "PASS"
    for c in checks:
        if c["status"] == "FAIL":
            worst = "FAIL"
        elif c["status"] == "WARN" and worst == "PASS":
            worst = "WARN"
    return {"status": worst, "checks": checks, "kind": cfg.kind}


def _stability_checks(cfg: ExperimentConfig) -> list:
    out = []
    fl = cfg.fluid
    dt = fl.dt if fl.dt is not None else fl.default_dt()
    if not fl.linear:
        bound = fl.default_dt()
        status = "WARN" if dt > bound else "PASS"
        out.append(_check("fluid.dt", status, f"dt={dt:g}, stability bound {bound:.4g}"))
    if cfg.kind in ASSUMPTION_KINDS and fl.linear:
        s = _gradient_rms(cfg.forcing, fl.d, fl.nu)
        bound = 0.2 / (3 * s)
        sweep = cfg.sections.get("scalar", {}).get("dt")
        for step in (sweep if sweep else [dt]):
            status = "WARN" if step > bound else "PASS"
            out.append(_check("lagrangian.dt", status,
                              f"dt={step:g}, accuracy bound 0.2/(3 x rms strain) = {bound:.4g}"))
    return out


def _resolution_checks(cfg: ExperimentConfig) -> list:
    out = []
    sec = cfg.sections["scalar"]
    fl = cfg.fluid
    s = _gradient_rms(cfg.forcing, fl.d, fl.nu)
    for kappa, ng in zip(sec["kappa"], sec["Ng"]):
        kb = math.sqrt(s / kappa)
        need = math.ceil(1.3 * kb * 1.5)
        status = "PASS" if ng >= need else "WARN"
        out.append(_check(f"scalar.Ng[kappa={kappa:g}]", status,
                          f"Ng={ng}; Batchelor wavenumber {kb:.3g} suggests Ng >= {need}"))
    return out


# -- manifest ---------------------------------------------------------------------


@dataclass
class RunManifest:
    kind: str
    config_hash: str
    version: str
    seed: int
    wall_time: float
    summary: dict
    config_path: str | None = None
    resumed: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config_hash": self.config_hash,
            "code_version": self.version,
            "seed": self.seed,
            "wall_time_s": round(self.wall_time, 3),
            "config_path": self.config_path,
            "resumed": self.resumed,
            "summary": self.summary,
        }


def make_manifest(cfg: ExperimentConfig, wall: float, summary: dict, resumed: bool = False) -> RunManifest:
    return RunManifest(cfg.kind, cfg.config_hash(), __version__, cfg.seed, wall, summary, cfg.source_path, resumed)


def dumps(obj) -> str:
    """Canonical JSON used for every summary artifact."""
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default, allow_nan=True) + "\n"

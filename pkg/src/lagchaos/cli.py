"""Command line entry point: ``lagchaos <subcommand> ...``.

Every experiment subcommand reads a TOML config (``--config``), applies the
``--seed``/``--out`` overrides, runs, and writes ``summary.json`` and
``manifest.json`` plus experiment specific CSV/JSONL files into the output
directory. ``hormander-check`` and ``control-demo`` can also be driven by flags
alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, ExperimentConfig, dumps, load_config, make_manifest, parse_config, validate
from .experiments import CheckpointMismatch, execute

log = logging.getLogger("lagchaos")

SUBCOMMAND_KIND = {
    "simulate": "simulate",
    "lyapunov": "lyapunov",
    "expansion": "expansion",
    "gradient": "gradient",
    "scalar": "scalar",
    "yaglom": "yaglom",
    "hormander-check": "hormander",
    "control-demo": "control",
}


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="TOML experiment configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for trajectory ensembles")
    p.add_argument("--resume", action="store_true", help="continue from a checkpoint in the output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lagchaos", description="Lagrangian chaos and passive scalar experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "lyapunov", "expansion", "gradient", "scalar", "yaglom"):
        _common(sub.add_parser(name, help=f"run the {name} experiment"))
    run = sub.add_parser("run", help="run whatever experiment the config declares")
    _common(run)
    h = sub.add_parser("hormander-check", help="numerical bracket rank checks")
    _common(h, config_required=False)
    h.add_argument("--system", choices=("stokes", "galerkin"))
    h.add_argument("--dim", type=int, choices=(2, 3))
    h.add_argument("--modes", help="forced wavevectors, e.g. '1,0;0,1' (closed under k -> -k)")
    h.add_argument("--target", choices=("projective", "projective_check", "matrix"))
    h.add_argument("--depth", type=int)
    h.add_argument("--samples", type=int)
    c = sub.add_parser("control-demo", help="explicit controls and the Jacobian growth demo")
    _common(c, config_required=False)
    c.add_argument("--dim", type=int, choices=(2, 3))
    for name in ("x", "v", "x-target", "v-target"):
        c.add_argument(f"--{name}", help="comma separated components")
    c.add_argument("--n-random", type=int)
    v = sub.add_parser("validate", help="static checks of a config")
    v.add_argument("--config", required=True)
    return ap


def _vector(text: str | None):
    return None if text is None else [float(s) for s in text.split(",")]


def _flag_overrides(args) -> dict:
    if args.command == "hormander-check":
        sec = {}
        for key in ("system", "dim", "target", "depth", "samples"):
            if getattr(args, key) is not None:
                sec[key] = getattr(args, key)
        if args.modes is not None:
            sec["modes"] = [[int(c) for c in k.split(",")] for k in args.modes.split(";")]
        return sec
    if args.command == "control-demo":
        sec = {}
        if args.dim is not None:
            sec["dim"] = args.dim
        for key in ("x", "v", "x_target", "v_target"):
            val = _vector(getattr(args, key))
            if val is not None:
                sec[key] = val
        if args.n_random is not None:
            sec["n_random"] = args.n_random
        return sec
    return {}


def resolve_config(args) -> ExperimentConfig:
    kind = SUBCOMMAND_KIND.get(args.command)
    if args.config:
        cfg = load_config(args.config)
        raw = dict(cfg.raw)
    else:
        raw = {"kind": kind}
    if kind is not None and raw.get("kind") != kind:
        raise ConfigError("kind", f"config declares '{raw.get('kind')}' but the subcommand runs '{kind}'")
    overrides = _flag_overrides(args)
    if overrides:
        raw[raw["kind"]] = {**raw.get(raw["kind"], {}), **overrides}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    return parse_config(raw, args.config)


def cmd_validate(args) -> int:
    report = validate(load_config(args.config))
    sys.stdout.write(dumps(report))
    return 1 if report["status"] == "FAIL" else 0


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    for c in validate(cfg)["checks"]:
        if c["status"] != "PASS":
            log.warning("%s %s: %s", c["status"], c["name"], c["detail"])
    out = Path(cfg.out)
    t0 = time.perf_counter()
    summary = execute(cfg, out, resume=args.resume, threads=max(1, args.threads))
    manifest = make_manifest(cfg, time.perf_counter() - t0, summary, resumed=args.resume)
    (out / "manifest.json").write_text(dumps(manifest.to_dict()))
    (out / "config.json").write_text(dumps(cfg.to_dict()))
    print(json.dumps({"kind": cfg.kind, "out": str(out), "config_hash": manifest.config_hash}))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            return cmd_validate(args)
        return cmd_run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

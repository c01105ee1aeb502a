"""Command line behaviour: determinism, config errors, resume and validation."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from lagchaos import experiments
from lagchaos.cli import main

LYAP = """
kind = "lyapunov"
seed = 5
checkpoint_every = {ckpt}

[fluid]
variant = "stokes"
d = 2
dt = {dt}
burn_in = 2.0

[forcing]
modes = {modes}
stokes_weak_condition = true

[lyapunov]
horizon = 20.0
n_traj = 4
n_batches = 4
"""

SIM = """
kind = "simulate"
seed = 2
checkpoint_every = {ckpt}

[fluid]
variant = "galerkin"
d = 2
N = 3
nu = 0.5
dt = 0.01

[forcing]
modes = [[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [-1, -1], [1, -1], [-1, 1]]
assumption_low_modes = true

[simulate]
horizon = 4.0
record_every = 5
"""

FOUR = "[[1, 0], [-1, 0], [0, 1], [0, -1]]"


def write(tmp_path, text, name="cfg.toml", **kw):
    defaults = {"ckpt": 0, "dt": 0.05, "modes": FOUR}
    defaults.update(kw)
    p = tmp_path / name
    p.write_text(text.format(**defaults) if "{" in text else text)
    return str(p)


def run_json(argv, capsys):
    rc = main(argv)
    out = capsys.readouterr().out
    return rc, out


class Crash(RuntimeError):
    pass


class TestRuns:
    def test_same_seed_same_summary(self, tmp_path, capsys):
        cfg = write(tmp_path, LYAP)
        for name in ("a", "b"):
            assert main(["lyapunov", "--config", cfg, "--out", str(tmp_path / name)]) == 0
        a = (tmp_path / "a" / "summary.json").read_bytes()
        assert a == (tmp_path / "b" / "summary.json").read_bytes()
        man = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert man["seed"] == 5 and len(man["config_hash"]) == 16
        line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert line["kind"] == "lyapunov"

    def test_seed_override_changes_result(self, tmp_path):
        cfg = write(tmp_path, LYAP)
        main(["lyapunov", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["lyapunov", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "6"])
        a = json.loads((tmp_path / "a" / "summary.json").read_text())
        b = json.loads((tmp_path / "b" / "summary.json").read_text())
        assert a["lambda"] != b["lambda"]

    def test_threads_do_not_change_summary(self, tmp_path):
        cfg = write(tmp_path, LYAP)
        main(["lyapunov", "--config", cfg, "--out", str(tmp_path / "s")])
        main(["lyapunov", "--config", cfg, "--out", str(tmp_path / "p"), "--threads", "2"])
        assert (tmp_path / "s" / "summary.json").read_bytes() == (tmp_path / "p" / "summary.json").read_bytes()

    def test_console_script(self, tmp_path):
        cfg = write(tmp_path, SIM)
        res = subprocess.run([sys.executable, "-m", "lagchaos.cli", "simulate", "--config", cfg,
                              "--out", str(tmp_path / "o")], capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        rows = (tmp_path / "o" / "energy.csv").read_text().splitlines()
        assert rows[0] == "t,energy,enstrophy,sup_u" and len(rows) == 81


class TestConfigErrors:
    def test_missing_required_field_is_named(self, tmp_path, capsys):
        cfg = write(tmp_path, LYAP.replace("horizon = 20.0\n", ""))
        assert main(["lyapunov", "--config", cfg]) == 2
        assert "lyapunov.horizon" in capsys.readouterr().err

    def test_wrong_type_is_named(self, tmp_path, capsys):
        cfg = write(tmp_path, LYAP.replace("d = 2", 'd = "two"'))
        assert main(["lyapunov", "--config", cfg]) == 2
        assert "fluid.d" in capsys.readouterr().err

    def test_kind_mismatch(self, tmp_path, capsys):
        cfg = write(tmp_path, LYAP)
        assert main(["simulate", "--config", cfg]) == 2
        assert "kind" in capsys.readouterr().err

    def test_unknown_field(self, tmp_path, capsys):
        cfg = write(tmp_path, LYAP.replace("n_traj = 4", "n_traj = 4\ncolour = 1"))
        assert main(["lyapunov", "--config", cfg]) == 2
        assert "lyapunov.colour" in capsys.readouterr().err


class TestResume:
    @pytest.mark.parametrize("text,kind,every", [(LYAP, "lyapunov", 150), (SIM, "simulate", 100)],
                             ids=["lyapunov", "simulate"])
    def test_interrupted_run_resumes_exactly(self, tmp_path, monkeypatch, text, kind, every):
        cfg = write(tmp_path, text, ckpt=every)
        ref = tmp_path / "ref"
        assert main([kind, "--config", cfg, "--out", str(ref)]) == 0

        out = tmp_path / "cut"
        real = experiments.save_checkpoint
        calls = []

        def crash_after_two(*args):
            real(*args)
            calls.append(1)
            if len(calls) == 2:
                raise Crash

        monkeypatch.setattr(experiments, "save_checkpoint", crash_after_two)
        with pytest.raises(Crash):
            main([kind, "--config", cfg, "--out", str(out)])
        monkeypatch.setattr(experiments, "save_checkpoint", real)
        assert (out / experiments.CHECKPOINT).exists()
        assert main([kind, "--config", cfg, "--out", str(out), "--resume"]) == 0
        assert (out / "summary.json").read_bytes() == (ref / "summary.json").read_bytes()
        assert not (out / experiments.CHECKPOINT).exists()
        assert json.loads((out / "manifest.json").read_text())["resumed"] is True

    def test_snapshot_file_resumes_exactly(self, tmp_path):
        """A checkpoint written from a partially advanced run gives the uninterrupted summary."""
        cfg_path = write(tmp_path, LYAP)
        from lagchaos.config import load_config
        from lagchaos.lyapunov import CocycleRun

        assert main(["lyapunov", "--config", cfg_path, "--out", str(tmp_path / "ref")]) == 0
        cfg = load_config(cfg_path)
        p = cfg.params
        run = CocycleRun(experiments._path(cfg), p["horizon"], p["n_traj"], cfg.seed, p["n_batches"],
                         p["qr_every"], p["substeps"])
        run.advance(700)
        out = tmp_path / "part"
        out.mkdir()
        experiments.save_checkpoint(out, cfg, run.snapshot())
        assert main(["lyapunov", "--config", cfg_path, "--out", str(out), "--resume"]) == 0
        assert (out / "summary.json").read_bytes() == (tmp_path / "ref" / "summary.json").read_bytes()

    def test_mismatched_checkpoint_refused(self, tmp_path, capsys):
        a = write(tmp_path, LYAP, name="a.toml")
        b = write(tmp_path, LYAP.replace("seed = 5", "seed = 9"), name="b.toml")
        from lagchaos.config import load_config

        out = tmp_path / "o"
        out.mkdir()
        experiments.save_checkpoint(out, load_config(a), {"traj": np.array(0)})
        assert main(["lyapunov", "--config", b, "--out", str(out), "--resume"]) == 3
        assert "different configuration" in capsys.readouterr().err


class TestValidate:
    def test_missing_coordinate_mode_fails(self, tmp_path, capsys):
        cfg = write(tmp_path, SIM.replace("[0, 1], [0, -1], ", ""))
        rc, out = run_json(["validate", "--config", cfg], capsys)
        rep = json.loads(out)
        assert rc == 1 and rep["status"] == "FAIL"
        (chk,) = [c for c in rep["checks"] if c["name"] == "forcing.assumptions"]
        assert chk["status"] == "FAIL" and "[0, 1]" in chk["detail"]

    def test_four_mode_stokes_passes(self, tmp_path, capsys):
        rc, out = run_json(["validate", "--config", write(tmp_path, LYAP)], capsys)
        rep = json.loads(out)
        assert rc == 0 and rep["status"] == "PASS"
        assert any(c["name"] == "forcing.stokes_weak_condition" and c["status"] == "PASS" for c in rep["checks"])

    def test_large_step_warns(self, tmp_path, capsys):
        rc, out = run_json(["validate", "--config", write(tmp_path, LYAP, dt=0.5)], capsys)
        rep = json.loads(out)
        assert rc == 0 and rep["status"] == "WARN"
        (chk,) = [c for c in rep["checks"] if c["name"] == "lagrangian.dt"]
        assert chk["status"] == "WARN" and "bound" in chk["detail"]

    @pytest.mark.parametrize("name", sorted(p.name for p in (Path(__file__).parents[1] / "configs").glob("*.toml")))
    def test_shipped_configs_validate(self, name, capsys):
        path = Path(__file__).parents[1] / "configs" / name
        rc, out = run_json(["validate", "--config", str(path)], capsys)
        assert rc == 0 and json.loads(out)["status"] == "PASS"


class TestFlagDriven:
    def test_hormander_check(self, tmp_path):
        out = tmp_path / "h"
        assert main(["hormander-check", "--dim", "2", "--modes", "1,0;-1,0;0,1;0,-1", "--target", "projective",
                     "--samples", "50", "--depth", "2", "--out", str(out)]) == 0
        s = json.loads((out / "summary.json").read_text())
        assert s["spanning"]["status"] == "PASS" and s["spanning"]["n_points"] == 50
        assert s["closure"]["status"] == "PASS"

    def test_control_demo(self, tmp_path):
        out = tmp_path / "c"
        assert main(["control-demo", "--config", str(Path(__file__).parents[1] / "configs" / "control_demo.toml"),
                     "--x", "0,0", "--x-target", "3.14159,0", "--n-random", "2", "--out", str(out)]) == 0
        s = json.loads((out / "summary.json").read_text())
        assert s["max_endpoint_error"] < 1e-6

import json
import subprocess
import sys

import pytest

from rbsde.cli import main
from rbsde.runner import OUTPUT_ENV, RunConfig, apply_override
from rbsde.errors import ConfigError


def test_list_names(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out
    for name in ("ball", "polar_star", "sector", "revolve", "arc_sign", "arc_smooth", "constant_point",
                 "zero", "linear"):
        assert name in out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rbsde", "list"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0 and "[domains]" in res.stdout


def test_run_ball_ok(tmp_path):
    assert main(["run", "ball_constant", "--out", str(tmp_path)]) == 0
    checks = json.loads((tmp_path / "checks.json").read_text())
    assert checks["all_passed"] and checks["checks"]["convex_sanity"]["passed"]
    assert (tmp_path / "convergence.csv").read_text().startswith("n,sup_dist,")
    assert json.loads((tmp_path / "geometry.json").read_text())["admissible"]


def test_env_var_sets_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "from_env"))
    assert main(["geometry", "ball_constant"]) == 0
    assert (tmp_path / "from_env" / "geometry.json").is_file()
    # --out wins over the environment
    assert main(["geometry", "ball_constant", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "geometry.json").is_file()


def test_gated_check_failure_exit_1(tmp_path):
    # one row in the convergence table cannot support a rate fit
    code = main(["run", "ball_constant", "--out", str(tmp_path), "--set", 'checks.run=["distance_rate"]'])
    assert code == 1
    checks = json.loads((tmp_path / "checks.json").read_text())
    assert checks["failed"] == ["distance_rate"]


@pytest.mark.parametrize("args", [
    ["run", "no_such_config"],
    ["run", "ball_constant", "--set", "lattice.N=1"],
    ["run", "ball_constant", "--set", "domain.bogus=3"],
    ["run", "ball_constant", "--set", "solver.n_schedule=[8, 4]"],
    ["run", "ball_constant", "--set", "core.name=\"other\""],
    ["run", "ball_constant", "--set", "terminal.point=[2.0, 0.0]"],
    ["run", "ball_constant", "--set", "nonsense"],
    ["oracle", "--terminal", "constant_point"],
])
def test_config_errors_exit_2(args, tmp_path):
    assert main(args + ["--out", str(tmp_path)]) == 2


def test_inadmissible_geometry_exit_3(tmp_path):
    code = main(["run", "circle_alpha05", "--out", str(tmp_path), "--set", "domain.eta=5.0"])
    assert code == 3
    rep = json.loads((tmp_path / "geometry.json").read_text())
    assert rep["admissible"] is False and "eta" in rep["reason"]


def test_solver_failure_exit_4(tmp_path):
    code = main(["run", "circle_alpha05", "--out", str(tmp_path), "--set", "solver.method=\"picard\"",
                 "--set", "solver.n_schedule=[512]", "--set", "checks.run=[]"])
    assert code == 4


def test_schedule_exhausted_exit_4(tmp_path):
    code = main(["run", "circle_alpha05", "--out", str(tmp_path), "--set", "solver.n_schedule=[4, 8]",
                 "--set", "solver.stop_tol=1e-14", "--set", "checks.run=[]"])
    assert code == 4
    assert len((tmp_path / "convergence.csv").read_text().splitlines()) == 3


def test_oracle_verb(tmp_path, capsys):
    assert main(["oracle", "--alpha", "0.5", "--N", "200", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "oracle.json").read_text())
    assert rep["expected_var"] == pytest.approx(0.125, abs=1e-12)
    assert rep["unit_norm_error"] <= 1e-12
    assert "E[int dVar]" in capsys.readouterr().out


def test_overrides_parse_toml_values():
    cfg = {}
    apply_override(cfg, "solver.n_schedule=[4, 8]")
    apply_override(cfg, "terminal.name=arc_sign")
    apply_override(cfg, "lattice.T=0.5")
    assert cfg == {"solver": {"n_schedule": [4, 8]}, "terminal": {"name": "arc_sign"}, "lattice": {"T": 0.5}}
    with pytest.raises(ConfigError):
        apply_override(cfg, "=3")


def test_output_dir_precedence(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    cfg = RunConfig.from_dict({})
    assert str(cfg.output_dir()) == "rbsde_output"
    monkeypatch.setenv(OUTPUT_ENV, "/tmp/e")
    assert str(cfg.output_dir()) == "/tmp/e"
    cfg2 = RunConfig.from_dict({"output": {"dir": "/tmp/c"}})
    assert str(cfg2.output_dir()) == "/tmp/c" and str(cfg2.output_dir("/tmp/f")) == "/tmp/f"


def test_run_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["run", "ball_constant", "--out", str(d), "--set", "paths.dump=true"]) == 0
    for name in ("geometry.json", "convergence.csv", "checks.json", "paths.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()

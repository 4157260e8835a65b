import json

import pytest

from mfpricelab.cli import RunSpec, main, parse_config, run
from mfpricelab.errors import ConfigError

MINIMAL = """
[run]
model = zero
command = solve
out_dir = {out}
"""

FULL_MODEL = """
[grid]
n = 2
l = 1
m = 4
T = 1.0
L = 1.0

[factor]
kind = correlated-bm
rho = 0.5

[informed]
lambda = 1.0
weight = 0.5
cost_mode = affine
running_cost = constant
running_cost.value = 0.25
terminal_cost = constant
terminal_cost.value = 0.5
vol_common = constant
vol_common.value = 0.2
vol_idio = constant
vol_idio.value = 0.3

[standard]
lambda = 1.0
weight = 0.5
cost_mode = affine
running_cost = constant
running_cost.value = 0.25
terminal_cost = constant
terminal_cost.value = 0.5
vol_common = constant
vol_common.value = 0.2
vol_idio = constant
vol_idio.value = 0.3

[run]
command = solve
seed = 123
samples = 1500
damping = 1.0
tol = 1e-6
out_dir = {out}
"""


def write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestParseConfig:
    def test_minimal_preset_defaults(self, tmp_path):
        spec = parse_config(write(tmp_path, MINIMAL.format(out=tmp_path)))
        assert spec.command == "solve"
        assert spec.model.name == "zero"
        assert spec.run["samples"] == spec.model.solver.samples

    def test_damping_range_error_names_key(self, tmp_path):
        cfg = MINIMAL.format(out=tmp_path) + "damping = 1.5\n"
        with pytest.raises(ConfigError, match="damping"):
            parse_config(write(tmp_path, cfg))

    def test_parse_twice_identical(self, tmp_path):
        path = write(tmp_path, FULL_MODEL.format(out=tmp_path))
        a = parse_config(path)
        b = parse_config(path)
        assert a.run == b.run and a.command == b.command
        assert a.model.grid == b.model.grid

    def test_unknown_key_rejected(self, tmp_path):
        cfg = MINIMAL.format(out=tmp_path) + "wibble = 3\n"
        with pytest.raises(ConfigError, match="wibble"):
            parse_config(write(tmp_path, cfg))

    def test_unknown_section_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="mystery"):
            parse_config(write(tmp_path, "[mystery]\nx = 1\n"))

    def test_syntax_error_reports_line(self, tmp_path):
        bad = "[run]\nmodel = zero\nthis line has no equals\n"
        with pytest.raises(ConfigError, match="line 3"):
            parse_config(write(tmp_path, bad))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "absent.ini")

    def test_full_model_construction(self, tmp_path):
        spec = parse_config(write(tmp_path, FULL_MODEL.format(out=tmp_path)))
        assert spec.model.grid.n == 2 and spec.model.bounds.L == 1.0
        assert spec.model.informed.lam == 1.0

    def test_unknown_command(self, tmp_path):
        cfg = MINIMAL.format(out=tmp_path).replace("command = solve", "command = dance")
        with pytest.raises(ConfigError):
            parse_config(write(tmp_path, cfg))


class TestRun:
    def test_solve_deterministic_artifacts(self, tmp_path):
        out = tmp_path / "out"
        path = write(tmp_path, FULL_MODEL.format(out=out))
        status, manifest = run(parse_config(path))
        assert status == 0
        assert (out / "equilibrium.csv").exists()
        assert (out / "report.txt").exists()
        data = json.loads((out / "manifest.json").read_text())
        assert data["status"] == 0
        assert all(c["passed"] for c in data["checks"])
        assert data["config"]["run"]["seed"] == 123

    def test_repeat_run_byte_identical(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            path = write(tmp_path, FULL_MODEL.format(out=out), name=f"{out.name}.ini")
            status, _ = run(parse_config(path))
            assert status == 0
        assert (out1 / "equilibrium.csv").read_bytes() == (out2 / "equilibrium.csv").read_bytes()

    def test_clearing_needs_four_sizes(self, tmp_path):
        cfg = MINIMAL.format(out=tmp_path).replace("command = solve", "command = clearing")
        cfg += "n_values = 8\n"
        with pytest.raises(ConfigError, match="4"):
            run(parse_config(write(tmp_path, cfg)))

    def test_validate_command(self, tmp_path):
        out = tmp_path / "v"
        cfg = MINIMAL.format(out=out).replace("command = solve", "command = validate")
        status, manifest = run(parse_config(write(tmp_path, cfg)))
        assert status == 0
        assert (out / "validation.txt").exists()

    def test_exit_status_reflects_checks(self, tmp_path):
        # an unconverged solve (max_iter too small on a moving map) must exit 1
        out = tmp_path / "w"
        cfg = ("[run]\nmodel = single-informed\ncommand = solve\n"
               f"out_dir = {out}\nsamples = 800\nmax_iter = 1\ntol = 1e-9\n")
        status, manifest = run(parse_config(write(tmp_path, cfg)))
        assert status == 1
        assert any(not c["passed"] for c in manifest["checks"])


class TestMainEntry:
    def test_main_solve_preset(self, tmp_path, capsys):
        rc = main(["solve", "--model", "deterministic", "--out-dir", str(tmp_path / "m"),
                   "--samples", "1000", "--damping", "1.0"])
        assert rc == 0
        assert "[PASS]" in capsys.readouterr().out

    def test_main_config_error(self, tmp_path, capsys):
        rc = main(["solve", "--model", "not-a-preset"])
        assert rc == 2
        assert "configuration error" in capsys.readouterr().err

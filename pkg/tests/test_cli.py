import json
import subprocess
import sys

import pytest

from lodtr import cli


def test_run_exit_zero_and_outputs(tmp_path, capsys):
    code = cli.main(["run", "--preset", "tiny", "--methods", "lod-bfgs,rtr-tsrblod",
                     "--output", str(tmp_path)])
    assert code == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "rtr-tsrblod" in out and "lod-bfgs" in out
    rep = json.loads((tmp_path / "report.json").read_text())
    assert [m["method"] for m in rep["methods"]] == ["lod-bfgs", "rtr-tsrblod"]


def test_run_not_converged_exit(tmp_path):
    code = cli.main(["run", "--preset", "tiny", "--methods", "lod-bfgs", "--set", "fom_max_iter=1",
                     "--output", str(tmp_path), "--format", "json"])
    assert code == cli.EXIT_NOT_CONVERGED
    assert not (tmp_path / "report.txt").exists()


@pytest.mark.parametrize("argv", [
    ["run", "--preset", "tiny", "--methods", "simplex"],
    ["run", "--preset", "tiny", "--set", "n_h=4"],
    ["run", "--preset", "tiny", "--set", "novalue"],
    ["run", "--preset", "tiny", "--tr", "delta0=abc"],
])
def test_config_errors_exit_two(argv, tmp_path, capsys):
    assert cli.main(argv + ["--output", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_workers_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("LODTR_WORKERS", "2")
    assert cli.main(["run", "--preset", "tiny", "--methods", "", "--output", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["config"]["workers"] == 2 and rep["methods"] == []


def test_gap_study(tmp_path, capsys):
    assert cli.main(["gap-study", "--preset", "tiny", "--ells", "1,2", "--output", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "gap_study.json").read_text())["rows"]
    assert [r["ell"] for r in rows] == [1, 2]


def test_rom_dump_and_check(tmp_path, capsys):
    path = tmp_path / "rom.npz"
    assert cli.main(["rom-dump", "--preset", "tiny", "--mode", "relaxed", str(path)]) == 0
    assert path.exists() and path.with_suffix(".json").exists()
    assert cli.main(["rom-check", str(path), "--samples", "3"]) == 0
    out = capsys.readouterr().out
    assert "snapshot" in out and "FAIL" not in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "lodtr", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("run", "gap-study", "rom-dump", "rom-check"):
        assert cmd in proc.stdout

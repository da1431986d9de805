import json

import numpy as np
import pytest

from lodtr import harness


def test_config_precedence(tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text("[experiment]\npreset = tiny\nseed = 3\nworkers = 2\nmethods = fem-bfgs, lod-bfgs\n"
                   "[optimizer]\ndelta0 = 0.2\n")
    cfg = harness.ExperimentConfig.from_sources(ini, env={})
    assert (cfg.n_H, cfg.n_h, cfg.seed, cfg.workers) == (4, 16, 3, 2)
    assert cfg.methods == ("fem-bfgs", "lod-bfgs") and cfg.tr == {"delta0": 0.2}
    cfg = harness.ExperimentConfig.from_sources(ini, env={harness.WORKERS_ENV: "5"})
    assert cfg.workers == 5
    cfg = harness.ExperimentConfig.from_sources(ini, {"workers": 7, "tr": {"beta1": "0.25"}},
                                                env={harness.WORKERS_ENV: "5"})
    assert cfg.workers == 7 and cfg.tr_params().beta1 == 0.25 and cfg.tr_params().delta0 == 0.2


def test_config_defaults_are_desk():
    cfg = harness.ExperimentConfig.from_sources(env={})
    assert (cfg.n_H, cfg.n_h, cfg.ell, cfg.N1, cfg.N2) == (8, 160, 2, 20, 40)
    assert cfg.tr_params().tau_foc == 1e-6


@pytest.mark.parametrize("overrides", [
    {"n_h": 8, "n_H": 8},
    {"n_H": 3, "n_h": 16},
    {"ell": 0},
    {"methods": "fem-bfgs,newton"},
    {"rho": 0.5},
    {"workers": 0},
    {"constants": "guess"},
    {"bogus": 1},
    {"seed": "abc"},
    {"preset": "huge"},
    {"tr": {"nope": 1}},
])
def test_config_rejects(overrides):
    with pytest.raises(harness.ConfigError):
        harness.ExperimentConfig.from_sources(overrides=overrides, env={})


def test_missing_config_file(tmp_path):
    with pytest.raises(harness.ConfigError):
        harness.ExperimentConfig.from_sources(tmp_path / "none.ini", env={})


def test_empty_method_set(tmp_path):
    cfg = harness.ExperimentConfig.from_preset("tiny", methods=())
    report = harness.run(cfg)
    assert report.methods == [] and report.converged
    table = harness.format_table(report).splitlines()
    assert len(table) == 2 and table[0].split()[0] == "method"
    assert harness.format_csv(report).splitlines() == [",".join(harness.TABLE_COLUMNS)]


@pytest.fixture(scope="module")
def tiny_report():
    return harness.run(harness.ExperimentConfig.from_preset("tiny"))


def test_tiny_run(tiny_report):
    assert tiny_report.converged
    assert [m.method for m in tiny_report.methods] == list(harness.METHODS)
    fem, lod = tiny_report.method("fem-bfgs"), tiny_report.method("lod-bfgs")
    assert fem.counters["LOD local"] == 0 and fem.counters["FEM"] > 0
    assert lod.counters["FEM"] == 0 and lod.counters["LOD local"] > 0
    for name in ("tr-tsrblod", "rtr-tsrblod"):
        m = tiny_report.method(name)
        assert m.counters["LOD local"] < lod.counters["LOD local"]
        assert m.foc <= 1e-6 and m.rel_error < 1e-3


def test_report_roundtrip(tiny_report, tmp_path):
    paths = harness.emit_report(tiny_report, tmp_path)
    assert {p.name for p in paths} == {"report.txt", "report.csv", "report.json"}
    back = harness.load_report(tmp_path / "report.json")
    assert back.to_dict() == json.loads(json.dumps(tiny_report.to_dict()))
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert rows[0].split(",") == list(harness.TABLE_COLUMNS) and len(rows) == 5


def test_report_schema_check(tiny_report):
    d = tiny_report.to_dict()
    d["schema"] = 99
    with pytest.raises(ValueError):
        harness.RunReport.from_dict(d)


def test_unknown_format(tiny_report, tmp_path):
    with pytest.raises(ValueError):
        harness.emit_report(tiny_report, tmp_path, ["xml"])


def test_runs_are_deterministic(tiny_report):
    again = harness.run(harness.ExperimentConfig.from_preset("tiny", methods=("rtr-tsrblod",)))
    a, b = again.methods[0], tiny_report.method("rtr-tsrblod")
    assert a.mu == b.mu and a.counters == b.counters and a.history == b.history


def test_failing_method_is_captured(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("solver exploded")
    monkeypatch.setattr(harness, "run_method", boom)
    rep = harness.run(harness.ExperimentConfig.from_preset("tiny", methods=("lod-bfgs",)))
    assert not rep.converged and rep.methods[0].reason == "error" and "exploded" in rep.methods[0].error


def test_gap_study_trend():
    cfg = harness.ExperimentConfig.from_preset("tiny")
    rows = harness.gap_study(cfg, [1, 2, 4])
    err = [r["energy_error"] for r in rows]
    assert all(r["fem"] for r in rows)
    assert err[1] <= err[0] + 1e-12 and err[2] <= err[1] + 1e-12


def test_gap_study_skips_fem_when_too_large():
    cfg = harness.ExperimentConfig.from_preset("tiny", fem_max_dofs=10)
    rows = harness.gap_study(cfg, [1])
    assert not rows[0]["fem"] and np.isnan(rows[0]["gap"]) and np.isfinite(rows[0]["J_loc"])
    assert np.isnan(harness.lod_fem_gap(cfg))


@pytest.mark.xfail(strict=True, reason="without a right-hand-side correction the PG-LOD keeps an "
                   "O(H) consistency error even with global patches")
def test_saturated_gap_vanishes():
    cfg = harness.ExperimentConfig.from_preset("tiny")
    cfg.ell = harness.saturated_ell(cfg)
    assert harness.lod_fem_gap(cfg) <= 1e-9

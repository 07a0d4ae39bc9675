import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from deepsdrf import cli, dgp, harness, recommend, serialize


def tiny_config(**kw):
    base = dict(dgp=dgp.DgpConfig(n_patients=120, dim_d=3, seed=0), replications=1, ensemble_m=2,
                epochs=3, n_eval_doses=3, n_levels=5, n_draws=10, n_state_bins=3, rl_iters=5)
    base.update(kw)
    return harness.ExperimentConfig(**base)


@pytest.fixture(scope="module")
def report():
    return harness.run_scenario(tiny_config())


def test_smoke_report_structure(report):
    assert not report.failed and report.n_replications == 1
    for kind in harness.MODELS:
        for band in harness.BANDS:
            row = report.metrics[kind][band]
            assert set(row) == {"bias", "coverage", "rmse", "rmse_sqrt", "mean_half_width"}
            assert 0.0 <= row["coverage"]["mean"] <= 1.0
            assert row["rmse"]["mean"] == pytest.approx(row["rmse_sqrt"]["mean"] ** 2)
    rec = report.recommendation
    assert set(harness.POLICIES) <= set(rec)
    assert "gain_overall" in rec["deepsdrf_rs"]
    assert "deepsdrf_rs_minus_rl_dose" in rec


def test_report_is_deterministic(report):
    again = harness.run_scenario(tiny_config())
    assert json.dumps(again.to_dict(), sort_keys=True) == json.dumps(report.to_dict(), sort_keys=True)


def test_recommended_doses_stay_in_grid(report):
    rep = report.replications[0]["recommendation"]
    lo, hi = min(rep["grid"]), max(rep["grid"])
    for pol in harness.POLICIES[1:]:
        p = rep["policies"][pol]
        assert lo - 1e-12 <= p["dose_q05"] and p["dose_q95"] <= hi + 1e-12


def test_policy_outcomes_are_survival_curves(report):
    for p in report.replications[0]["recommendation"]["policies"].values():
        curve = np.array(p["curve"])
        assert curve[0] <= 1.0 and np.all(np.diff(curve) <= 1e-15)
        assert p["overall"] == pytest.approx(curve[1:].mean())


def test_config_hash_stable_and_sensitive():
    cfg = tiny_config()
    h = harness.config_hash(cfg, cfg.dgp)
    assert h == harness.config_hash(tiny_config(), cfg.dgp) and len(h) == 16
    assert h != harness.config_hash(cfg, replace(cfg.dgp, overlap_eta=0.1))
    assert h != harness.config_hash(replace(cfg, epochs=4), cfg.dgp)
    # the grid itself does not change a scenario's numbers
    assert h == harness.config_hash(replace(cfg, grid={"dim_d": [4]}), cfg.dgp)


def test_scenarios_vary_one_factor_at_a_time():
    cfg = tiny_config(grid={"dim_d": [3, 5], "overlap_eta": [0.1]})
    sc = cfg.scenarios()
    assert sc[0] == cfg.dgp and len(sc) == 3
    assert sc[1].dim_d == 5 and sc[1].overlap_eta == cfg.dgp.overlap_eta
    assert sc[2].overlap_eta == 0.1 and sc[2].dim_d == 3


def test_config_validation():
    with pytest.raises(ValueError):
        harness.ExperimentConfig.from_dict({"replicates": 3})
    with pytest.raises(ValueError):
        tiny_config(grid={"not_a_field": [1]})
    with pytest.raises(ValueError):
        tiny_config(eval_band=(90, 10))
    with pytest.raises(ValueError):
        tiny_config(truth_mode="closed")


def test_config_roundtrip():
    cfg = tiny_config(grid={"dim_d": [4, 8]})
    assert harness.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_failed_replications_fail_the_scenario(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("diverged")

    monkeypatch.setattr(harness, "fit_models", boom)
    rep = harness.run_scenario(tiny_config(replications=2))
    assert rep.failed and rep.n_failed == 2
    assert "RuntimeError: diverged" in rep.failures[0]["error"]


def test_failure_threshold(report):
    good = report.replications[0]
    bad = {"replication": 99, "error": "RuntimeError: x"}
    cfg = tiny_config()
    assert not harness.run_scenario(cfg, results=[good] * 8 + [bad] * 2).failed
    assert harness.run_scenario(cfg, results=[good] * 7 + [bad] * 3).failed


def test_write_reports(tmp_path, report):
    cfg = tiny_config()
    paths = harness.write_reports([report], tmp_path, cfg)
    data = json.loads(open(paths["report"]).read())
    assert data["scenarios"][0]["config_hash"] == report.config_hash
    assert "seconds" not in data["scenarios"][0]
    with open(paths["metrics"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["config_hash", "replication", "model", "band", "metric", "value"]
    assert len(rows) == 1 + 2 * 3 * 6
    with open(paths["curves"]) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + len(harness.POLICIES) * 13


# -- serialization -------------------------------------------------------------


def test_panel_csv_roundtrip(tmp_path):
    panel = dgp.simulate_panel(dgp.DgpConfig(n_patients=20, dim_d=3, seed=4))
    path = tmp_path / "p.csv"
    serialize.write_panel_csv(path, panel)
    header = path.read_text().splitlines()[0]
    assert header == "patient_id,t,x_1,x_2,x_3,a,event_time,censor_time,event_flag"
    back = serialize.read_panel_csv(path)
    for f in ("covariates", "treatment", "event_time", "censor_time", "event_flag"):
        assert np.array_equal(getattr(back, f), getattr(panel, f))
    assert back.max_followup == panel.max_followup


def test_panel_csv_rejects_ragged(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("patient_id,t,x_1,a,event_time,censor_time,event_flag\n"
                    "0,0,0.1,0.2,13,12,0\n0,1,0.1,0.2,13,12,0\n1,0,0.3,0.2,13,12,0\n")
    with pytest.raises(ValueError):
        serialize.read_panel_csv(path)
    path.write_text("id,t,x_1,a,event_time,censor_time,event_flag\n")
    with pytest.raises(ValueError):
        serialize.read_panel_csv(path)


def test_cadr_json_roundtrip(tmp_path):
    rec = {"a": 0.5, "t": [1, 2], "mean": [0.9, 0.8], "sd": [0.01, 0.02], "ci_lo": [0.88, 0.77],
           "ci_hi": [0.92, 0.83], "psi_bar": 0.85}
    serialize.write_cadr_json(tmp_path / "c.json", [rec])
    assert serialize.read_cadr_json(tmp_path / "c.json") == [rec]
    serialize.write_cadr_long_csv(tmp_path / "c.csv", [rec])
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["a", "patient_id", "t", "mean", "sd", "ci_lo", "ci_hi"] and len(rows) == 3


# -- command line --------------------------------------------------------------


def _write_cfg(path, **kw):
    cfg = tiny_config(**kw)
    path.write_text(json.dumps(cfg.to_dict()))
    return str(path)


def test_cli_end_to_end(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "cfg.json")
    out = str(tmp_path)
    assert cli.main(["simulate", "--config", cfg, "--out-dir", out, "--seed", "3"]) == 0
    panel = str(tmp_path / "panel.csv")
    assert cli.main(["fit", "--config", cfg, "--panel", panel, "--out-dir", out]) == 0
    for f in cli.MODEL_FILES.values():
        assert (tmp_path / f).exists()
    assert cli.main(["estimate", "--config", cfg, "--panel", panel, "--models", out, "--out-dir", out,
                     "--doses", "0.2,0.4", "--max-patients", "4"]) == 0
    recs = serialize.read_cadr_json(tmp_path / "cadr_deepsdrf.json")
    assert [r["a"] for r in recs] == [0.2, 0.4] and len(recs[0]["mean"]) == 4
    assert set(recs[0]) == {"a", "t", "mean", "sd", "ci_lo", "ci_hi", "psi_bar"}
    assert cli.main(["recommend", "--config", cfg, "--panel", panel, "--models", out, "--out-dir", out]) == 0
    rows = recommend.read_recommendations(tmp_path / "recommendations_deepsdrf.csv")
    assert {r.method for r in rows} == {"rs", "rl"} and len(rows) == 2 * 120
    assert cli.main(["evaluate", "--config", cfg, "--panel", panel, "--models", out, "--out-dir", out]) == 0
    ev = json.loads((tmp_path / "evaluation.json").read_text())
    assert "deepsdrf" in ev["metrics"] and "original" in ev["recommendation"]


def test_cli_benchmark_writes_reports(tmp_path):
    cfg = _write_cfg(tmp_path / "cfg.json", n_eval_doses=2)
    assert cli.main(["benchmark", "--config", cfg, "--out-dir", str(tmp_path), "--no-recommend"]) == 0
    for f in ("report.json", "metrics_long.csv", "survival_curves_long.csv", "timing.json"):
        assert (tmp_path / f).exists()


def test_cli_benchmark_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(harness, "fit_models", lambda *a, **k: 1 / 0)
    cfg = _write_cfg(tmp_path / "cfg.json")
    assert cli.main(["benchmark", "--config", cfg, "--out-dir", str(tmp_path)]) == 1


def test_cli_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("replicates: 3\n")
    assert cli.main(["simulate", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert cli.main(["fit", "--panel", str(tmp_path / "missing.csv"), "--out-dir", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_yaml_config(tmp_path):
    cfgfile = tmp_path / "c.yaml"
    cfgfile.write_text("dgp:\n  n_patients: 10\n  dim_d: 2\nreplications: 1\ncontinuous:\n  n_patients: 50\n"
                       "  eval_band: [20, 80]\n")
    cfg, cont = cli.load_config(str(cfgfile))
    assert cfg.dgp.n_patients == 10 and cont.n_patients == 50 and cont.eval_band == (20, 80)
    cfg = cli._apply_seed(cfg, 9)
    assert cfg.seed == 9 and cfg.dgp.seed == 9

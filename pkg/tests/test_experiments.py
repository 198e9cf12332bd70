import csv
import io
import json

import pytest

from cavlab import experiments as E
from cavlab import maps as M


def _cfg(**kw):
    return E.ScenarioConfig.from_dict({"schema": 1, **kw})


def test_config_validation():
    with pytest.raises(E.ConfigError):
        _cfg(scenario="no-such-scenario")
    with pytest.raises(E.ConfigError):
        E.ScenarioConfig.from_dict({"schema": 2, "scenario": "identity-suite"})
    with pytest.raises(E.ConfigError):
        _cfg(scenario="identity-suite", q=1.6)
    with pytest.raises(E.ConfigError):
        _cfg(scenario="identity-suite", quad="turbo")
    with pytest.raises(E.ConfigError):
        E.ScenarioConfig.from_dict({})
    with pytest.raises(E.ConfigError):
        _cfg(scenario="path-scan", ladders={"t": []}).ladder("t", [0.0])


def test_unknown_keys_become_params():
    cfg = _cfg(scenario="path-scan", tau=0.25, quad={"preset": "fast", "n_r": 9})
    assert cfg.params == {"tau": 0.25}
    assert cfg.quad_spec.n_r == 9
    assert cfg.echo()["quad"]["n_r"] == 9


def test_build_map_families():
    spec = {"family": "hold", "parameters": {"rho": 0.5, "f": {"family": "twist_shift"}}}
    assert isinstance(E.build_map(spec), M.HoldMap)
    g = E.build_map({"family": "gamma", "parameters": {"base": spec, "tau": 0.3, "t": 0.5}})
    assert isinstance(g, M.PathGamma)
    assert E.build_map({"family": "radial", "parameters": {"profile": "cavity", "lam": 0.3}}).singularity.lower_bound == 0.3
    for bad in ({"family": "warp"}, {"family": "circle", "parameters": {"base": {"family": "identity"}}}, {"parameters": {}}):
        with pytest.raises(E.ConfigError):
            E.build_map(bad)
    with pytest.raises(E.ConfigError):
        E.build_map({"family": "hold", "parameters": {"rho": 1.5}})


def test_empty_report_csv_is_header_only(tmp_path):
    rep = E.RunReport("identity-suite", {})
    path = E.emit_report(rep, tmp_path / "r.csv", "csv")
    assert path.read_text().splitlines() == [",".join(E.CSV_COLUMNS)]
    assert rep.passed


def test_report_json_round_trip(tmp_path):
    rep = E.run_scenario(_cfg(scenario="identity-suite", instances=500))
    path = E.emit_report(rep, tmp_path / "r.json")
    data = json.loads(path.read_text())
    assert data == json.loads(E.report_json(rep))
    assert data["passed"] is True
    assert {c["status"] for c in data["checks"]} == {"pass"}


def test_overall_pass_is_conjunction():
    rep = E.RunReport("x", {})
    rep.add("a", 1.0, 1.0, 0.0, True)
    assert rep.passed
    rep.close("b", 1.1, 1.0, rtol=0.01)
    assert not rep.passed
    assert rep.checks[-1].status == "fail"


def test_nonconvergence_fails_the_report():
    class R:
        error, converged = 1.0, False

    rep = E.RunReport("x", {})
    rep.add("a", 1.0, 1.0, 0.0, True)
    rep.track("q", R())
    assert not rep.passed
    assert rep.to_dict()["nonconverged"] == ["q"]


def test_path_scan_csv_has_one_row_per_t():
    rep = E.run_scenario(_cfg(scenario="path-scan", quad="fast"))
    rows = list(csv.DictReader(io.StringIO(E.report_csv(rep))))
    assert len(rows) == 6
    assert all(r["scenario"] == "path-scan" for r in rows)
    assert rep.summary["relative_spread"] < 1e-3


def test_reports_are_deterministic():
    cfg = _cfg(scenario="divergence-probe", quad="fast")
    a, b = E.run_scenario(cfg).to_dict(), E.run_scenario(cfg).to_dict()
    a.pop("timings"), b.pop("timings")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_cli_exit_codes(tmp_path, capsys):
    out = tmp_path / "id.json"
    assert E.main(["run", "identity-suite", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["scenario"] == "identity-suite"
    assert E.main(["run", "no-such-scenario"]) == 2
    assert E.main(["run", "identity-suite", "--q", "2.0"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema": 1, "scenario": "path-scan"}))
    assert E.main(["run", "identity-suite", "--config", str(bad)]) == 2
    bad.write_text("{not json")
    assert E.main(["run", "identity-suite", "--config", str(bad)]) == 2


def test_cli_failing_check_exits_one(tmp_path, monkeypatch):
    def failing(cfg, rep):
        rep.add("always off", 1.0, 0.0, 0.5, False)

    monkeypatch.setitem(E.SCENARIOS, "failing", (failing, "test scenario"))
    out = tmp_path / "f.csv"
    assert E.main(["run", "failing", "--out", str(out), "--format", "csv"]) == 1
    assert out.read_text().splitlines()[1].endswith(",fail")


def test_cli_list(capsys):
    assert E.main(["list"]) == 0
    out = capsys.readouterr().out
    for name in E.SCENARIOS:
        assert name in out

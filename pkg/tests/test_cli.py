import csv
import json
import os

import numpy as np
import pytest

from spsafe.cli import ConfigError, RunConfig, main
from spsafe.svg import Series, render_svg


def _run(tmp_path, *argv):
    cwd = os.getcwd()
    os.chdir(tmp_path)
    try:
        return main(list(argv))
    finally:
        os.chdir(cwd)


def test_simulate_writes_csv_and_summary(tmp_path):
    rc = _run(tmp_path, "simulate", "--system", "toy", "--epsilon", "0.01", "--tf", "1",
              "--out", "traj.csv")
    assert rc == 0
    with open(tmp_path / "traj.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    print("header", rows[0])
    assert rows[0] == ["t", "x1", "z1", "u1", "h", "V"]
    assert all(len(r) == 6 for r in rows)
    summary = json.loads((tmp_path / "traj.json").read_text())
    assert summary["min_h"] >= 0 and "input_hash" in summary and "integrator" in summary


@pytest.mark.parametrize("system,cols", [("toy", 6), ("arm", 11), ("primal_dual", 6)])
def test_csv_column_count(tmp_path, system, cols):
    assert _run(tmp_path, "simulate", "--system", system, "--epsilon", "0.05", "--tf", "0.1",
                "--out", "t.csv") == 0
    with open(tmp_path / "t.csv", newline="") as fh:
        assert {len(r) for r in csv.reader(fh)} == {cols}


def test_csv_is_deterministic(tmp_path):
    for name in ("a.csv", "b.csv"):
        _run(tmp_path, "simulate", "--system", "arm", "--epsilon", "0.01", "--tf", "0.2",
             "--out", name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_arm_above_sweep_range_reports_violation(tmp_path, capsys):
    rc = _run(tmp_path, "simulate", "--system", "arm", "--epsilon", "0.05", "--tf", "2",
              "--out", "arm.csv")
    out = capsys.readouterr().out
    print(out)
    assert rc == 0 and "violation" in out
    assert json.loads((tmp_path / "arm.json").read_text())["violation_time"] is not None


def test_missing_system_is_config_error(tmp_path):
    assert _run(tmp_path, "simulate", "--epsilon", "0.1", "--out", "x.csv") == 2
    assert not (tmp_path / "x.csv").exists()


def test_config_file_and_flag_override(tmp_path):
    cfg = {"system": "toy", "epsilon": 0.5, "t_f": 1.0, "params": {"beta": 1.2}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    rc = _run(tmp_path, "simulate", "--config", "cfg.json", "--epsilon", "0.02", "--out", "o.csv")
    assert rc == 0
    s = json.loads((tmp_path / "o.json").read_text())
    assert s["eps"] == 0.02 and s["effective_params"]["beta"] == 1.2


def test_unknown_keys_rejected(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"system": "toy", "epsilon": 0.1, "bogus": 1}))
    assert _run(tmp_path, "simulate", "--config", "cfg.json") == 2
    (tmp_path / "cfg2.json").write_text(json.dumps({"system": "toy", "params": {"kp": 1}}))
    assert _run(tmp_path, "simulate", "--config", "cfg2.json", "--epsilon", "0.1") == 2


def test_malformed_json_reports_line(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text('{"system": "toy",\n "epsilon": }')
    assert _run(tmp_path, "simulate", "--config", "cfg.json") == 2
    assert "line 2" in capsys.readouterr().err


def test_config_round_trip():
    cfg = RunConfig(system="arm", epsilon=0.01, params={"q_target_deg": [170.0, 5.0]})
    text = json.dumps(cfg.to_dict())
    assert RunConfig.from_dict(json.loads(text)) == cfg
    with pytest.raises(ConfigError):
        RunConfig(system="toy", nu=1.5)


def test_arm_degrees_are_converted():
    cfg = RunConfig(system="arm", params={"q_target_deg": [90.0, 0.0]})
    assert np.allclose(cfg.parameters().q_target, [np.pi / 2, 0.0])


def test_sweep_count_one_rejected(tmp_path):
    assert _run(tmp_path, "sweep", "--system", "toy", "--count", "1") == 2


def test_sweep_outputs(tmp_path):
    rc = _run(tmp_path, "sweep", "--system", "primal_dual", "--count", "3", "--tf", "2",
              "--out", "pd")
    assert rc == 0
    rep = json.loads((tmp_path / "pd" / "report.json").read_text())
    assert len(rep["runs"]) == 3
    svg = (tmp_path / "pd" / "h_vs_t.svg").read_text()
    assert 'class="dashed"' in svg
    assert _run(tmp_path, "plot", "--input", "pd", "--out", "again.svg") == 0
    assert (tmp_path / "again.svg").exists()


def test_epsbar_and_check(tmp_path):
    assert _run(tmp_path, "epsbar", "--system", "toy", "--nu", "0.5", "--grid", "200",
                "--out", "cert.json") == 0
    cert = json.loads((tmp_path / "cert.json").read_text())
    print("toy eps_bar", cert["eps_bar"])
    assert cert["eps_bar"] > 0 and cert["grid"] == 200 and cert["inflation"] == 1.1
    rc = _run(tmp_path, "check", "--system", "toy", "--certificate", "cert.json", "--n-ic", "5",
              "--n-eps", "2", "--max-steps", "1000", "--out", "check.json")
    assert rc == 0
    rc = _run(tmp_path, "check", "--system", "toy", "--certificate", "cert.json", "--n-ic", "3",
              "--max-steps", "300", "--force-epsilon", "1.0", "--out", "forced.json")
    assert rc == 0
    assert json.loads((tmp_path / "forced.json").read_text())["out_of_certificate"]


def test_epsbar_refuses_primal_dual(tmp_path, capsys):
    assert _run(tmp_path, "epsbar", "--system", "primal_dual") == 5
    assert "no smooth certificate available" in capsys.readouterr().err


def test_epsbar_bad_nu(tmp_path):
    assert _run(tmp_path, "epsbar", "--system", "toy", "--nu", "1.5") == 2


def test_corrupted_certificate(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert _run(tmp_path, "check", "--system", "toy", "--certificate", "bad.json") == 2
    (tmp_path / "partial.json").write_text(json.dumps({"eps_bar": 0.1}))
    assert _run(tmp_path, "check", "--system", "toy", "--certificate", "partial.json") == 2


# ---- svg --------------------------------------------------------------------

def test_svg_constant_series_and_styles():
    svg = render_svg([Series("c", [0, 1, 2], [0.5, 0.5, 0.5])])
    assert svg.count("<polyline") == 1
    two = render_svg([Series("ok", [0, 1], [1, 2]),
                      Series("bad", [0, 1], [1, -1], style="dashdot", color="#ff0000")])
    assert two.count('class="dashdot"') == 1


def test_svg_is_byte_identical(tmp_path):
    s = [Series("a", np.linspace(0, 1, 50), np.sin(np.linspace(0, 1, 50)))]
    render_svg(s, tmp_path / "1.svg")
    render_svg(s, tmp_path / "2.svg")
    assert (tmp_path / "1.svg").read_bytes() == (tmp_path / "2.svg").read_bytes()


def test_svg_empty_series_rejected():
    with pytest.raises(ValueError):
        render_svg([])

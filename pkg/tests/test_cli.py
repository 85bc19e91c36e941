from __future__ import annotations

import csv
import io
import json

import numpy as np
import pytest

from zoll.cli import emit_plot_data, main
from zoll.finsler import RoundMetric
from zoll.flow import FlowConfig, flow
from zoll.sphere import SphereCurve, curves_to_json, great_circle, latitude_circle, normalize


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def body(path):
    return json.loads(path.read_text())["body"]


@pytest.fixture
def round_descriptor(tmp_path):
    return write(tmp_path / "round.json", {"kind": "round"})


def test_round_checks_pass_and_are_deterministic(tmp_path, capsys):
    args = ["round-checks", "--members", "40000", "--samples", "50000"]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    a, b = body(tmp_path / "a.json"), body(tmp_path / "b.json")
    assert a["passed"] and a["config"]["seed"] == 0
    a.pop("artifacts"), b.pop("artifacts")
    assert a == b
    assert "PASS" in capsys.readouterr().out


def test_build_writes_metric_and_plot(tmp_path):
    cfg = write(tmp_path / "cfg.json", {"eps": 0.03})
    out = tmp_path / "m" / "metric.json"
    assert main(["build", "--config", cfg, "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert d["kind"] == "enveloping" and d["antipodal"]
    assert out.with_suffix(".indicatrix.png").exists()
    assert body(out.with_suffix(".report.json"))["passed"]


@pytest.mark.parametrize(
    "record",
    [{"eps": -1}, {"epsilon": 0.03}, {"eps": 0.5}, {"schema_version": 9}, {"eps": 0.03, "family": {}}],
)
def test_build_bad_config_exits_2(tmp_path, record, capsys):
    cfg = write(tmp_path / "cfg.json", record)
    assert main(["--no-plots", "build", "--config", cfg, "--out", str(tmp_path / "m.json")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_missing_and_malformed_files_exit_2(tmp_path):
    assert main(["verify", "--metric", str(tmp_path / "nope.json")]) == 2
    (tmp_path / "bad.json").write_text("{")
    assert main(["verify", "--metric", str(tmp_path / "bad.json")]) == 2
    m = write(tmp_path / "odd.json", {"kind": "cubic"})
    assert main(["verify", "--metric", m]) == 2
    assert main(["verify", "--metric", m, "--samples", "-1"]) == 2


def test_verify_round(tmp_path, round_descriptor):
    out = tmp_path / "v.json"
    assert main(["verify", "--metric", round_descriptor, "--samples", "8", "--jacobi", "2", "--out", str(out)]) == 0
    b = body(out)
    assert b["results"]["zoll"]["intersection_histogram"] == {"2": 28}
    assert all(j["zeros"] == 2 for j in b["results"]["jacobi"])
    assert out.with_suffix(".periods.png").exists()


def test_verify_control_metric_fails_with_status_1(tmp_path):
    m = write(tmp_path / "aniso.json", {"kind": "anisotropic", "matrix": [1, 1, 1.3]})
    assert main(["--no-plots", "verify", "--metric", m, "--samples", "2", "--out", str(tmp_path / "v.json")]) == 1
    assert body(tmp_path / "v.json")["results"]["zoll"]["witness"] is not None


def test_flow_writes_series(tmp_path):
    s = np.linspace(0, 2 * np.pi, 256, endpoint=False)
    wavy = normalize(np.stack([np.cos(s), np.sin(s), 0.1 * np.sin(3 * s)], 1))
    curves = [SphereCurve(latitude_circle(np.pi / 3, 256)), SphereCurve(wavy)]
    curves_to_json(curves, tmp_path / "c.json")
    out = tmp_path / "flow"
    code = main(["flow", "--curves", str(tmp_path / "c.json"), "--checkpoints", "0.1,0.3",
                 "--nodes", "256", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader((out / "flow-series.csv").open()))
    assert {r["curve"] for r in rows} == {"0", "1"}
    assert (out / "flow-series.png").exists()
    assert body(out / "flow-report.json")["results"]["family"]


def test_flow_bad_checkpoints(tmp_path):
    curves_to_json([SphereCurve(latitude_circle(1.0, 64))], tmp_path / "c.json")
    assert main(["flow", "--curves", str(tmp_path / "c.json"), "--checkpoints", "a,b"]) == 2
    assert main(["flow", "--curves", str(tmp_path / "c.json"), "--checkpoints", "-1"]) == 2


def test_crofton_length_against_round_family(tmp_path):
    curves_to_json([SphereCurve(great_circle([0, 0, 1.0], 256)), SphereCurve(latitude_circle(1.0, 256))],
                   tmp_path / "c.json")
    out = tmp_path / "cl.json"
    assert main(["crofton-length", "--curves", str(tmp_path / "c.json"), "--members", "40000", "--out", str(out)]) == 0
    rows = body(out)["results"]["lengths"]
    assert rows[0]["crofton_length"] == pytest.approx(2 * np.pi, rel=2e-2)


def test_crofton_length_from_family_file(tmp_path, built_family):
    path = built_family.dump(tmp_path / "fam.json")
    curves_to_json([SphereCurve(great_circle([1.0, 0, 0], 256))], tmp_path / "c.json")
    out = tmp_path / "cl.json"
    main(["crofton-length", "--curves", str(tmp_path / "c.json"), "--family", str(path), "--out", str(out)])
    row = body(out)["results"]["lengths"][0]
    assert "reference_length" in row and row["crofton_length"] > 6


def test_retract_round(tmp_path, round_descriptor):
    out = tmp_path / "r"
    code = main(["retract", "--metric", round_descriptor, "--taus", "0,1,2", "--family-size", "512",
                 "--verify-samples", "4", "--quotient", "--out", str(out)])
    assert code == 0
    for tag in ("tau_0", "tau_1", "tau_2"):
        assert (out / f"family_{tag}.json").exists() and (out / f"verify_{tag}.json").exists()
    m = json.loads((out / "metric_tau_2.json").read_text())
    assert m["kind"] == "crofton" and m["family"] == "family_tau_2.json"
    rows = list(csv.DictReader((out / "retraction-summary.csv").open()))
    assert [float(r["tau"]) for r in rows] == [0.0, 1.0, 2.0]
    assert (out / "retraction-summary.png").exists()
    b = body(out / "retract-report.json")
    assert b["results"]["projective"]["steps"][0]["noncontractible"]


def test_retract_bad_schedule(tmp_path, round_descriptor):
    assert main(["retract", "--metric", round_descriptor, "--taus", "0,1", "--out", str(tmp_path)]) == 2
    assert main(["retract", "--metric", round_descriptor, "--family-size", "10", "--out", str(tmp_path)]) == 2


def test_numerical_failure_exits_3_with_dump(tmp_path, capsys):
    m = write(tmp_path / "aniso.json", {"kind": "anisotropic", "matrix": [1, 1, 1.3]})
    out = tmp_path / "r"
    code = main(["retract", "--metric", m, "--taus", "0,2", "--family-size", "128", "--out", str(out)])
    assert code == 3
    err = capsys.readouterr().err
    assert "state dump" in err
    dump = json.loads((out / "retract-failure.json").read_text())
    assert dump["command"] == "retract" and dump["error"]


def test_workers_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ZOLL_WORKERS", "x")
    assert main(["round-checks", "--out", str(tmp_path / "a.json")]) == 2


def test_emit_plot_data_kinds():
    tr = flow(SphereCurve(latitude_circle(np.pi / 3, 128)), FlowConfig(n_nodes=128, min_nodes=64), t_stop=0.1)
    text = emit_plot_data(tr, "flow-series")
    rows = list(csv.DictReader(io.StringIO(text)))
    assert rows[0]["t"] == "0" and float(rows[0]["area_law"]) == pytest.approx(float(rows[0]["left_area"]))
    grid = emit_plot_data(RoundMetric(), "metric-grid")
    assert len(grid.splitlines()) == 32 * 32 * 16 + 1
    with pytest.raises(TypeError, match="kind mismatch"):
        emit_plot_data(tr, "metric-grid")
    with pytest.raises(TypeError, match="kind mismatch"):
        emit_plot_data(RoundMetric(), "retraction-summary")
    with pytest.raises(ValueError):
        emit_plot_data(tr, "histogram")

from __future__ import annotations

import json
import math

import pytest

from cohwork import cli


def write(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


AVERAGE = {"variant": "average", "beta": 1.0, "r_grid": [0.2, 0.5], "delta_bar_grid": [0.0, 0.5, 1.0],
           "simulation": {"L": 8, "offset": 1, "runs": 5}}


def data_rows(text):
    return [line.split(",") for line in text.splitlines() if not line.startswith("#")]


def test_sweep_csv_layout_and_stability(tmp_path):
    cfg = write(tmp_path, "c.json", AVERAGE)
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["sweep", "--config", cfg, "--out", str(out1), "--seed", "4"]) == 0
    assert cli.main(["sweep", "--config", cfg, "--out", str(out2), "--seed", "4"]) == 0
    text = out1.read_text()
    assert text == out2.read_text()
    lines = text.splitlines()
    assert lines[0] == "# cohwork-csv v1 sweep-average"
    assert json.loads(lines[1][len("# config: "):])["seed"] == 4
    rows = data_rows(text)
    assert rows[0] == list(cli.SWEEP_COLUMNS)
    anchor = next(r for r in rows[1:] if r[0] == "0.5" and r[1] == "1")
    assert float(anchor[3]) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)
    for r in rows[1:]:
        if r[5] == "false":
            assert float(r[3]) <= 0


def test_sweep_simulated_column(tmp_path):
    cfg = write(tmp_path, "c.json", AVERAGE)
    out = tmp_path / "s.csv"
    assert cli.main(["sweep", "--config", cfg, "--out", str(out), "--simulate"]) == 0
    rows = data_rows(out.read_text())
    assert rows[0][-1] == "simulated"
    for r in rows[1:]:
        if r[1] == "1":
            assert r[-1] == "nan"  # not reachable with L = 8
        else:
            assert float(r[-1]) == pytest.approx(float(r[3]), abs=1e-10)


def test_single_shot_sweep_full_quality(tmp_path):
    cfg = write(tmp_path, "c.json", {"variant": "single_shot", "beta": "thermal",
                                     "r_grid": {"start": 0.1, "stop": 0.4, "num": 4},
                                     "delta_bar_grid": [1.0]})
    out = tmp_path / "s.csv"
    assert cli.main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    for r in data_rows(out.read_text())[1:]:
        assert float(r[3]) == pytest.approx(float(r[0]), abs=1e-12)


@pytest.mark.parametrize("bad", [
    {"r_grid": []},
    {"r_grid": [0.5, 0.2]},
    {"delta_bar_grid": [0.0, 1.5]},
    {"beta": "hot"},
    {"beta": "thermal", "r_grid": [0.2, 0.6]},
])
def test_sweep_rejects_bad_grids(tmp_path, bad, capsys):
    cfg = write(tmp_path, "c.json", {**AVERAGE, **bad})
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "x.csv")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_beta_is_an_error(tmp_path):
    cfg = {k: v for k, v in AVERAGE.items() if k != "beta"}
    assert cli.main(["sweep", "--config", write(tmp_path, "c.json", cfg)]) == 2


def test_theorem1_analytic(tmp_path):
    cfg = write(tmp_path, "t.json", {"p": 0.5, "beta": 1.0, "confidence_s": 2.0, "L": 100000,
                                     "M_grid": [1000, 10000, 100000]})
    out = tmp_path / "t.csv"
    assert cli.main(["theorem1", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads(out.with_suffix(".json").read_text())
    assert report["fit"]["slope"] == pytest.approx(-1 / 3, abs=1e-6)
    first = data_rows(out.read_text())[1]
    assert float(first[1]) == pytest.approx(0.9950, abs=1e-4)


def test_theorem1_simulated_small(tmp_path):
    cfg = write(tmp_path, "t.json", {"p": 0.5, "beta": 1.0, "confidence_s": 2.0, "L": 64,
                                     "M_grid": [20, 40]})
    out = tmp_path / "t.csv"
    assert cli.main(["theorem1", "--config", cfg, "--out", str(out), "--simulate"]) == 0
    rows = data_rows(out.read_text())[1:]
    assert all(r[-1] == "true" for r in rows)
    assert all(float(r[2]) >= float(r[1]) for r in rows)


def test_theorem1_resource_limit(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("COHWORK_MAX_DIM", "1000")
    cfg = write(tmp_path, "t.json", {"p": 0.5, "beta": 1.0, "confidence_s": 2.0, "L": 64,
                                     "M_grid": [2000]})
    assert cli.main(["theorem1", "--config", cfg, "--simulate", "--out", str(tmp_path / "t.csv")]) == 2
    assert "COHWORK_MAX_DIM" in capsys.readouterr().err


def test_validate_exit_codes(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert cli.main(["validate", "--out", str(out)]) == 0
    summary = json.loads(out.read_text())
    assert summary["passed"] and summary["seed"] == 0
    assert all("deviation" in item for item in summary["items"])
    assert cli.main(["validate", "--inject-fault", "kraus_sign", "--out", str(out)]) == 1
    assert "q_formula_vs_kraus_path" in capsys.readouterr().err


def test_demo_command(tmp_path):
    out = tmp_path / "d.csv"
    assert cli.main(["demo-appendix-b", "--out", str(out)]) == 0
    rows = data_rows(out.read_text())
    assert rows[0] == list(cli.DEMO_COLUMNS) and len(rows) == 11
    assert all(float(r[3]) == pytest.approx(math.log(2)) for r in rows[1:])


def test_fmt():
    assert cli.fmt(True) == "true"
    assert cli.fmt(-0.0) == "0"
    assert cli.fmt(float("nan")) == "nan"
    assert cli.fmt(1 / 3) == "0.333333333333"
    assert cli.fmt(None) == ""

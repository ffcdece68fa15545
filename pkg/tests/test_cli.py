import json

import numpy as np
import pandas as pd
import pytest

from cwlate.cli import EXIT_INPUT, EXIT_OK, main, read_dataset, write_dataset_csv
from cwlate.core import build_partition
from cwlate.errors import SchemaError
from cwlate.estimators import EstimandSpec
from cwlate.inference import estimate_report
from cwlate.simulation import McConfig, dgp_sample

from conftest import simulated, step_dataset


@pytest.fixture(autouse=True)
def default_environment(monkeypatch: pytest.MonkeyPatch):
    for var in ("CWLATE_KERNEL", "CWLATE_LEVEL", "CWLATE_RESIDUALS", "CWLATE_MIN_SIDE_COUNT"):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture(scope="module")
def simulated_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "draw.csv"
    write_dataset_csv(simulated(4000, seed=31), path)
    return path


def _write(path, text):
    path.write_text(text)
    return str(path)


def test_policy_command(tmp_path):
    out = tmp_path / "policy.json"
    code = main(
        ["policy", "--p", "1,0", "--beta", "4,0", "--delta-x", ".5,.2", "--output", str(out)]
    )
    assert code == EXIT_OK
    report = json.loads(out.read_text())
    assert report["lape"] == 4.0
    assert report["p_c"] == 0.5
    assert report["f"] == [0.5, 0.5]


def test_policy_command_from_instrument(tmp_path):
    out = tmp_path / "policy.json"
    args = ["policy", "--b", "1,1", "--beta", "4,0", "--delta-x", ".5,.5"]
    assert main([*args, "--output", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["lape"] == pytest.approx(2.0)
    assert main([*args, "--p", ".5,.5", "--output", str(out)]) == EXIT_INPUT


def test_csv_round_trip_is_exact(simulated_csv, tmp_path):
    out = tmp_path / "estimate.json"
    code = main(
        ["estimate", "--input", str(simulated_csv), "--cells", "cell", "--h", "1.0",
         "--output", str(out)]
    )
    assert code == EXIT_OK
    row = json.loads(out.read_text())["estimates"][0]

    expected = estimate_report(simulated(4000, seed=31), EstimandSpec(), 1.0)
    assert row["beta_hat"] == expected.beta_hat
    assert row["beta_bc"] == expected.beta_bc
    assert row["se"] == expected.se
    assert row["delta_x"] == expected.delta_x
    assert row["labels"] == ["-1.0", "1.0"]


def test_read_dataset_interacts_cell_columns(tmp_path):
    path = _write(
        tmp_path / "cells.csv", "y,x,z,a,b\n1,0,-0.5,u,1\n2,1,0.5,v,1\n3,1,0.2,u,2\n"
    )
    data = read_dataset(path, "y", "x", "z", ["a", "b"], cutoff=0.1)
    assert list(data.cell) == ["u|1", "v|1", "u|2"]
    np.testing.assert_allclose(data.running, [-0.6, 0.4, 0.1])
    pooled = read_dataset(path, "y", "x", "z")
    assert set(pooled.cell) == {"all"}


@pytest.mark.parametrize(
    "text,field,line",
    [
        ("y,x,q\n1,0,0.1\n", "z", 1),
        ("y,x,z\n1,0,0.1\n1,2,0.3\n", "x", 3),
        ("y,x,z\n1,0,0.1\n,1,0.3\n", "y", 3),
        ("y,x,z\n1,0,0.1\n1,1,abc\n", "z", 3),
    ],
)
def test_schema_errors_carry_context(tmp_path, text, field, line):
    path = _write(tmp_path / "bad.csv", text)
    with pytest.raises(SchemaError) as excinfo:
        read_dataset(path, "y", "x", "z")
    assert excinfo.value.field == field
    assert excinfo.value.line == line
    assert main(["estimate", "--input", path, "--h", "1", "--output", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_missing_bandwidth_is_usage_error(simulated_csv, tmp_path):
    code = main(["estimate", "--input", str(simulated_csv), "--output", str(tmp_path / "o")])
    assert code == EXIT_INPUT


def test_two_estimands_on_one_cell(tmp_path):
    data = step_dataset(m=1, per_side=60, noise=0.2, seed=3)
    path = tmp_path / "one.csv"
    write_dataset_csv(data, path)
    out = tmp_path / "est.json"
    code = main(
        ["estimate", "--input", str(path), "--h", "0.6", "--estimand", "cwlate",
         "--estimand", "unconditional_wald", "--output", str(out)]
    )
    assert code == EXIT_OK
    rows = json.loads(out.read_text())["estimates"]
    assert [r["estimand"] for r in rows] == ["cwlate", "unconditional_wald"]
    assert rows[0]["beta_hat"] == pytest.approx(rows[1]["beta_hat"], rel=1e-12)
    assert rows[0]["selection_on_gains"] in {"positive", "negative", "zero"}


def test_bandwidth_grid_and_csv_output(simulated_csv, tmp_path):
    out = tmp_path / "grid.csv"
    code = main(
        ["estimate", "--input", str(simulated_csv), "--cells", "cell", "--h", "0.5,1,2",
         "--b", "1,1.5,2.5", "--format", "csv", "--output", str(out)]
    )
    assert code == EXIT_OK
    table = pd.read_csv(out)
    assert list(table["h"]) == [0.5, 1.0, 2.0]
    assert list(table["b"]) == [1.0, 1.5, 2.5]
    assert table["se"].is_monotonic_decreasing


def test_bandwidth_command_is_reproducible(simulated_csv, tmp_path):
    outputs = [tmp_path / "first.json", tmp_path / "second.json"]
    for out in outputs:
        args = ["bandwidth", "--input", str(simulated_csv), "--cells", "cell"]
        assert main([*args, "--output", str(out)]) == EXIT_OK
    assert outputs[0].read_bytes() == outputs[1].read_bytes()
    report = json.loads(outputs[0].read_text())["bandwidths"][0]
    assert report["h_n"] > 0 and report["b_n"] > 0


def test_auto_bandwidth_estimate(simulated_csv, tmp_path):
    out = tmp_path / "auto.json"
    code = main(
        ["estimate", "--input", str(simulated_csv), "--cells", "cell", "--auto-bandwidth",
         "--output", str(out)]
    )
    assert code == EXIT_OK
    payload = json.loads(out.read_text())
    assert payload["estimates"][0]["h"] == payload["bandwidths"]["cwlate"]["h_n"]


def test_simulate_command(tmp_path):
    config = _write(
        tmp_path / "mc.json",
        json.dumps({"n": 800, "reps": 2, "bandwidth_mode": "fixed", "h": 2.0}),
    )
    out = tmp_path / "mc_report.json"
    assert main(["simulate", "--config", config, "--seed", "4", "--output", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["config"]["seed"] == 4
    assert [s["estimand"] for s in report["estimands"]] == ["cwlate", "unconditional_wald"]
    assert "mse_ratio" in report

    csv_out = tmp_path / "mc_report.csv"
    args = ["simulate", "--config", config, "--format", "csv", "--output", str(csv_out)]
    assert main(args) == EXIT_OK
    assert len(pd.read_csv(csv_out)) == 2


def test_simulate_rejects_unknown_settings(tmp_path):
    config = _write(tmp_path / "mc.json", json.dumps({"n": 800, "seeds": 3}))
    assert main(["simulate", "--config", config]) == EXIT_INPUT


def test_grid_cells_keep_numeric_order(tmp_path):
    data = dgp_sample(McConfig(n=3000, reps=1, seed=4, support="grid10"), 0)
    path = tmp_path / "grid.csv"
    write_dataset_csv(data, path)

    loaded = read_dataset(path, "y", "x", "z", ["cell"])
    labels = build_partition(loaded).labels
    assert labels == build_partition(data).labels
    assert list(labels) == sorted(labels)
    assert estimate_report(loaded, EstimandSpec(), 1.5).delta_x == (
        estimate_report(data, EstimandSpec(), 1.5).delta_x
    )

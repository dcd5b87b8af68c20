# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

import json
from pathlib import Path

import pytest
from deepdiff import DeepDiff

from harness import (
    CONFIG_FILE,
    RECORD_FILE,
    REPORT_FILE,
    RESULTS_FILE,
    SOLVER_LOG_FILE,
    SWEEP_FILE,
    execute,
    run,
    sweep,
)
from lab_config import load_config, validate_config
from reports import sha256_file, validate_report


def test_run_writes_report_tables_and_record(tmp_path, direct_config):
    # GIVEN a small direct experiment
    # WHEN it runs
    record = run(direct_config, tmp_path)

    # THEN every artifact lands under the run id and the record checksums them
    out = tmp_path / direct_config.run_id
    for name in (CONFIG_FILE, REPORT_FILE, RESULTS_FILE, SOLVER_LOG_FILE, RECORD_FILE):
        assert (out / name).is_file()
    assert record.verdict == "pass"
    assert sorted(record.manifest) == sorted([CONFIG_FILE, REPORT_FILE, RESULTS_FILE, SOLVER_LOG_FILE])
    assert record.manifest[RESULTS_FILE] == sha256_file(out / RESULTS_FILE)
    assert set(record.stage_timings) >= {"direct", "write"}

    report = json.loads((out / REPORT_FILE).read_text())
    validate_report(report)
    assert report["metadata"]["N"] == 4
    assert [e["quantity"] for e in report["estimates"]] == ["direct"]


def test_reruns_are_byte_identical(tmp_path, direct_config):
    # GIVEN the same config run twice, once with more workers
    threaded = validate_config(
        dict(direct_config.model_dump(mode="json"), monte_carlo={"n_realizations": 4, "seed": 3, "workers": 3})
    )
    first = run(direct_config, tmp_path / "a")
    second = run(threaded, tmp_path / "b")

    # THEN the run id and every result file match byte for byte
    assert first.config_hash == second.config_hash
    for name in (REPORT_FILE, RESULTS_FILE, SOLVER_LOG_FILE):
        assert first.manifest[name] == second.manifest[name]
    reports = [json.loads((tmp_path / side / first.config_hash / REPORT_FILE).read_text()) for side in "ab"]
    assert not DeepDiff(*reports)


def test_oracle_experiment_passes(oracle_config):
    # GIVEN a layered 1D medium with a closed-form homogenized coefficient
    # WHEN the direct estimate is compared against it
    result, _ = execute(oracle_config)

    # THEN the comparison passes
    assert result.checks == {"oracle_value": "pass"}
    assert result.verdict == "pass"


def test_written_fields(tmp_path, direct_data):
    config = validate_config(dict(direct_data, output={"write_fields": True}))
    record = run(config, tmp_path)
    assert {"cloud.txt", "coefficients.field", "corrector.field"} <= set(record.manifest)


def test_single_value_sweep(tmp_path, direct_config):
    # GIVEN a sweep over a single massive parameter
    record = sweep(direct_config, "T", [8.0], tmp_path)

    # THEN the merged table carries the axis columns and one point run
    out = tmp_path / record.config_hash
    lines = (out / SWEEP_FILE).read_text().splitlines()
    assert lines[0].startswith("axis,value,run_id,quantity")
    assert len(lines) == 2
    assert lines[1].startswith("T,8,")
    report = json.loads((out / REPORT_FILE).read_text())
    assert report["kind"] == "sweep"
    assert report["checks"] == {"convergence": "pass", "point_T=8": "pass"}
    assert record.verdict == "pass"


def test_taylor_experiment_reports_remainders_and_bounds(direct_data):
    # GIVEN an order-zero expansion on a short p-grid
    config = validate_config(
        dict(direct_data, kind="taylor", expansion={"k": 0, "p_grid": [0.25, 0.5, 1.0]})
    )

    # WHEN it runs
    result, _ = execute(config)

    # THEN every p carries a direct value, a remainder and a bound with its error
    assert set(result.checks) == {"remainder_slope", "remainder_bound"}
    # a span of 4 in p is too short to fit a slope
    assert result.checks["remainder_slope"] == "inconclusive"
    assert [r.p for r in result.rows if r.quantity == "remainder"] == [0.25, 0.5, 1.0]
    assert all(entry["bound_stderr"] is not None for entry in result.series["remainder"])


def test_s_table_experiment_covers_every_order_pair(direct_data):
    # GIVEN the S table up to order 2 with a fixed truncation radius
    config = validate_config(
        dict(direct_data, kind="s_table", expansion={"max_order": 2}, truncation={"rho": 4.0})
    )

    # WHEN it runs
    result, _ = execute(config)

    # THEN one row per (j, k) with j + k <= 2, and no background gradient in S_0^0
    assert sorted((r.j, r.k) for r in result.rows) == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (2, 0)]
    assert next(r for r in result.rows if (r.j, r.k) == (0, 0)).estimate == 0.0
    assert set(result.checks) == {"envelope"}


def test_moment_experiment_reports_ratio_errors():
    # GIVEN the moment inequality for a = 1, 2 on a small discretized cloud
    config = validate_config(
        {
            "kind": "jc",
            "physics": {"d": 1, "L": 12.0, "n": 24, "h": 0.25, "intensity": 0.3, "T": 1.0},
            "monte_carlo": {"n_realizations": 50, "seed": 19},
            "expansion": {"moment_a": [1, 2], "anchor": [6.0]},
        }
    )

    # WHEN it runs
    result, _ = execute(config)

    # THEN each order has both sides and a ratio with an error, and two orders cannot fail the growth check
    assert config.kind == "moment"
    ratios = [r for r in result.rows if r.quantity == "moment_ratio"]
    assert [r.j for r in ratios] == [1, 2]
    assert all(r.stderr is not None and r.stderr >= 0 for r in ratios)
    assert result.checks["geometric_growth"] in {"pass", "inconclusive"}


def test_locality_experiment_recovers_the_square_root_scaling():
    # GIVEN an empty cloud, so the swapped cube sits in pure background
    config = validate_config(
        {
            "kind": "locality",
            "physics": {"d": 1, "L": 200.0, "n": 1000, "h": 0.1, "intensity": 0.0, "T": 4.0},
            "solver": {"tolerance": 1e-12},
            "monte_carlo": {"n_realizations": 1, "seed": 1},
        }
    )

    # WHEN the decay is measured at T and 4T
    result, _ = execute(config)

    # THEN the rate halves
    assert result.checks == {"locality_scaling": "pass"}
    assert result.fits["rate_ratio"] == pytest.approx(0.5, abs=0.05)
    assert {entry["T"] for entry in result.series["locality"]} == {4.0, 16.0}


def test_moment_sweep_over_h_checks_stability(tmp_path):
    # GIVEN a moment experiment with a vanishing functional, swept over h
    config = validate_config(
        {
            "kind": "sweep",
            "physics": {"d": 1, "L": 12.0, "n": 24, "h": 0.5, "intensity": 0.3, "T": 1.0},
            "monte_carlo": {"n_realizations": 5, "seed": 19},
            "expansion": {"moment_a": [1], "functional": "zero"},
            "sweep": {"axis": "h", "values": [0.5, 0.25, 0.125], "base_kind": "moment"},
        }
    )

    # WHEN the sweep runs
    record = sweep(config, "h", [0.5, 0.25, 0.125], tmp_path)

    # THEN the merged table has every point and the ratios are checked for stability, not convergence
    out = tmp_path / record.config_hash
    lines = (out / SWEEP_FILE).read_text().splitlines()
    assert {line.split(",")[1] for line in lines[1:]} == {"0.5", "0.25", "0.125"}
    report = json.loads((out / REPORT_FILE).read_text())
    assert report["checks"]["stability"] == "pass"
    assert "convergence" not in report["checks"]
    # a zero ratio leaves nothing to grow
    assert report["checks"]["point_h=0.5"] == "inconclusive"
    assert record.verdict == "pass"


def test_shipped_moment_sweep_config_is_valid():
    config = load_config(Path(__file__).parents[2] / "configs" / "moment_sweep_h.yaml", environ={})
    assert (config.kind, config.sweep.base_kind, config.sweep.axis) == ("sweep", "moment", "h")


@pytest.mark.slow
def test_stderr_shrinks_with_the_square_root_of_N(tmp_path, direct_data):
    # GIVEN a direct experiment swept over the realization count
    config = validate_config(
        dict(direct_data, physics={"d": 1, "L": 20.0, "n": 100, "h": 0.1, "intensity": 0.3, "T": 4.0})
    )

    # WHEN N grows by factors of 4
    record = sweep(config, "N", [100, 400, 1600], tmp_path)

    # THEN the standard error halves each time
    report = json.loads((tmp_path / record.config_hash / REPORT_FILE).read_text())
    assert report["checks"]["stderr_scaling"] == "pass"
    stderrs = [entry["stderr"] for entry in report["series"]["sweep"]]
    assert stderrs[0] / stderrs[2] == pytest.approx(4.0, rel=0.2)

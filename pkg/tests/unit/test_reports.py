# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

import json
import math

import pytest

from cluster_expansion import Estimate
from errors import LabError
from reports import (
    CSV_COLUMNS,
    ExperimentResult,
    ResultRow,
    RunRecord,
    csv_text,
    format_number,
    manifest,
    report_document,
    sha256_file,
    validate_report,
    write_results_csv,
)

METADATA = {"lambda": 0.3, "T": 4.0, "h": 0.1, "L": 20.0, "n": 200, "N": 10, "d": 1, "seed": 0}


@pytest.mark.parametrize(
    "value, text",
    [
        (None, ""),
        (math.nan, ""),
        (math.inf, ""),
        (3, "3"),
        (True, "1"),
        (0.1, "0.10000000000000001"),
        (1.5, "1.5"),
    ],
)
def test_format_number(value, text):
    assert format_number(value) == text


def test_result_row_hides_non_finite_values():
    row = ResultRow.from_estimate("coefficient", Estimate(math.nan, 0.1, 0.2, 5, 1), j=2)
    data = row.as_json()
    assert data["estimate"] is None
    assert data["stderr"] == 0.1
    assert (data["j"], data["n_failed"]) == (2, 1)


def test_report_document_validates():
    result = ExperimentResult(
        [ResultRow("direct", 1.2, 0.01, 10, p=1.0)], "pass", {"oracle": "pass", "a": "inconclusive"}
    )
    document = report_document("abc123", "direct", METADATA, result)
    assert list(document["checks"]) == ["a", "oracle"]
    assert document["estimates"][0]["p"] == 1.0


def test_schema_violations():
    result = ExperimentResult([ResultRow("direct", 1.2, 0.01)], "maybe")
    with pytest.raises(LabError, match="schema"):
        report_document("abc123", "direct", METADATA, result)
    document = report_document("abc123", "direct", METADATA, ExperimentResult([], "pass"))
    del document["metadata"]["seed"]
    with pytest.raises(LabError):
        validate_report(document)


def test_results_csv(tmp_path):
    rows = [ResultRow("coefficient", 0.15, 0.002, j=1), ResultRow("direct", None, None, p=0.5)]
    path = write_results_csv(tmp_path / "results.csv", "abc123", METADATA, rows)
    data = path.read_bytes()
    assert b"\r" not in data
    lines = data.decode("utf-8").splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[1] == "abc123,coefficient,0.29999999999999999,4,0.10000000000000001,20,200,10,1,,,0.14999999999999999,0.002"
    assert lines[2].endswith(",,,0.5,,")


def test_csv_text_keeps_strings():
    assert csv_text(["a", "b"], [["x", 2.0]]) == "a,b\nx,2\n"


def test_manifest_and_record(tmp_path):
    (tmp_path / "b.txt").write_text("b")
    (tmp_path / "a.txt").write_text("a")
    listing = manifest(tmp_path.glob("*.txt"), tmp_path)
    assert list(listing) == ["a.txt", "b.txt"]
    assert listing["a.txt"] == sha256_file(tmp_path / "a.txt")
    assert len(listing["a.txt"]) == 64

    record = RunRecord("abc123", "0123456789ab", "pass", 1.5, {"solve": 1.0}, ["slow"], listing)
    written = json.loads(record.write(tmp_path / "run_record.json").read_text())
    assert written["verdict"] == "pass"
    assert written["manifest"] == listing

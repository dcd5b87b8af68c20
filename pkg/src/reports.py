# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

"""Result persistence: report JSON, flat CSV tables, run records and checksums."""

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from jsonschema import exceptions, validate

from cluster_expansion import Estimate
from errors import LabError

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ["run_id", "quantity", "lambda", "T", "h", "L", "n", "N", "j", "k", "p", "estimate", "stderr"]

_NUMBER_OR_NULL = {"type": ["number", "null"]}

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "pclab experiment report",
    "type": "object",
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "run_id": {"type": "string", "minLength": 1},
        "kind": {"type": "string"},
        "verdict": {"enum": ["pass", "inconclusive", "fail"]},
        "metadata": {
            "type": "object",
            "properties": {
                "lambda": {"type": "number"},
                "T": {"type": "number"},
                "h": {"type": "number"},
                "L": {"type": "number"},
                "n": {"type": "integer"},
                "N": {"type": "integer"},
                "d": {"type": "integer"},
                "seed": {"type": "integer"},
            },
            "required": ["lambda", "T", "h", "L", "n", "N", "d", "seed"],
        },
        "estimates": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "quantity": {"type": "string"},
                    "j": {"type": ["integer", "null"]},
                    "k": {"type": ["integer", "null"]},
                    "p": _NUMBER_OR_NULL,
                    "estimate": _NUMBER_OR_NULL,
                    "stderr": _NUMBER_OR_NULL,
                    "n_samples": {"type": "integer"},
                    "n_failed": {"type": "integer"},
                },
                "required": ["quantity", "estimate", "stderr", "n_samples"],
            },
        },
        "checks": {"type": "object", "additionalProperties": {"enum": ["pass", "inconclusive", "fail"]}},
        "fits": {"type": "object"},
        "series": {"type": "object"},
    },
    "required": ["schema_version", "run_id", "kind", "verdict", "metadata", "estimates", "checks"],
}


def format_number(value: Optional[float]) -> str:
    """17 significant digits; empty for missing or non-finite values."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if not math.isfinite(value):
        return ""
    return f"{value:.17g}"


@dataclass(frozen=True)
class ResultRow:
    """One estimate with the coordinates that locate it."""

    quantity: str
    estimate: Optional[float]
    stderr: Optional[float]
    n_samples: int = 1
    n_failed: int = 0
    j: Optional[int] = None
    k: Optional[int] = None
    p: Optional[float] = None

    @classmethod
    def from_estimate(cls, quantity: str, est: Estimate, **coords) -> "ResultRow":
        return cls(quantity, est.mean, est.stderr, est.n_samples, est.n_failed, **coords)

    def as_json(self) -> Dict[str, Any]:
        data = asdict(self)
        for key in ("estimate", "stderr", "p"):
            if data[key] is not None and not math.isfinite(data[key]):
                data[key] = None
        return data


@dataclass
class ExperimentResult:
    """What an experiment hands back to the harness before persistence."""

    rows: List[ResultRow]
    verdict: str
    checks: Dict[str, str] = field(default_factory=dict)
    fits: Dict[str, Any] = field(default_factory=dict)
    series: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)


def report_document(
    run_id: str, kind: str, metadata: Dict[str, Any], result: ExperimentResult
) -> Dict[str, Any]:
    document = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "run_id": run_id,
        "kind": kind,
        "verdict": result.verdict,
        "metadata": metadata,
        "estimates": [row.as_json() for row in result.rows],
        "checks": dict(sorted(result.checks.items())),
        "fits": result.fits,
        "series": result.series,
    }
    validate_report(document)
    return document


def validate_report(document: Dict[str, Any]) -> None:
    try:
        validate(instance=document, schema=REPORT_SCHEMA)
    except exceptions.ValidationError as e:
        raise LabError(f"report does not match schema v{REPORT_SCHEMA_VERSION}: {e.message}") from e


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as stream:
        stream.write(text)
    logger.info("wrote %s", path)
    return path


def write_json(path: Union[str, Path], document: Dict[str, Any]) -> Path:
    return write_text(Path(path), json.dumps(document, indent=2, sort_keys=True) + "\n")


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else format_number(v) for v in row])
    return out.getvalue()


def result_csv_rows(
    run_id: str, metadata: Dict[str, Any], rows: Iterable[ResultRow]
) -> List[List[Any]]:
    table = []
    for row in rows:
        table.append(
            [
                run_id,
                row.quantity,
                metadata["lambda"],
                metadata["T"],
                metadata["h"],
                metadata["L"],
                metadata["n"],
                metadata["N"],
                row.j,
                row.k,
                row.p,
                row.estimate,
                row.stderr,
            ]
        )
    return table


def write_results_csv(
    path: Union[str, Path], run_id: str, metadata: Dict[str, Any], rows: Iterable[ResultRow]
) -> Path:
    return write_text(Path(path), csv_text(CSV_COLUMNS, result_csv_rows(run_id, metadata, rows)))


def write_series_csv(path: Union[str, Path], header: Sequence[str], records: Iterable[Dict[str, Any]]) -> Path:
    return write_text(Path(path), csv_text(header, ([r.get(c) for c in header] for r in records)))


def write_solver_log(path: Union[str, Path], entries: Iterable[Sequence[Any]]) -> Path:
    return write_text(
        Path(path), csv_text(["realization", "subset", "iterations", "residual"], entries)
    )


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as stream:
        for chunk in iter(lambda: stream.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest(paths: Iterable[Path], root: Path) -> Dict[str, str]:
    """Checksums keyed by path relative to `root`, sorted."""
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(paths)}


def artifact_version() -> str:
    """Content hash of the package sources."""
    digest = hashlib.sha256()
    for source in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(source.name.encode("utf-8"))
        digest.update(source.read_bytes())
    return digest.hexdigest()[:12]


@dataclass
class RunRecord:
    """Provenance of one run; the only output carrying timings."""

    config_hash: str
    artifact_version: str
    verdict: str
    wall_time: float
    stage_timings: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    manifest: Dict[str, str] = field(default_factory=dict)
    cache: Dict[str, int] = field(default_factory=dict)

    def write(self, path: Union[str, Path]) -> Path:
        return write_json(path, asdict(self))

"""Deterministic CSV/JSON serialization for batch runs.

CSV files follow RFC 4180: CRLF row endings and minimal quoting.  JSON files
are UTF-8 with sorted keys.  Floats render through ``repr`` (shortest
round-trip form), so identical computations serialize to identical bytes;
wall-clock data never enters these files, only the run manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .calculus import ResidualReport
from .inequalities import InequalityReport

CASCADE_COLUMNS = ("stage", "op", "param", "phi_gap", "psi_gap_L1",
                   "grad_psi_gap_L2", "hess_gap", "fisher_gap_f",
                   "fisher_gap_g", "L_psi_proxy")

INEQUALITY_COLUMNS = ("name", "lhs", "rhs", "slack", "pass", "witness")

RESIDUAL_COLUMNS = ("identity", "norm", "value", "tolerance", "pass")


def format_cell(value) -> str:
    # numpy scalars must not leak their repr into cells
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path, header: Sequence[str],
              rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def write_json(path, payload: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False,
                      default=_jsonable)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    return path


def _jsonable(value):
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value)!r}")


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def residual_rows(report: ResidualReport) -> list[tuple]:
    """One CSV row per recorded norm, sorted by norm name."""
    return [
        (report.identity_name, name, float(value), report.tolerance_used,
         report.passed)
        for name, value in sorted(report.norms.items())
    ]


def inequality_rows(reports: Iterable[InequalityReport]) -> list[tuple]:
    rows = []
    for report in reports:
        row = report.to_row()
        rows.append(tuple(row[col] for col in INEQUALITY_COLUMNS))
    return rows


def cascade_stage_rows(stages) -> list[tuple]:
    """Per-stage metric rows in the fixed cascade column order."""
    rows = []
    for index, stage in enumerate(stages):
        metrics = stage.metrics
        rows.append((
            index, stage.operator, stage.parameter,
            *(float(metrics.get(col, float("nan")))
              for col in CASCADE_COLUMNS[3:]),
        ))
    return rows


def cascade_level_rows(per_level: Sequence[Mapping]) -> list[tuple]:
    """Per-refinement-level rows: final-stage metrics of each level."""
    rows = []
    for index, metrics in enumerate(per_level):
        rows.append((
            index, "composite", index,
            *(float(metrics.get(col, float("nan")))
              for col in CASCADE_COLUMNS[3:]),
        ))
    return rows

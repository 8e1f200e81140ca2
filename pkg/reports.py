"""
Plain-text artifacts written into a run directory: metric reports, timing
reports and the theory pass/fail table.
"""
import math
from pathlib import Path
from typing import List, Sequence

import pandas as pd

from errors import ReportFormatError
from events import InferenceTimed, MetricComputed, TheorySuiteChecked

METRIC_FIELDS = ["name", "value", "se", "config_hash"]
TIMING_FIELDS = ["mode", "frames", "seconds", "evaluations", "hardware_note"]
THEORY_FIELDS = ["suite", "instances", "max_residual", "violations", "passed"]


def _write_table(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        frame.to_csv(handle, sep="\t", index=False, float_format="%.17g", lineterminator="\n")
    return path


def _read_table(path, fields: List[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"report not found: {path}")
    try:
        frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ReportFormatError(f"{path}: file is empty") from None
    if list(frame.columns) != fields:
        raise ReportFormatError(f"{path}: expected columns {fields}, found {list(frame.columns)}")
    if frame.empty:
        raise ReportFormatError(f"{path}: report holds no records")
    return frame


def emit_report(metrics: Sequence[MetricComputed], path) -> Path:
    """One tab-separated record per metric, columns in ``METRIC_FIELDS`` order; a missing SE is left blank."""
    if not metrics:
        raise ReportFormatError("refusing to write an empty metric report")
    frame = pd.DataFrame([m.model_dump() for m in metrics], columns=METRIC_FIELDS)
    frame["se"] = frame["se"].astype("float64")
    return _write_table(frame, path)


def parse_report(path) -> List[MetricComputed]:
    frame = _read_table(path, METRIC_FIELDS)
    records = []
    for row in frame.itertuples(index=False):
        try:
            value = float(row.value)
            se = float(row.se) if row.se != "" else None
        except ValueError:
            raise ReportFormatError(f"{path}: non-numeric value in record '{row.name}'") from None
        records.append(MetricComputed(name=row.name, value=value, se=se, config_hash=row.config_hash))
    return records


def emit_timing_report(timings: Sequence[InferenceTimed], path) -> Path:
    if not timings:
        raise ReportFormatError("refusing to write an empty timing report")
    return _write_table(pd.DataFrame([t.model_dump() for t in timings], columns=TIMING_FIELDS), path)


def emit_theory_table(rows: Sequence[TheorySuiteChecked], path) -> Path:
    if not rows:
        raise ReportFormatError("refusing to write an empty theory table")
    frame = pd.DataFrame([r.model_dump() for r in rows], columns=THEORY_FIELDS)
    frame["passed"] = frame["passed"].map({True: "PASS", False: "FAIL"})
    return _write_table(frame, path)


def format_theory_table(rows: Sequence[TheorySuiteChecked]) -> str:
    """Fixed-width pass/fail table for the console."""
    lines = [f"{'suite':<22}{'instances':>10}{'max residual':>16}{'violations':>12}  result"]
    for row in rows:
        residual = f"{row.max_residual:.3e}" if math.isfinite(row.max_residual) else str(row.max_residual)
        lines.append(f"{row.suite:<22}{row.instances:>10}{residual:>16}{row.violations:>12}  "
                     f"{'PASS' if row.passed else 'FAIL'}")
    return "\n".join(lines)

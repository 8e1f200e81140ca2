import math

# noinspection PyPackageRequirements
import pytest

from errors import ReportFormatError
from events import InferenceTimed, MetricComputed, TheorySuiteChecked
from reports import (METRIC_FIELDS, emit_report, emit_theory_table, emit_timing_report, format_theory_table,
                     parse_report)


@pytest.fixture
def metrics():
    return [
        MetricComputed(name="iwae_loglik[posterior]", value=-2.718281828459045, se=0.1 / 3.0, config_hash="0123456789ab"),
        MetricComputed(name="spike_correlation[cell 7]", value=0.1 + 0.2, se=None, config_hash="0123456789ab"),
        MetricComputed(name="train_steps", value=1e-300, se=0.0, config_hash="0123456789ab"),
    ]


def test_report_round_trip_is_exact(metrics, tmp_path):
    path = emit_report(metrics, tmp_path / "metrics.txt")
    assert parse_report(path) == metrics


def test_report_layout(metrics, tmp_path):
    lines = emit_report(metrics, tmp_path / "metrics.txt").read_text(encoding="utf-8").splitlines()
    assert lines[0].split("\t") == METRIC_FIELDS
    assert len(lines) == 4
    # a missing standard error is an empty field
    assert lines[2].split("\t")[2] == ""


def test_empty_reports_are_rejected(tmp_path):
    with pytest.raises(ReportFormatError):
        emit_report([], tmp_path / "metrics.txt")
    header_only = tmp_path / "header.txt"
    header_only.write_text("\t".join(METRIC_FIELDS) + "\n", encoding="utf-8")
    with pytest.raises(ReportFormatError):
        parse_report(header_only)
    blank = tmp_path / "blank.txt"
    blank.write_text("", encoding="utf-8")
    with pytest.raises(ReportFormatError):
        parse_report(blank)


def test_malformed_reports(tmp_path):
    wrong_columns = tmp_path / "columns.txt"
    wrong_columns.write_text("name\tvalue\nx\t1\n", encoding="utf-8")
    with pytest.raises(ReportFormatError):
        parse_report(wrong_columns)
    bad_value = tmp_path / "value.txt"
    bad_value.write_text("\t".join(METRIC_FIELDS) + "\nx\tabc\t\t0123456789ab\n", encoding="utf-8")
    with pytest.raises(ReportFormatError):
        parse_report(bad_value)
    with pytest.raises(FileNotFoundError):
        parse_report(tmp_path / "absent.txt")


def test_timing_report(tmp_path):
    timing = InferenceTimed(mode="sequential", frames=216000, seconds=1.5, evaluations=216000, hardware_note="x86_64")
    lines = emit_timing_report([timing], tmp_path / "timing.txt").read_text(encoding="utf-8").splitlines()
    assert lines[1].split("\t") == ["sequential", "216000", "1.5", "216000", "x86_64"]


def test_theory_table(tmp_path):
    rows = [TheorySuiteChecked(suite="theorem1", instances=200, max_residual=3e-16, violations=0, passed=True),
            TheorySuiteChecked(suite="jensen", instances=200, max_residual=-math.inf, violations=2, passed=False)]
    lines = emit_theory_table(rows, tmp_path / "theory.txt").read_text(encoding="utf-8").splitlines()
    assert lines[1].endswith("PASS") and lines[2].endswith("FAIL")
    console = format_theory_table(rows).splitlines()
    assert len(console) == 3
    assert "-inf" in console[2]
    assert console[1].split()[-1] == "PASS"

"""Error metric and the tabular/CSV report carrier."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finemine.errors import ValidationError
from finemine.metrics import (
    MetricsReport,
    MiningReportRow,
    ReportRow,
    parse_csv,
    render_csv,
    render_table,
    top1_error,
)


def test_top1_error_all_correct():
    assert top1_error([1, 2, 3], [1, 2, 3]) == 0.0


def test_top1_error_one_of_four_wrong():
    assert top1_error([0, 1, 2, 3], [0, 1, 2, 9]) == 25.0


def test_top1_error_reflexive(rng):
    preds = list(rng.integers(0, 5, size=50))
    assert top1_error(preds, preds) == 0.0


def test_top1_error_rejects_mismatch_and_empty():
    with pytest.raises(ValidationError):
        top1_error([1, 2], [1])
    with pytest.raises(ValidationError):
        top1_error([], [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60))
def test_error_complements_accuracy(matches):
    preds = [1 if m else 0 for m in matches]
    truth = [1] * len(matches)
    err = top1_error(preds, truth)
    acc = 100.0 * sum(matches) / len(matches)
    assert abs(err - (100.0 - acc)) < 1e-9


def _report():
    return MetricsReport(
        rows=[
            ReportRow(model="generic", train_resolution=32,
                      test_resolution=32, error_percent=12.9),
            ReportRow(model="fused-routed", train_resolution=32,
                      test_resolution=64, error_percent=8.25),
        ],
        mining=[
            MiningReportRow(round=1, pseudo_count=100,
                            precision=0.97, val_accuracy=0.61),
            MiningReportRow(round=2, pseudo_count=180,
                            precision=0.955, val_accuracy=0.685),
        ],
    )


def test_csv_round_trip():
    rep = _report()
    back = parse_csv(render_csv(rep))
    assert back == rep


def test_csv_round_trip_empty():
    rep = MetricsReport(rows=[], mining=[])
    assert parse_csv(render_csv(rep)) == rep


def test_csv_headers_present():
    text = render_csv(_report())
    assert "model,train_resolution,test_resolution,error_percent" in text
    assert "round,pseudo_count,precision,val_accuracy" in text


def test_table_one_decimal_errors():
    text = render_table(_report())
    assert "12.9" in text
    assert "8.2" in text or "8.3" in text
    assert "8.25" not in text


def test_table_empty_report_is_header_only():
    text = render_table(MetricsReport(rows=[], mining=[]))
    assert "Model" in text
    assert "generic" not in text


def test_table_lists_every_model():
    text = render_table(_report())
    assert "generic" in text
    assert "fused-routed" in text

"""Evaluation metrics and the run report in its two renderings.

The CSV rendering stores floats at full precision and parses back exactly;
the text table is for reading, with errors shown to one decimal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, ValidationError


def top1_error(predictions, truth) -> float:
    """Percent of mismatched labels: 100 * (1 - matches / total)."""
    preds = np.asarray(predictions)
    labels = np.asarray(truth)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValidationError(
            f"predictions shape {preds.shape} must match truth shape {labels.shape}"
        )
    if preds.size == 0:
        raise ValidationError("error rate requires at least one prediction")
    return float(100.0 * (1.0 - np.mean(preds == labels)))


@dataclass
class ReportRow:
    model: str
    train_resolution: int
    test_resolution: int
    error_percent: float


@dataclass
class MiningReportRow:
    """One mining round as reported: cumulative counts, hidden-label precision."""

    round: int
    pseudo_count: int
    precision: float
    val_accuracy: float


@dataclass
class MetricsReport:
    rows: list[ReportRow] = field(default_factory=list)
    mining: list[MiningReportRow] = field(default_factory=list)


_RESULT_HEADER = "model,train_resolution,test_resolution,error_percent"
_MINING_HEADER = "round,pseudo_count,precision,val_accuracy"


def render_csv(report: MetricsReport) -> str:
    """Two-section CSV; floats use repr so parsing restores them exactly."""
    lines = ["[results]", _RESULT_HEADER]
    for row in report.rows:
        if "," in row.model:
            raise ValidationError(f"model name {row.model!r} must not contain commas")
        lines.append(
            f"{row.model},{row.train_resolution},{row.test_resolution},"
            f"{row.error_percent!r}"
        )
    lines.append("[mining]")
    lines.append(_MINING_HEADER)
    for r in report.mining:
        lines.append(
            f"{r.round},{r.pseudo_count},{r.precision!r},{r.val_accuracy!r}"
        )
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> MetricsReport:
    lines = [ln for ln in text.splitlines() if ln]
    report = MetricsReport()
    section = None
    expect_header = None
    for ln_no, line in enumerate(lines, start=1):
        if line == "[results]":
            section, expect_header = "results", _RESULT_HEADER
            continue
        if line == "[mining]":
            section, expect_header = "mining", _MINING_HEADER
            continue
        if section is None:
            raise IntegrityError(f"report line {ln_no}: data before any section")
        if expect_header is not None:
            if line != expect_header:
                raise IntegrityError(
                    f"report line {ln_no}: expected header '{expect_header}'"
                )
            expect_header = None
            continue
        parts = line.split(",")
        try:
            if section == "results":
                if len(parts) != 4:
                    raise ValueError("expected 4 fields")
                report.rows.append(ReportRow(
                    model=parts[0], train_resolution=int(parts[1]),
                    test_resolution=int(parts[2]), error_percent=float(parts[3]),
                ))
            else:
                if len(parts) != 4:
                    raise ValueError("expected 4 fields")
                report.mining.append(MiningReportRow(
                    round=int(parts[0]), pseudo_count=int(parts[1]),
                    precision=float(parts[2]), val_accuracy=float(parts[3]),
                ))
        except ValueError as exc:
            raise IntegrityError(f"report line {ln_no}: {exc}") from exc
    return report


def render_table(report: MetricsReport) -> str:
    """Aligned text table; errors to one decimal place."""
    headers = ["Model", "Training resolution", "Test resolution", "Error(%)"]
    body = [
        [
            row.model,
            str(row.train_resolution),
            str(row.test_resolution),
            f"{row.error_percent:.1f}",
        ]
        for row in report.rows
    ]
    widths = [
        max(len(headers[c]), *(len(r[c]) for r in body)) if body else len(headers[c])
        for c in range(4)
    ]

    def fmt(cells):
        return " | ".join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()

    lines = [fmt(headers), "-+-".join("-" * w for w in widths)]
    lines.extend(fmt(r) for r in body)

    if report.mining:
        lines.append("")
        lines.append("Mining rounds")
        mh = ["Round", "Pseudo-labels", "Precision(%)", "Val accuracy(%)"]
        mb = [
            [
                str(r.round),
                str(r.pseudo_count),
                f"{100.0 * r.precision:.1f}",
                f"{100.0 * r.val_accuracy:.1f}",
            ]
            for r in report.mining
        ]
        mw = [max(len(mh[c]), *(len(r[c]) for r in mb)) for c in range(4)]
        lines.append(" | ".join(h.ljust(w) for h, w in zip(mh, mw)).rstrip())
        lines.append("-+-".join("-" * w for w in mw))
        lines.extend(
            " | ".join(cell.ljust(w) for cell, w in zip(r, mw)).rstrip() for r in mb
        )
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, fmt: str) -> str:
    if fmt == "csv":
        return render_csv(report)
    if fmt == "table":
        return render_table(report)
    raise ValidationError(f"unknown report format {fmt!r}; use 'csv' or 'table'")

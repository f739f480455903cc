"""Figure rendering for the run report.

Figures are written as PNG files with fixed size, dpi, and stripped
metadata so repeat runs produce identical bytes.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import ValidationError
from .metrics import MetricsReport, MiningReportRow

_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def mining_curve_figure(curve: list[MiningReportRow], path: str | Path) -> None:
    """Validation accuracy and cumulative mined count per round."""
    if not curve:
        raise ValidationError("mining curve must be non-empty")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rounds = [r.round for r in curve]
    accs = [100.0 * r.val_accuracy for r in curve]
    totals = [r.pseudo_count for r in curve]

    fig, (ax_acc, ax_cnt) = plt.subplots(1, 2, figsize=(8, 3))
    ax_acc.plot(rounds, accs, marker="o", color="#1f6f8b")
    ax_acc.set_xlabel("round")
    ax_acc.set_ylabel("validation accuracy (%)")
    ax_acc.set_title("Ensemble accuracy per round")
    ax_acc.set_xticks(rounds)
    ax_acc.grid(True, alpha=0.3)

    ax_cnt.bar(rounds, totals, color="#c05746")
    ax_cnt.set_xlabel("round")
    ax_cnt.set_ylabel("mined labels (cumulative)")
    ax_cnt.set_title("Mined pool size")
    ax_cnt.set_xticks(rounds)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def model_errors_figure(report: MetricsReport, path: str | Path) -> None:
    """Horizontal bars of test error per report row."""
    if not report.rows:
        raise ValidationError("report must have at least one row")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [row.model for row in report.rows]
    errors = [row.error_percent for row in report.rows]

    fig, ax = plt.subplots(figsize=(7, 0.6 * len(names) + 1.2))
    ypos = range(len(names))
    ax.barh(list(ypos), errors, color="#3a6b35")
    ax.set_yticks(list(ypos))
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_xlabel("top-1 error (%)")
    ax.set_title("Test error by model")
    for y, e in zip(ypos, errors):
        ax.text(e, y, f" {e:.1f}", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)

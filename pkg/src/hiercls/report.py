"""Render evaluation results as aligned text tables and JSON documents.

Three table shapes cover the reporting needs:

* mode summary: one row per training mode, headline metrics as
  mean +/- std across folds;
* stage table: per-sibling-group accuracy (plus exact leaves), rows are
  stages, columns are modes;
* per-class table: F1 per class, columns are modes.

A single evaluation (no folds) reuses the same renderers with one
column and no std.
"""

from __future__ import annotations

import json
from typing import Mapping, Sequence

import numpy as np

from hiercls.metrics import MetricReport
from hiercls.taxonomy import Taxonomy
from hiercls.trainer import ExperimentResult


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.array([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return float("nan"), 0.0
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), std


def _cell(mean: float, std: float, with_std: bool) -> str:
    if np.isnan(mean):
        return "-"
    return f"{mean:.4f} ± {std:.4f}" if with_std else f"{mean:.4f}"


def _table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        first = f"{cells[0]:<{widths[0]}}"
        rest = "  ".join(f"{c:>{widths[i + 1]}}" for i, c in enumerate(cells[1:]))
        return (first + "  " + rest).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"


def experiment_to_doc(result: ExperimentResult) -> dict:
    """Full JSON-ready dump of one cross-validated experiment."""
    return {
        "mode": result.mode,
        "k": result.k,
        "summary": {
            name: {"mean": m, "std": s} for name, (m, s) in sorted(result.summary().items())
        },
        "folds": [
            {
                "fold": f.fold,
                "val_slides": list(f.val_slides),
                "patch": f.patch_report.to_doc(),
                "slide": f.slide_report.to_doc(),
                "patch_stages": f.patch_stages,
                "slide_stages": f.slide_stages,
            }
            for f in result.folds
        ],
    }


def experiment_json(result: ExperimentResult) -> str:
    return json.dumps(experiment_to_doc(result), indent=2)


_SUMMARY_COLUMNS = (
    ("patch acc", "patch_accuracy"),
    ("patch mF1", "patch_macro_f1"),
    ("patch AUROC", "patch_auroc"),
    ("patch hF", "patch_h_f1"),
    ("slide acc", "slide_accuracy"),
    ("slide mF1", "slide_macro_f1"),
    ("slide hF", "slide_h_f1"),
)


def mode_summary_text(results: Mapping[str, ExperimentResult]) -> str:
    """One row per mode; cells are mean +/- std across folds."""
    headers = ["mode"] + [label for label, _ in _SUMMARY_COLUMNS]
    rows = []
    for mode, res in results.items():
        summary = res.summary()
        cells = [mode]
        for _, key in _SUMMARY_COLUMNS:
            if key in summary:
                m, s = summary[key]
                cells.append(_cell(m, s, with_std=True))
            else:
                cells.append("-")
        rows.append(cells)
    return _table(headers, rows)


def _stage_names(tax: Taxonomy) -> list[str]:
    return [seg.group for seg in tax.logit_layout().segments] + ["leaves"]


def stage_table_text(
    results: Mapping[str, ExperimentResult], tax: Taxonomy, level: str = "slide"
) -> str:
    """Per-stage accuracy table; level is "patch" or "slide"."""
    if level not in ("patch", "slide"):
        raise ValueError(f"level must be 'patch' or 'slide', got {level!r}")
    headers = [f"stage ({level})"] + list(results)
    rows = []
    for stage in _stage_names(tax):
        cells = [stage]
        for res in results.values():
            vals = [
                (f.patch_stages if level == "patch" else f.slide_stages).get(stage)
                for f in res.folds
            ]
            m, s = _mean_std([v for v in vals if v is not None])
            cells.append(_cell(m, s, with_std=len(res.folds) > 1))
        rows.append(cells)
    return _table(headers, rows)


def per_class_f1_text(results: Mapping[str, ExperimentResult]) -> str:
    """Per-class F1 (patch level), one column per mode; honors merged
    class names when a merge map was used."""
    class_order: list[str] = []
    for res in results.values():
        for f in res.folds:
            for c in f.patch_report.class_order:
                if c not in class_order:
                    class_order.append(c)
    headers = ["class"] + list(results)
    rows = []
    for cls in class_order:
        cells = [cls]
        for res in results.values():
            vals = [
                f.patch_report.per_class[cls].f1
                for f in res.folds
                if cls in f.patch_report.per_class
            ]
            m, s = _mean_std(vals)
            cells.append(_cell(m, s, with_std=len(vals) > 1))
        rows.append(cells)
    return _table(headers, rows)


def comparison_text(results: Mapping[str, ExperimentResult], tax: Taxonomy) -> str:
    parts = [
        "mode summary (mean ± std over folds)",
        "",
        mode_summary_text(results),
        "stage accuracies, slide level",
        "",
        stage_table_text(results, tax, level="slide"),
        "stage accuracies, patch level",
        "",
        stage_table_text(results, tax, level="patch"),
        "per-class F1, patch level",
        "",
        per_class_f1_text(results),
    ]
    return "\n".join(parts)


def stages_text(stages: Mapping[str, float | None], title: str) -> str:
    rows = [[k, "-" if v is None else f"{v:.4f}"] for k, v in stages.items()]
    return _table([title, "accuracy"], rows)


def eval_report_text(
    patch_report: MetricReport,
    slide_report: MetricReport,
    patch_stages: Mapping[str, float | None],
    slide_stages: Mapping[str, float | None],
) -> str:
    parts = [
        "== patch level ==",
        "",
        patch_report.to_text(),
        stages_text(patch_stages, "stage (patch)"),
        "== slide level ==",
        "",
        slide_report.to_text(),
        stages_text(slide_stages, "stage (slide)"),
    ]
    return "\n".join(parts)

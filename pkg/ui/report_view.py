"""
Text and CSV rendering of evaluation reports.
Builds the model comparison table and per-slice breakdowns as DataFrames.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import pandas as pd

from core.evaluation import ComparisonRow, MetricsReport

logger = logging.getLogger(__name__)

COMPARISON_COLUMNS = ["model", "MAP", "MRR", "P@1", "Avg.Click", "#Better", "P-Improve", "p_value"]
SLICE_COLUMNS = ["slice", "label", "n_queries", "MAP", "delta_MAP", "MRR", "P@1", "Avg.Click", "#Better", "P-Improve"]


def comparison_frame(rows: Sequence[ComparisonRow]) -> pd.DataFrame:
    """One row per model in the given order."""
    return pd.DataFrame([row.to_dict() for row in rows], columns=COMPARISON_COLUMNS)


def slice_frame(report: MetricsReport) -> pd.DataFrame:
    records: List[dict] = []
    for slicer, groups in report.slices.items():
        for label, sub in groups.items():
            data = sub.to_dict()
            records.append({
                "slice": slicer,
                "label": label,
                "n_queries": data["n_queries"],
                "MAP": data["MAP"],
                "delta_MAP": data.get("delta_MAP"),
                "MRR": data["MRR"],
                "P@1": data["P@1"],
                "Avg.Click": data["Avg.Click"],
                "#Better": data["#Better"],
                "P-Improve": data["P-Improve"],
            })
    return pd.DataFrame(records, columns=SLICE_COLUMNS)


def _format_value(value) -> str:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def render_table(frame: pd.DataFrame) -> str:
    """Aligned plain-text table; missing values print as '-'."""
    if frame.empty:
        return "(no rows)"
    formatted = frame.astype(object).apply(lambda column: column.map(_format_value))
    return formatted.to_string(index=False)


def render_comparison(rows: Sequence[ComparisonRow]) -> str:
    return render_table(comparison_frame(rows))


def render_report(name: str, report: MetricsReport) -> str:
    lines = [f"== {name} ({report.n_queries} queries)"]
    lines.append(render_table(slice_frame(report)))
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines)


def write_comparison(rows: Sequence[ComparisonRow], out_dir: str) -> Dict[str, Path]:
    """Write ``comparison.csv`` and ``comparison.txt`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame = comparison_frame(rows)
    paths = {"csv": out / "comparison.csv", "txt": out / "comparison.txt"}
    frame.to_csv(paths["csv"], index=False, float_format="%.6f", lineterminator="\n")
    paths["txt"].write_text(render_table(frame) + "\n", encoding="utf-8")
    return paths


def write_reports(reports: Mapping[str, MetricsReport], out_dir: str) -> Dict[str, Path]:
    """One ``report_<model>.json`` and aligned ``report_<model>.txt`` per model; returns the JSON paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, report in reports.items():
        path = out / f"report_{name}.json"
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / f"report_{name}.txt").write_text(render_report(name, report) + "\n", encoding="utf-8")
        paths[name] = path
        logger.debug(f"Wrote {path}")
    return paths

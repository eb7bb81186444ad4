"""
Ranking metrics, inverse-document-pair counting, slice analyses and paired tests.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from core.query_log import QueryEvent

logger = logging.getLogger(__name__)

ENTROPY_CUTOFF = 1.0
POSITION_BUCKETS = ("1", "2", "3", "4", "5+")
QUERY_CSV_FIELDS = ("user", "session", "qid", "slice", "ap", "rr", "p1", "avg_click", "n_pairs", "n_better")


class EvaluationError(Exception):
    pass


class Slicer(Enum):
    CLICK_ENTROPY = "click_entropy_cutoff_1"
    REPEATED_QUERY = "repeated_query"
    SESSION_POSITION = "session_position"


class AvgClickMode(Enum):
    PER_QUERY = "per_query"
    PER_CLICK = "per_click"


# ---------------------------------------------------------------------------
# per-query metrics
# ---------------------------------------------------------------------------

def average_precision(ranking: Sequence[str], relevant: Iterable[str]) -> float:
    """Mean precision at each relevant document's rank; 0 when nothing is relevant."""
    relevant = set(relevant)
    if not relevant:
        return 0.0
    hits = 0
    total = 0.0
    for rank, doc in enumerate(ranking, start=1):
        if doc in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def average_precision_labels(labels: Sequence[bool]) -> float:
    """AP for a ranking given as relevance flags in rank order."""
    labels = np.asarray(labels, dtype=bool)
    n_rel = int(labels.sum())
    if n_rel == 0:
        return 0.0
    ranks = np.flatnonzero(labels) + 1
    return float((np.arange(1, n_rel + 1) / ranks).sum() / n_rel)


def reciprocal_rank(ranking: Sequence[str], relevant: Iterable[str]) -> float:
    relevant = set(relevant)
    for rank, doc in enumerate(ranking, start=1):
        if doc in relevant:
            return 1.0 / rank
    return 0.0


def precision_at_1(ranking: Sequence[str], relevant: Iterable[str]) -> float:
    relevant = set(relevant)
    return 1.0 if ranking and ranking[0] in relevant else 0.0


def click_positions(ranking: Sequence[str], clicked: Iterable[str]) -> List[int]:
    clicked = set(clicked)
    return [rank for rank, doc in enumerate(ranking, start=1) if doc in clicked]


def avg_click_position(ranking: Sequence[str], clicked: Iterable[str]) -> float:
    """Mean re-ranked position of the given documents; 0 when there are none."""
    positions = click_positions(ranking, clicked)
    return float(np.mean(positions)) if positions else 0.0


@dataclass(frozen=True)
class InversePair:
    """A clicked document and an unclicked document originally ranked above it."""
    clicked_doc: str
    skipped_doc: str
    clicked_position: int
    skipped_position: int


def inverse_pairs(event: QueryEvent) -> List[InversePair]:
    pairs = []
    for c in event.impressions:
        if not c.clicked:
            continue
        for s in event.impressions:
            if not s.clicked and s.position < c.position:
                pairs.append(InversePair(c.doc_id, s.doc_id, c.position, s.position))
    return pairs


def count_improved(pairs: Sequence[InversePair], ranking: Sequence[str]) -> Tuple[int, Optional[float]]:
    """
    (#Better, P-Improve): pairs whose clicked doc now ranks above the skipped doc.

    P-Improve is None when there are no pairs.
    """
    if not pairs:
        return 0, None
    rank = {d: i for i, d in enumerate(ranking)}
    better = sum(1 for p in pairs if rank[p.clicked_doc] < rank[p.skipped_doc])
    return better, better / len(pairs)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QueryContext:
    """Slice attributes of one evaluated query."""
    user_id: str
    session_id: str
    query_id: str
    entropy: float = 0.0
    repeated: bool = False
    session_position: int = 1


@dataclass
class QueryResult:
    """Metrics of one re-ranked query with at least one SAT click."""
    context: QueryContext
    ranking: Tuple[str, ...]
    ap: float
    rr: float
    p1: float
    avg_click: float
    click_positions: Tuple[int, ...]
    n_pairs: int
    n_better: int

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.context.user_id, self.context.session_id, self.context.query_id)


def evaluate_query(event: QueryEvent, ranking: Sequence[str], context: QueryContext) -> Optional[QueryResult]:
    """
    Metrics of ``ranking`` for ``event``; None when the query has no SAT click.

    Raises:
        EvaluationError: If ``ranking`` is not a permutation of the event's results
    """
    if sorted(ranking) != sorted(event.doc_ids):
        raise EvaluationError(f"Ranking for query {event.query_id} is not a permutation of its results")
    relevant = event.sat_docs()
    if not relevant:
        return None
    pairs = inverse_pairs(event)
    better, _ = count_improved(pairs, ranking)
    positions = click_positions(ranking, event.clicked_docs())
    return QueryResult(
        context=context,
        ranking=tuple(ranking),
        ap=average_precision(ranking, relevant),
        rr=reciprocal_rank(ranking, relevant),
        p1=precision_at_1(ranking, relevant),
        avg_click=float(np.mean(positions)),
        click_positions=tuple(positions),
        n_pairs=len(pairs),
        n_better=better,
    )


@dataclass
class MetricsReport:
    """Aggregate metrics over evaluated queries."""
    n_queries: int = 0
    map: float = 0.0
    mrr: float = 0.0
    p_at_1: float = 0.0
    avg_click: float = 0.0
    better_pairs: int = 0
    total_pairs: int = 0
    p_improve: Optional[float] = None
    delta_map: Optional[float] = None
    slices: Dict[str, Dict[str, "MetricsReport"]] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        data = {
            "n_queries": self.n_queries,
            "MAP": self.map,
            "MRR": self.mrr,
            "P@1": self.p_at_1,
            "Avg.Click": self.avg_click,
            "#Better": self.better_pairs,
            "total_pairs": self.total_pairs,
            "P-Improve": self.p_improve,
        }
        if self.delta_map is not None:
            data["delta_MAP"] = self.delta_map
        if self.slices:
            data["slices"] = {
                name: {label: report.to_dict() for label, report in groups.items()}
                for name, groups in self.slices.items()
            }
        if self.notes:
            data["notes"] = list(self.notes)
        return data


def aggregate(results: Sequence[QueryResult], avg_click_mode: AvgClickMode = AvgClickMode.PER_QUERY) -> MetricsReport:
    """Fold per-query results into means, in the given order."""
    if not results:
        return MetricsReport()
    better = sum(r.n_better for r in results)
    total = sum(r.n_pairs for r in results)
    if avg_click_mode is AvgClickMode.PER_CLICK:
        positions = [p for r in results for p in r.click_positions]
        avg_click = float(np.mean(positions))
    else:
        avg_click = float(np.mean([r.avg_click for r in results]))
    return MetricsReport(
        n_queries=len(results),
        map=float(np.mean([r.ap for r in results])),
        mrr=float(np.mean([r.rr for r in results])),
        p_at_1=float(np.mean([r.p1 for r in results])),
        avg_click=avg_click,
        better_pairs=better,
        total_pairs=total,
        p_improve=better / total if total else None,
    )


def slice_label(context: QueryContext, slicer: Slicer) -> str:
    if slicer is Slicer.CLICK_ENTROPY:
        return "<1" if context.entropy < ENTROPY_CUTOFF else ">=1"
    if slicer is Slicer.REPEATED_QUERY:
        return "repeated" if context.repeated else "non-repeated"
    position = context.session_position
    return POSITION_BUCKETS[min(position, len(POSITION_BUCKETS)) - 1]


def slice_labels(slicer: Slicer) -> Tuple[str, ...]:
    if slicer is Slicer.CLICK_ENTROPY:
        return ("<1", ">=1")
    if slicer is Slicer.REPEATED_QUERY:
        return ("repeated", "non-repeated")
    return POSITION_BUCKETS


def slice_report(results: Sequence[QueryResult], slicer: Slicer,
                 baseline: Optional[Sequence[QueryResult]] = None,
                 avg_click_mode: AvgClickMode = AvgClickMode.PER_QUERY) -> Dict[str, MetricsReport]:
    """
    One report per slice label; ``delta_map`` is measured against ``baseline``
    (normally the original ranking) on the same queries. Empty slices are omitted.
    """
    base_ap = {r.key: r.ap for r in baseline} if baseline is not None else None
    groups: Dict[str, List[QueryResult]] = {label: [] for label in slice_labels(slicer)}
    for result in results:
        groups[slice_label(result.context, slicer)].append(result)
    reports = {}
    for label, members in groups.items():
        if not members:
            logger.info(f"Slice {slicer.value}={label} is empty, omitted")
            continue
        report = aggregate(members, avg_click_mode)
        if base_ap is not None:
            report.delta_map = float(np.mean([r.ap - base_ap[r.key] for r in members]))
        reports[label] = report
    return reports


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """
    Two-sided paired t-test; returns (t, p).

    Degenerate inputs (fewer than 2 pairs or identical samples) give (0.0, 1.0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError("paired_t_test needs samples of equal length")
    diff = a - b
    if len(diff) < 2 or np.allclose(diff, diff[0]):
        return 0.0, 1.0
    result = stats.ttest_rel(a, b)
    t, p = float(result.statistic), float(result.pvalue)
    if not math.isfinite(p):
        return 0.0, 1.0
    return t, p


def full_report(results: Sequence[QueryResult], baseline: Optional[Sequence[QueryResult]] = None,
                avg_click_mode: AvgClickMode = AvgClickMode.PER_QUERY) -> MetricsReport:
    """aggregate plus every slice breakdown and the overall ΔMAP against ``baseline``."""
    report = aggregate(results, avg_click_mode)
    if baseline is not None and results:
        base_ap = {r.key: r.ap for r in baseline}
        report.delta_map = float(np.mean([r.ap - base_ap[r.key] for r in results]))
    for slicer in Slicer:
        groups = slice_report(results, slicer, baseline, avg_click_mode)
        report.slices[slicer.value] = groups
        missing = [label for label in slice_labels(slicer) if label not in groups]
        if missing:
            report.notes.append(f"{slicer.value}: empty slices omitted: {', '.join(missing)}")
    return report


@dataclass
class ComparisonRow:
    model: str
    report: MetricsReport
    p_value: Optional[float] = None
    t_stat: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "MAP": self.report.map,
            "MRR": self.report.mrr,
            "P@1": self.report.p_at_1,
            "Avg.Click": self.report.avg_click,
            "#Better": self.report.better_pairs,
            "P-Improve": self.report.p_improve,
            "p_value": self.p_value,
        }


def compare_models(per_model: Mapping[str, Sequence[QueryResult]], reference: str = "original",
                   avg_click_mode: AvgClickMode = AvgClickMode.PER_QUERY) -> List[ComparisonRow]:
    """
    Comparison rows in the given model order, each with a paired t-test on
    per-query AP against ``reference``.
    """
    if reference not in per_model:
        raise EvaluationError(f"Reference model {reference!r} missing from comparison")
    base = {r.key: r.ap for r in per_model[reference]}
    rows = []
    for name, results in per_model.items():
        report = aggregate(results, avg_click_mode)
        if name == reference:
            rows.append(ComparisonRow(name, report))
            continue
        t, p = paired_t_test([r.ap for r in results], [base[r.key] for r in results])
        rows.append(ComparisonRow(name, report, p_value=p, t_stat=t))
    return rows


def write_query_csv(results: Sequence[QueryResult], path: str, slicer: Slicer = Slicer.CLICK_ENTROPY) -> int:
    """Per-query rows for plotting; returns the row count."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [(r.context.user_id, r.context.session_id, r.context.query_id, slice_label(r.context, slicer),
          float(r.ap), float(r.rr), float(r.p1), float(r.avg_click), int(r.n_pairs), int(r.n_better))
         for r in results],
        columns=list(QUERY_CSV_FIELDS),
    )
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return len(frame)

"""
Attention dump: how much each past session contributes to one query's long-term interest.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import pandas as pd

from core.features import EncodedUser
from core.hrnn import HrnnRanker

logger = logging.getLogger(__name__)

DISPLAY_THRESHOLD = 0.01


@dataclass
class AttentionRow:
    session_index: int
    session_id: str
    representative_query: str
    weight: float

    @property
    def below_threshold(self) -> bool:
        return self.weight < DISPLAY_THRESHOLD


@dataclass
class AttentionDump:
    user_id: str
    session_index: int
    query_index: int
    query: str
    rows: List[AttentionRow] = field(default_factory=list)
    note: Optional[str] = None

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{
                "session_index": r.session_index,
                "session_id": r.session_id,
                "representative_query": r.representative_query,
                "weight": r.weight,
                "below_0.01": r.below_threshold,
            } for r in self.rows],
            columns=["session_index", "session_id", "representative_query", "weight", "below_0.01"],
        )


def attention_dump(ranker: HrnnRanker, user: EncodedUser, session_index: int, query_index: int) -> AttentionDump:
    """
    Attention weights over the past sessions of ``user`` for one query.

    Raises:
        ValueError: If the model has no query-aware attention
    """
    if not ranker.params.config.variant.uses_attention:
        raise ValueError(f"Model variant {ranker.params.config.variant.value} has no attention weights")
    event = user.sessions[session_index][query_index]
    dump = AttentionDump(user.user_id, session_index, query_index, event.query_key)
    if session_index == 0:
        dump.note = "no past sessions; nothing to attend to"
        return dump
    state = ranker.interest_state(user, session_index, query_index)
    for i, weight in enumerate(state.attention_weights):
        dump.rows.append(AttentionRow(i, user.session_ids[i], user.representative_query(i), float(weight)))
    return dump


def render_attention(dump: AttentionDump, hide_below_threshold: bool = False) -> str:
    header = f"user {dump.user_id}, session {dump.session_index}, query {dump.query_index}: {dump.query!r}"
    if dump.note:
        return f"{header}\n{dump.note}"
    frame = dump.frame()
    if hide_below_threshold:
        frame = frame[~frame["below_0.01"]]
    frame = frame.assign(
        weight=frame["weight"].map(lambda w: f"{w:.4f}"),
        flag=frame["below_0.01"].map(lambda low: "<0.01" if low else ""),
    ).drop(columns=["below_0.01"])
    return f"{header}\n{frame.to_string(index=False)}"


def write_attention(dump: AttentionDump, path: str) -> Path:
    """CSV dump; a user without history gets a header-only file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dump.frame().to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    if dump.note:
        logger.info(f"Attention dump for {dump.user_id}: {dump.note}")
    return path

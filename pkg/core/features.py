"""
Per-document click features and pre-encoded user histories for the neural ranker.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from core.baselines import ClickStore
from core.query_log import QueryEvent, UserLog
from core.text_repr import TextEncoder

logger = logging.getLogger(__name__)

N_FEATURES = 4


@dataclass(frozen=True)
class FeatureVector:
    reciprocal_position: float
    user_doc_clicks: float
    user_query_doc_clicks: float
    click_entropy: float

    def as_array(self) -> np.ndarray:
        return np.array([
            self.reciprocal_position, self.user_doc_clicks,
            self.user_query_doc_clicks, self.click_entropy,
        ])


def document_features(store: ClickStore, user: str, event: QueryEvent, doc: str, position: int) -> FeatureVector:
    """Click counts use only clicks before the query was issued."""
    return FeatureVector(
        reciprocal_position=1.0 / position,
        user_doc_clicks=math.log1p(store.doc_clicks(user, doc, before=event.timestamp)),
        user_query_doc_clicks=math.log1p(store.clicks(user, event.query_key, doc, before=event.timestamp)),
        click_entropy=store.click_entropy(event.query_key),
    )


def event_features(store: ClickStore, user: str, event: QueryEvent) -> np.ndarray:
    """K x 4 feature matrix in original result order."""
    return np.stack([
        document_features(store, user, event, imp.doc_id, imp.position).as_array()
        for imp in event.impressions
    ])


@dataclass(frozen=True)
class EncodedEvent:
    """Everything the model needs about one query, as arrays."""
    query_id: str
    query_key: str
    timestamp: int
    query_vec: np.ndarray
    sat_vec: np.ndarray
    docs: np.ndarray
    features: np.ndarray
    relevance: np.ndarray
    clicked: np.ndarray
    positions: np.ndarray
    doc_ids: Tuple[str, ...]
    event: QueryEvent

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def has_pairs(self) -> bool:
        return bool(self.relevance.any() and not self.relevance.all())


@dataclass(frozen=True)
class EncodedUser:
    user_id: str
    sessions: Tuple[Tuple[EncodedEvent, ...], ...]
    session_ids: Tuple[str, ...]

    def representative_query(self, session_index: int) -> str:
        """Most frequent normalized query of a session; earliest wins ties."""
        counts: Dict[str, int] = {}
        for ev in self.sessions[session_index]:
            counts[ev.query_key] = counts.get(ev.query_key, 0) + 1
        best = max(counts.values())
        for ev in self.sessions[session_index]:
            if counts[ev.query_key] == best:
                return ev.query_key
        return ""


class LogEncoder:
    """
    Turns UserLogs into EncodedUsers with a shared TextEncoder and ClickStore.
    """

    def __init__(self, text: TextEncoder, store: ClickStore):
        self.text = text
        self.store = store

    def encode_event(self, user: str, event: QueryEvent) -> EncodedEvent:
        return EncodedEvent(
            query_id=event.query_id,
            query_key=event.query_key,
            timestamp=event.timestamp,
            query_vec=self.text.query_vector(event.terms),
            sat_vec=self.text.sat_vector(event.sat_docs()),
            docs=self.text.doc_matrix(event.doc_ids),
            features=event_features(self.store, user, event),
            relevance=np.array([imp.sat for imp in event.impressions], dtype=bool),
            clicked=np.array([imp.clicked for imp in event.impressions], dtype=bool),
            positions=np.array([imp.position for imp in event.impressions], dtype=np.int64),
            doc_ids=event.doc_ids,
            event=event,
        )

    def encode_user(self, log: UserLog) -> EncodedUser:
        sessions = tuple(
            tuple(self.encode_event(log.user_id, ev) for ev in session.events)
            for session in log.sessions
        )
        return EncodedUser(log.user_id, sessions, tuple(s.session_id for s in log.sessions))

    def encode_all(self, logs: Sequence[UserLog]) -> Dict[str, EncodedUser]:
        encoded = {log.user_id: self.encode_user(log) for log in logs}
        logger.debug(f"Encoded {len(encoded)} users")
        return encoded

"""
Click-log data model for the re-ranking toolkit.
Handles JSON-Lines ingestion, SAT-click labeling, user filtering and
session-based train/validation/test splitting.
"""

import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from core.utils import resource_path

logger = logging.getLogger(__name__)

SAT_DWELL_SECONDS = 30
MAX_RESULTS = 20
DEFAULT_SESSION_GAP = 30 * 60
REQUIRED_FIELDS = ("user", "qid", "ts", "query", "results")


class QueryLogError(Exception):
    """Base exception for log ingestion errors."""
    pass


class LogFormatError(QueryLogError):
    """Raised when a log line cannot be parsed or violates the schema."""

    def __init__(self, message: str, line: Optional[int] = None, field_name: Optional[str] = None):
        self.line = line
        self.field_name = field_name
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DuplicateRecordError(LogFormatError):
    """Raised when a (user, session, query_id) triple appears twice."""
    pass


class LastClickScope(Enum):
    """Which click counts as 'the last one' for the SAT rule."""
    SESSION = "session"
    QUERY = "query"


@dataclass(frozen=True)
class Impression:
    """One ranked result shown for a query."""
    doc_id: str
    position: int
    clicked: bool = False
    dwell_seconds: float = 0.0
    click_ts: Optional[int] = None
    is_last_click_in_session: bool = False
    sat: bool = False


@dataclass(frozen=True)
class QueryEvent:
    """A query issued by a user together with its result list."""
    query_id: str
    timestamp: int
    terms: Tuple[str, ...]
    impressions: Tuple[Impression, ...]
    raw_query: str = ""

    @property
    def query_key(self) -> str:
        """Normalized query text used for identical-query matching."""
        return " ".join(self.terms)

    @property
    def doc_ids(self) -> Tuple[str, ...]:
        return tuple(imp.doc_id for imp in self.impressions)

    def sat_docs(self) -> FrozenSet[str]:
        return frozenset(imp.doc_id for imp in self.impressions if imp.sat)

    def clicked_docs(self) -> FrozenSet[str]:
        return frozenset(imp.doc_id for imp in self.impressions if imp.clicked)


@dataclass(frozen=True)
class Session:
    session_id: str
    events: Tuple[QueryEvent, ...]

    @property
    def start_ts(self) -> int:
        return self.events[0].timestamp

    @property
    def end_ts(self) -> int:
        return self.events[-1].timestamp


@dataclass(frozen=True)
class UserLog:
    user_id: str
    sessions: Tuple[Session, ...]

    def events(self) -> Iterable[Tuple[int, int, QueryEvent]]:
        """Yield (session index, query index, event) in time order."""
        for s_idx, session in enumerate(self.sessions):
            for q_idx, event in enumerate(session.events):
                yield s_idx, q_idx, event


@dataclass(frozen=True)
class DatasetSplit:
    """Per-user session index sets; indices refer to ``UserLog.sessions``."""
    user_id: str
    profile_sessions: Tuple[int, ...] = ()
    train_sessions: Tuple[int, ...] = ()
    validation_sessions: Tuple[int, ...] = ()
    test_sessions: Tuple[int, ...] = ()

    @property
    def supervised(self) -> bool:
        return bool(self.test_sessions)

    def training_period(self) -> FrozenSet[int]:
        """Sessions whose clicks may feed statistics used at test time."""
        return frozenset(self.profile_sessions + self.train_sessions + self.validation_sessions)


class Tokenizer:
    """
    Lowercases, splits on non-alphanumerics, drops stopwords and 1-char tokens.
    """

    def __init__(self, stopwords: Optional[Iterable[str]] = None, min_length: int = 2):
        self.stopwords = frozenset(w.lower() for w in (stopwords if stopwords is not None else load_stopwords()))
        self.min_length = min_length

    def __call__(self, text: str) -> Tuple[str, ...]:
        tokens = re.findall(r"[^\W_]+", text.lower())
        return tuple(t for t in tokens if len(t) >= self.min_length and t not in self.stopwords)


def load_stopwords(path: Optional[str] = None) -> FrozenSet[str]:
    """Read one stopword per line; '#' starts a comment."""
    path = path or resource_path("assets/stopwords.txt")
    words = set()
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            word = line.split("#", 1)[0].strip().lower()
            if word:
                words.add(word)
    return frozenset(words)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

@dataclass
class _Record:
    line: int
    user: str
    session: Optional[str]
    qid: str
    ts: int
    query: str
    results: List[Tuple[str, int]]
    clicks: Dict[str, Tuple[int, float]] = field(default_factory=dict)


def _require(record: dict, name: str, kind, line: int):
    if name not in record:
        raise LogFormatError(f"missing required field '{name}'", line, name)
    value = record[name]
    if kind is int and isinstance(value, bool):
        raise LogFormatError(f"field '{name}' must be an integer", line, name)
    if not isinstance(value, kind):
        raise LogFormatError(f"field '{name}' has wrong type {type(value).__name__}", line, name)
    return value


def _parse_record(raw: dict, line: int, allow_missing_session: bool) -> _Record:
    if not isinstance(raw, dict):
        raise LogFormatError("record must be a JSON object", line)
    for name in REQUIRED_FIELDS:
        if name not in raw:
            raise LogFormatError(f"missing required field '{name}'", line, name)
    session = raw.get("session")
    if session is None and not allow_missing_session:
        raise LogFormatError("missing required field 'session'", line, "session")
    if session is not None and not isinstance(session, str):
        raise LogFormatError("field 'session' must be a string", line, "session")

    results_raw = _require(raw, "results", list, line)
    if not results_raw or len(results_raw) > MAX_RESULTS:
        raise LogFormatError(f"'results' must hold 1..{MAX_RESULTS} entries", line, "results")
    results = []
    for entry in results_raw:
        if not isinstance(entry, dict):
            raise LogFormatError("result entries must be objects", line, "results")
        results.append((_require(entry, "doc", str, line), _require(entry, "pos", int, line)))
    positions = sorted(pos for _, pos in results)
    if positions != list(range(1, len(results) + 1)):
        raise LogFormatError(f"result positions must be 1..{len(results)}, got {positions}", line, "pos")
    if len({doc for doc, _ in results}) != len(results):
        raise LogFormatError("duplicate document in results", line, "results")
    results.sort(key=lambda item: item[1])

    record = _Record(
        line=line,
        user=_require(raw, "user", str, line),
        session=session,
        qid=_require(raw, "qid", str, line),
        ts=_require(raw, "ts", int, line),
        query=_require(raw, "query", str, line),
        results=results,
    )
    shown = {doc for doc, _ in results}
    for click in raw.get("clicks", []) or []:
        if not isinstance(click, dict):
            raise LogFormatError("click entries must be objects", line, "clicks")
        doc = _require(click, "doc", str, line)
        ts = _require(click, "ts", int, line)
        dwell = click.get("dwell", 0)
        if isinstance(dwell, bool) or not isinstance(dwell, (int, float)) or dwell < 0:
            raise LogFormatError("click 'dwell' must be a non-negative number", line, "dwell")
        if doc not in shown:
            logger.warning(f"line {line}: click on {doc!r} which is not in results, ignored")
            continue
        previous = record.clicks.get(doc)
        if previous is None:
            record.clicks[doc] = (ts, float(dwell))
        else:
            record.clicks[doc] = (max(previous[0], ts), max(previous[1], float(dwell)))
    return record


def _segment(records: List[_Record], gap: int) -> None:
    """Assign session ids to records that lack one, splitting on inactivity gaps."""
    by_user: Dict[str, List[_Record]] = defaultdict(list)
    for record in records:
        if record.session is None:
            by_user[record.user].append(record)
    for user, items in by_user.items():
        items.sort(key=lambda r: (r.ts, r.qid))
        counter = 0
        last_ts = None
        for record in items:
            if last_ts is not None and record.ts - last_ts > gap:
                counter += 1
            record.session = f"{user}-auto{counter}"
            last_ts = record.ts


def assemble_logs(records: Sequence[_Record], tokenizer: Tokenizer,
                  last_click_scope: LastClickScope = LastClickScope.SESSION) -> List[UserLog]:
    """
    Group parsed records into sorted UserLogs.

    Raises:
        DuplicateRecordError: If a (user, session, qid) triple repeats
    """
    seen: Dict[Tuple[str, str, str], int] = {}
    grouped: Dict[str, Dict[str, List[_Record]]] = defaultdict(lambda: defaultdict(list))
    dropped = 0
    for record in records:
        key = (record.user, record.session, record.qid)
        if key in seen:
            raise DuplicateRecordError(
                f"duplicate (user, session, qid) {key}, first seen on line {seen[key]}", record.line
            )
        seen[key] = record.line
        grouped[record.user][record.session].append(record)

    logs = []
    for user in sorted(grouped):
        sessions = []
        for session_id, items in grouped[user].items():
            items.sort(key=lambda r: (r.ts, r.qid))
            events = []
            for record in items:
                terms = tokenizer(record.query)
                if not terms:
                    dropped += 1
                    logger.warning(f"line {record.line}: query {record.query!r} has no terms after preprocessing, dropped")
                    continue
                impressions = []
                for doc, pos in record.results:
                    click = record.clicks.get(doc)
                    impressions.append(Impression(
                        doc_id=doc,
                        position=pos,
                        clicked=click is not None,
                        dwell_seconds=click[1] if click else 0.0,
                        click_ts=click[0] if click else None,
                    ))
                events.append(QueryEvent(record.qid, record.ts, terms, tuple(impressions), record.query))
            if events:
                sessions.append(Session(session_id, tuple(events)))
        sessions.sort(key=lambda s: (s.start_ts, s.session_id))
        if sessions:
            logs.append(_mark_last_clicks(UserLog(user, tuple(sessions)), last_click_scope))
    if dropped:
        logger.info(f"Dropped {dropped} events with empty queries")
    return logs


def _mark_last_clicks(log: UserLog, scope: LastClickScope) -> UserLog:
    sessions = []
    for session in log.sessions:
        groups: List[List[Tuple[int, int]]] = []
        if scope is LastClickScope.SESSION:
            groups.append([(e, i) for e in range(len(session.events)) for i in range(len(session.events[e].impressions))])
        else:
            groups.extend([[(e, i) for i in range(len(ev.impressions))] for e, ev in enumerate(session.events)])
        last = set()
        for group in groups:
            clicked = [(session.events[e].impressions[i].click_ts, e, i) for e, i in group
                       if session.events[e].impressions[i].clicked]
            if clicked:
                _, e, i = max(clicked)
                last.add((e, i))
        events = []
        for e, event in enumerate(session.events):
            impressions = tuple(
                replace(imp, is_last_click_in_session=(e, i) in last)
                for i, imp in enumerate(event.impressions)
            )
            events.append(replace(event, impressions=impressions))
        sessions.append(replace(session, events=tuple(events)))
    return replace(log, sessions=tuple(sessions))


def ingest_log(path: str, format: str = "jsonl", tokenizer: Optional[Tokenizer] = None,
               segment_sessions: bool = False, session_gap: int = DEFAULT_SESSION_GAP,
               last_click_scope: LastClickScope = LastClickScope.SESSION) -> List[UserLog]:
    """
    Parse a JSON-Lines click log into UserLogs sorted by user id.

    Args:
        path: Log file, one query event per line
        format: Only "jsonl" is supported
        tokenizer: Query tokenizer; defaults to the bundled stopword list
        segment_sessions: Derive sessions from inactivity gaps for records without "session"
        session_gap: Inactivity gap in seconds that starts a new session
        last_click_scope: Scope of the "last click" part of the SAT rule

    Returns:
        UserLogs with sessions and events in time order; ``sat`` is not yet labeled

    Raises:
        LogFormatError: On malformed lines, naming the line and field
        DuplicateRecordError: On repeated (user, session, qid)
    """
    if format != "jsonl":
        raise QueryLogError(f"Unsupported log format: {format}")
    tokenizer = tokenizer or Tokenizer()
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise LogFormatError(f"invalid JSON: {e.msg}", line_no)
            records.append(_parse_record(raw, line_no, segment_sessions))
    if segment_sessions:
        _segment(records, session_gap)
    logs = assemble_logs(records, tokenizer, last_click_scope)
    logger.info(f"Ingested {len(records)} records for {len(logs)} users from {path}")
    return logs


def logs_from_records(raw_records: Iterable[dict], tokenizer: Optional[Tokenizer] = None,
                      last_click_scope: LastClickScope = LastClickScope.SESSION) -> List[UserLog]:
    """Same as ingest_log for records already decoded from JSON."""
    tokenizer = tokenizer or Tokenizer()
    records = [_parse_record(raw, i, False) for i, raw in enumerate(raw_records, start=1)]
    return assemble_logs(records, tokenizer, last_click_scope)


def write_records(raw_records: Iterable[dict], path: str) -> int:
    """Write decoded records as JSON-Lines; returns the record count."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for record in raw_records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    return count


def write_log(logs: Sequence[UserLog], path: str) -> None:
    """Serialize UserLogs back to the JSON-Lines format read by ingest_log."""
    write_records(
        (event_record(log.user_id, session.session_id, event)
         for log in logs for session in log.sessions for event in session.events),
        path,
    )


def event_record(user_id: str, session_id: str, event: QueryEvent) -> dict:
    clicks = []
    for imp in event.impressions:
        if imp.clicked:
            dwell = imp.dwell_seconds
            clicks.append({
                "doc": imp.doc_id,
                "ts": imp.click_ts if imp.click_ts is not None else event.timestamp,
                "dwell": int(dwell) if float(dwell).is_integer() else dwell,
            })
    return {
        "user": user_id,
        "session": session_id,
        "qid": event.query_id,
        "ts": event.timestamp,
        "query": event.raw_query or event.query_key,
        "results": [{"doc": imp.doc_id, "pos": imp.position} for imp in event.impressions],
        "clicks": clicks,
    }


def load_documents(path: str, tokenizer: Optional[Tokenizer] = None) -> Dict[str, Tuple[str, ...]]:
    """
    Read the companion document file (``{"doc": str, "tokens": [str]}`` per line).

    Tokens pass through the same normalization as queries.
    """
    tokenizer = tokenizer or Tokenizer()
    docs: Dict[str, Tuple[str, ...]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise LogFormatError(f"invalid JSON: {e.msg}", line_no)
            if not isinstance(raw, dict):
                raise LogFormatError("record must be a JSON object", line_no)
            doc = _require(raw, "doc", str, line_no)
            tokens = _require(raw, "tokens", list, line_no)
            docs[doc] = tokenizer(" ".join(str(t) for t in tokens))
    return docs


def write_documents(docs: Dict[str, Sequence[str]], path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for doc in sorted(docs):
            f.write(json.dumps({"doc": doc, "tokens": list(docs[doc])}) + "\n")


# ---------------------------------------------------------------------------
# labeling, filtering, splitting
# ---------------------------------------------------------------------------

def is_sat(impression: Impression) -> bool:
    return impression.clicked and (
        impression.dwell_seconds > SAT_DWELL_SECONDS or impression.is_last_click_in_session
    )


def label_sat_clicks(log: UserLog) -> UserLog:
    """Return a copy of ``log`` with ``sat`` set on every impression."""
    sessions = []
    for session in log.sessions:
        events = []
        for event in session.events:
            impressions = tuple(replace(imp, sat=is_sat(imp)) for imp in event.impressions)
            events.append(replace(event, impressions=impressions))
        sessions.append(replace(session, events=tuple(events)))
    return replace(log, sessions=tuple(sessions))


def filter_users(logs: Sequence[UserLog], min_sessions: int = 4) -> List[UserLog]:
    """Keep users with at least ``min_sessions`` sessions."""
    if min_sessions < 1:
        raise ValueError("min_sessions must be >= 1")
    kept = [log for log in logs if len(log.sessions) >= min_sessions]
    logger.info(f"Kept {len(kept)} of {len(logs)} users with >= {min_sessions} sessions")
    return kept


def split_sessions(log: UserLog, profile_fraction: float = 0.5,
                   profile_boundary_ts: Optional[int] = None,
                   train_test_ratio: Tuple[int, int] = (5, 1),
                   validation_fraction: float = 0.2) -> DatasetSplit:
    """
    Split one user's sessions in time order.

    Sessions before the profile boundary only build profiles. The rest is
    divided train-pool:test by ``train_test_ratio`` (at least one test
    session), and the last ceil(validation_fraction * pool) sessions of the
    pool become validation, as long as one training session remains. Users with fewer than 2 non-profile sessions keep
    everything as profile.

    Args:
        log: A user that passed filter_users
        profile_fraction: Share of sessions used for profiles when no boundary is given
        profile_boundary_ts: Sessions starting before this timestamp are profile sessions
        train_test_ratio: Train-pool to test proportion
        validation_fraction: Share of the train pool held out for validation
    """
    if not 0.0 <= profile_fraction < 1.0:
        raise ValueError("profile_fraction must be in [0, 1)")
    n_sessions = len(log.sessions)
    if profile_boundary_ts is not None:
        n_profile = sum(1 for s in log.sessions if s.start_ts < profile_boundary_ts)
    else:
        n_profile = int(math.floor(n_sessions * profile_fraction))
    rest = list(range(n_profile, n_sessions))
    if len(rest) < 2:
        return DatasetSplit(log.user_id, profile_sessions=tuple(range(n_sessions)))

    train_part, test_part = train_test_ratio
    n_test = max(1, (len(rest) * test_part) // (train_part + test_part))
    pool = rest[:len(rest) - n_test]
    n_validation = min(int(math.ceil(len(pool) * validation_fraction)), len(pool) - 1)
    return DatasetSplit(
        user_id=log.user_id,
        profile_sessions=tuple(range(n_profile)),
        train_sessions=tuple(pool[:len(pool) - n_validation]),
        validation_sessions=tuple(pool[len(pool) - n_validation:]),
        test_sessions=tuple(rest[len(rest) - n_test:]),
    )


def split_dataset(logs: Sequence[UserLog], **kwargs) -> Dict[str, DatasetSplit]:
    """split_sessions for every user, keyed by user id."""
    splits = {log.user_id: split_sessions(log, **kwargs) for log in logs}
    excluded = sum(1 for s in splits.values() if not s.supervised)
    if excluded:
        logger.info(f"{excluded} users have too few sessions for train/test and serve as profiles only")
    return splits


def prepare_logs(path: str, min_sessions: int = 4, **ingest_kwargs) -> List[UserLog]:
    """ingest_log, then label_sat_clicks and filter_users."""
    logs = ingest_log(path, **ingest_kwargs)
    return filter_users([label_sat_clicks(log) for log in logs], min_sessions)

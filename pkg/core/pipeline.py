"""
Shared preparation and evaluation steps behind the command-line subcommands.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from core.baselines import ClickStore, TopicModel, pclick_rerank, ptm_rerank
from core.config import RunConfig
from core.evaluation import QueryContext, QueryResult, evaluate_query
from core.features import EncodedUser, LogEncoder
from core.hrnn import HrnnRanker
from core.query_log import (
    DatasetSplit, QueryEvent, Tokenizer, UserLog, load_documents, load_stopwords, prepare_logs, split_dataset,
)
from core.queue import run_jobs
from core.ranker_training import RankingDataset
from core.text_repr import TextEncoder, make_encoder

logger = logging.getLogger(__name__)

# (user, session index, query index)
QueryRef = Tuple[str, int, int]
Reranker = Callable[[UserLog, int, int, QueryEvent], List[str]]


class PipelineError(Exception):
    pass


@dataclass
class Prepared:
    """Ingested, labeled, split and encoded data shared by all subcommands."""
    logs: List[UserLog]
    splits: Dict[str, DatasetSplit]
    documents: Dict[str, Tuple[str, ...]]
    text: TextEncoder
    store: ClickStore
    users: Dict[str, EncodedUser] = field(default_factory=dict)

    @property
    def log_by_user(self) -> Dict[str, UserLog]:
        return {log.user_id: log for log in self.logs}

    def dataset(self) -> RankingDataset:
        return RankingDataset.from_splits(self.users, self.splits)

    def test_refs(self) -> List[QueryRef]:
        """Test queries in (user, time) order."""
        refs = []
        for log in self.logs:
            split = self.splits.get(log.user_id)
            if split is None or not split.supervised:
                continue
            for s_idx in split.test_sessions:
                for q_idx in range(len(log.sessions[s_idx].events)):
                    refs.append((log.user_id, s_idx, q_idx))
        return refs


def make_tokenizer(config: RunConfig) -> Tokenizer:
    return Tokenizer(load_stopwords(config.stopwords))


def load_data(config: RunConfig) -> Tuple[List[UserLog], Dict[str, DatasetSplit], Dict[str, Tuple[str, ...]]]:
    """
    Ingest, label, filter and split the log; read the document file.

    Raises:
        PipelineError: If --log or --docs is missing
    """
    if not config.log or not config.docs:
        raise PipelineError("Both a click log and a document file are required")
    tokenizer = make_tokenizer(config)
    logs = prepare_logs(
        config.log,
        min_sessions=config.split.min_sessions,
        tokenizer=tokenizer,
        segment_sessions=config.segment_sessions,
        session_gap=config.session_gap,
        last_click_scope=config.last_click_scope,
    )
    if not logs:
        raise PipelineError(f"No user in {config.log} has at least {config.split.min_sessions} sessions")
    splits = split_dataset(logs, **config.split.split_kwargs())
    documents = load_documents(config.docs, tokenizer)
    return logs, splits, documents


def prepare(config: RunConfig, encode: bool = True) -> Prepared:
    """load_data, then the text encoder, click store and encoded users."""
    logs, splits, documents = load_data(config)
    text = make_encoder(documents, config.model.d_e, config.embeddings, config.min_count, config.weighting)
    store = ClickStore.from_logs(logs, splits)
    prepared = Prepared(logs, splits, documents, text, store)
    if encode:
        prepared.users = LogEncoder(text, store).encode_all(logs)
    logger.info(f"Prepared {len(logs)} users, {len(documents)} documents, vocabulary of {len(text.vocab)}")
    return prepared


def query_context(log: UserLog, session_index: int, query_index: int, store: ClickStore) -> QueryContext:
    """Slice attributes: click entropy, repeated-query flag and 1-based session position."""
    event = log.sessions[session_index].events[query_index]
    repeated = False
    for s_idx, q_idx, earlier in log.events():
        if (s_idx, q_idx) >= (session_index, query_index):
            break
        if earlier.query_key == event.query_key:
            repeated = True
            break
    return QueryContext(
        user_id=log.user_id,
        session_id=log.sessions[session_index].session_id,
        query_id=event.query_id,
        entropy=store.click_entropy(event.query_key),
        repeated=repeated,
        session_position=query_index + 1,
    )


def original_reranker() -> Reranker:
    def rerank(log: UserLog, s_idx: int, q_idx: int, event: QueryEvent) -> List[str]:
        return list(event.doc_ids)
    return rerank


def pclick_reranker(store: ClickStore) -> Reranker:
    def rerank(log: UserLog, s_idx: int, q_idx: int, event: QueryEvent) -> List[str]:
        return pclick_rerank(store, log.user_id, event)
    return rerank


def ptm_reranker(model: TopicModel) -> Reranker:
    def rerank(log: UserLog, s_idx: int, q_idx: int, event: QueryEvent) -> List[str]:
        return ptm_rerank(model, log.user_id, event)
    return rerank


def hrnn_reranker(ranker: HrnnRanker, users: Dict[str, EncodedUser]) -> Reranker:
    def rerank(log: UserLog, s_idx: int, q_idx: int, event: QueryEvent) -> List[str]:
        return ranker.rerank_event(users[log.user_id], s_idx, q_idx)
    return rerank


def evaluate_reranker(prepared: Prepared, reranker: Reranker, refs: Optional[Sequence[QueryRef]] = None,
                      threads: int = 1) -> List[QueryResult]:
    """
    Re-rank and score every test query with a SAT click.

    Users are scored as separate jobs; results keep (user, time) order for any
    thread count.
    """
    refs = list(refs) if refs is not None else prepared.test_refs()
    by_user: Dict[str, List[QueryRef]] = {}
    for ref in refs:
        by_user.setdefault(ref[0], []).append(ref)
    logs = prepared.log_by_user

    def score_user(user_refs: List[QueryRef]) -> List[QueryResult]:
        results = []
        for user_id, s_idx, q_idx in user_refs:
            log = logs[user_id]
            event = log.sessions[s_idx].events[q_idx]
            if not event.sat_docs():
                continue
            ranking = reranker(log, s_idx, q_idx, event)
            result = evaluate_query(event, ranking, query_context(log, s_idx, q_idx, prepared.store))
            if result is not None:
                results.append(result)
        return results

    tasks = [(user_id, (lambda r=user_refs: score_user(r))) for user_id, user_refs in by_user.items()]
    per_user = run_jobs(tasks, threads)
    return [result for chunk in per_user for result in chunk]

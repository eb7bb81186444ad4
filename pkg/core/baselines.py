"""
Baseline re-rankers: P-Click with Borda fusion and the personalized topic model (PTM).
"""

import json
import logging
import math
from bisect import bisect_left
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from core.query_log import DatasetSplit, QueryEvent, UserLog

logger = logging.getLogger(__name__)

PCLICK_BETA = 0.5


class BaselineError(Exception):
    """Base exception for baseline models."""
    pass


class FusionError(BaselineError):
    pass


class TopicModelError(BaselineError):
    pass


# ---------------------------------------------------------------------------
# click statistics
# ---------------------------------------------------------------------------

@dataclass
class ClickStore:
    """
    Timestamped click counts for P-Click and the click features.

    Every count is taken strictly before a given timestamp, so scoring a query
    never sees its own clicks or later ones. Click entropy comes from SAT clicks
    of training-period sessions only.
    """
    user_query_doc: Dict[Tuple[str, str, str], List[int]] = field(default_factory=lambda: defaultdict(list))
    user_query: Dict[Tuple[str, str], List[int]] = field(default_factory=lambda: defaultdict(list))
    user_doc: Dict[Tuple[str, str], List[int]] = field(default_factory=lambda: defaultdict(list))
    query_sat_docs: Dict[str, Counter] = field(default_factory=lambda: defaultdict(Counter))

    def add_click(self, user: str, query_key: str, doc: str, ts: int):
        self.user_query_doc[(user, query_key, doc)].append(ts)
        self.user_query[(user, query_key)].append(ts)
        self.user_doc[(user, doc)].append(ts)

    def add_sat_for_entropy(self, query_key: str, doc: str):
        self.query_sat_docs[query_key][doc] += 1

    def finalize(self) -> "ClickStore":
        for table in (self.user_query_doc, self.user_query, self.user_doc):
            for key in table:
                table[key].sort()
        return self

    @staticmethod
    def _count(table, key, before: Optional[int]) -> int:
        stamps = table.get(key)
        if not stamps:
            return 0
        if before is None:
            return len(stamps)
        return bisect_left(stamps, before)

    def clicks(self, user: str, query_key: str, doc: str, before: Optional[int] = None) -> int:
        """|clicks(q, d, u)| with click time < ``before``."""
        return self._count(self.user_query_doc, (user, query_key, doc), before)

    def query_clicks(self, user: str, query_key: str, before: Optional[int] = None) -> int:
        """|clicks(q, ., u)| with click time < ``before``."""
        return self._count(self.user_query, (user, query_key), before)

    def doc_clicks(self, user: str, doc: str, before: Optional[int] = None) -> int:
        """All of the user's clicks on ``doc`` regardless of query."""
        return self._count(self.user_doc, (user, doc), before)

    def click_entropy(self, query_key: str) -> float:
        """Entropy in bits of the SAT-click distribution over documents; 0 for unseen queries."""
        counts = self.query_sat_docs.get(query_key)
        if not counts:
            return 0.0
        p = np.array(list(counts.values()), dtype=np.float64)
        p /= p.sum()
        return float(max(0.0, -(p * np.log2(p)).sum()))

    @classmethod
    def from_logs(cls, logs: Sequence[UserLog],
                  splits: Optional[Mapping[str, DatasetSplit]] = None) -> "ClickStore":
        """
        Index every click of every user.

        Args:
            logs: SAT-labeled user logs
            splits: When given, entropy uses SAT clicks of training-period sessions only
        """
        store = cls()
        for log in logs:
            split = splits.get(log.user_id) if splits else None
            training = split.training_period() if split is not None and split.supervised else None
            for s_idx, _, event in log.events():
                for imp in event.impressions:
                    if not imp.clicked:
                        continue
                    ts = imp.click_ts if imp.click_ts is not None else event.timestamp
                    store.add_click(log.user_id, event.query_key, imp.doc_id, ts)
                    if imp.sat and (training is None or s_idx in training):
                        store.add_sat_for_entropy(event.query_key, imp.doc_id)
        return store.finalize()

    def to_tsv(self, path: str) -> None:
        """Write ``user\\tquery\\tdoc\\tclicks`` rows sorted for diffing."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write("user\tquery\tdoc\tclicks\n")
            for (user, query, doc) in sorted(self.user_query_doc):
                f.write(f"{user}\t{query}\t{doc}\t{len(self.user_query_doc[(user, query, doc)])}\n")


def pclick_score(store: ClickStore, user: str, query_key: str, doc: str,
                 beta: float = PCLICK_BETA, before: Optional[int] = None) -> float:
    """|clicks(q,d,u)| / (|clicks(q,.,u)| + beta)"""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    return store.clicks(user, query_key, doc, before) / (store.query_clicks(user, query_key, before) + beta)


def borda_fuse(ranking_a: Sequence[str], ranking_b: Sequence[str],
               original: Optional[Sequence[str]] = None) -> List[str]:
    """
    Borda count over two rankings of the same documents.

    points(d) = (K - rank_a(d)) + (K - rank_b(d)); ties go to the document
    ranked higher in ``original`` (defaults to ``ranking_a``).

    Raises:
        FusionError: If the rankings hold different documents
    """
    original = list(original) if original is not None else list(ranking_a)
    if set(ranking_a) != set(ranking_b) or set(ranking_a) != set(original) or len(ranking_a) != len(ranking_b):
        raise FusionError("Borda fusion needs the same document set in every ranking")
    k = len(ranking_a)
    rank_a = {d: i + 1 for i, d in enumerate(ranking_a)}
    rank_b = {d: i + 1 for i, d in enumerate(ranking_b)}
    order = {d: i for i, d in enumerate(original)}
    points = {d: (k - rank_a[d]) + (k - rank_b[d]) for d in original}
    return sorted(original, key=lambda d: (-points[d], order[d]))


def rank_by_scores(doc_ids: Sequence[str], scores: Sequence[float]) -> List[str]:
    """Sort by score descending, keeping the given order for ties."""
    order = sorted(range(len(doc_ids)), key=lambda i: (-scores[i], i))
    return [doc_ids[i] for i in order]


def pclick_rerank(store: ClickStore, user: str, event: QueryEvent, beta: float = PCLICK_BETA) -> List[str]:
    """P-Click ranking of ``event``'s results fused with the original ranking."""
    docs = list(event.doc_ids)
    scores = [pclick_score(store, user, event.query_key, d, beta, before=event.timestamp) for d in docs]
    return borda_fuse(rank_by_scores(docs, scores), docs, docs)


# ---------------------------------------------------------------------------
# personalized topic model
# ---------------------------------------------------------------------------

@dataclass
class TopicModel:
    """
    LDA topics over clicked documents plus the user and click-prior terms of PTM.

    ``user_topic[u][z]`` is P(u|z): normalized over users for each topic.
    """
    words: List[str]
    topic_word: np.ndarray
    doc_topic: Dict[str, np.ndarray]
    user_topic: Dict[str, np.ndarray]
    doc_clicks: Dict[str, int]
    n_docs: int
    alpha: float
    beta: float
    lam: float = 1.0
    sigma: float = 1.0
    assignments: Optional[List[List[int]]] = None
    _word_index: Dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._word_index = {w: i for i, w in enumerate(self.words)}

    @property
    def n_topics(self) -> int:
        return self.topic_word.shape[0]

    @property
    def total_clicks(self) -> int:
        return sum(self.doc_clicks.values())

    def word_index(self, word: str) -> Optional[int]:
        return self._word_index.get(word)

    def doc_prior(self, doc: str) -> float:
        """P(d) with Dirichlet smoothing: (clicks(d) + sigma/|D|) / (total + sigma)."""
        n_docs = max(self.n_docs, 1)
        return (self.doc_clicks.get(doc, 0) + self.sigma / n_docs) / (self.total_clicks + self.sigma)

    def to_json(self, path: str) -> None:
        """Header fields plus dense arrays as nested lists."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "header": {
                "n_topics": self.n_topics, "alpha": self.alpha, "beta": self.beta,
                "lambda": self.lam, "sigma": self.sigma, "n_docs": self.n_docs,
            },
            "words": self.words,
            "topic_word": self.topic_word.tolist(),
            "doc_topic": {d: v.tolist() for d, v in sorted(self.doc_topic.items())},
            "user_topic": {u: v.tolist() for u, v in sorted(self.user_topic.items())},
            "doc_clicks": dict(sorted(self.doc_clicks.items())),
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, sort_keys=True)

    @classmethod
    def from_json(cls, path: str) -> "TopicModel":
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        try:
            header = payload["header"]
            return cls(
                words=list(payload["words"]),
                topic_word=np.asarray(payload["topic_word"], dtype=np.float64),
                doc_topic={d: np.asarray(v) for d, v in payload["doc_topic"].items()},
                user_topic={u: np.asarray(v) for u, v in payload["user_topic"].items()},
                doc_clicks={d: int(c) for d, c in payload["doc_clicks"].items()},
                n_docs=int(header["n_docs"]),
                alpha=float(header["alpha"]),
                beta=float(header["beta"]),
                lam=float(header["lambda"]),
                sigma=float(header["sigma"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise TopicModelError(f"{path}: malformed topic model dump ({e})")


def fit_topics(corpus: Mapping[str, Sequence[str]], n_topics: int, iterations: int = 500,
               seed: int = 0, alpha: Optional[float] = None, beta: float = 0.01,
               user_clicks: Optional[Mapping[str, Sequence[str]]] = None,
               epsilon: float = 0.01, lam: float = 1.0, sigma: float = 1.0,
               n_docs: Optional[int] = None) -> TopicModel:
    """
    Collapsed Gibbs sampling LDA over the clicked-document corpus.

    Args:
        corpus: doc id -> tokens for every clicked document
        n_topics: Number of topics K
        iterations: Full sweeps over all tokens
        seed: Sampler seed
        alpha: Document-topic prior, default 50/K
        beta: Topic-word prior
        user_clicks: user -> SAT-clicked doc ids (with repeats); feeds P(u|z)
        epsilon: Additive smoothing of the user-topic counts
        lam: Exponent on P(u|z) at scoring time
        sigma: Dirichlet smoothing mass of the document click prior
        n_docs: Size of the candidate document collection |D|

    Raises:
        TopicModelError: On an empty corpus or more topics than vocabulary words
    """
    if n_topics < 1:
        raise TopicModelError("n_topics must be >= 1")
    doc_ids = sorted(corpus)
    if not doc_ids:
        raise TopicModelError("Cannot fit topics on an empty corpus")
    words = sorted({w for d in doc_ids for w in corpus[d]})
    if n_topics > len(words):
        raise TopicModelError(f"n_topics={n_topics} exceeds vocabulary size {len(words)}")
    alpha = 50.0 / n_topics if alpha is None else alpha
    w_index = {w: i for i, w in enumerate(words)}
    n_words = len(words)
    rng = np.random.default_rng(seed)

    docs = [np.array([w_index[w] for w in corpus[d]], dtype=np.int64) for d in doc_ids]
    n_dk = np.zeros((len(docs), n_topics))
    n_kw = np.zeros((n_topics, n_words))
    n_k = np.zeros(n_topics)
    z = []
    for d, tokens in enumerate(docs):
        topics = rng.integers(0, n_topics, size=len(tokens))
        z.append(topics)
        for w, k in zip(tokens, topics):
            n_dk[d, k] += 1
            n_kw[k, w] += 1
            n_k[k] += 1

    for sweep in range(iterations):
        for d, tokens in enumerate(docs):
            topics = z[d]
            for n, w in enumerate(tokens):
                k = topics[n]
                n_dk[d, k] -= 1
                n_kw[k, w] -= 1
                n_k[k] -= 1
                weights = (n_kw[:, w] + beta) / (n_k + n_words * beta) * (n_dk[d] + alpha)
                cumulative = np.cumsum(weights)
                k = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
                k = min(k, n_topics - 1)
                topics[n] = k
                n_dk[d, k] += 1
                n_kw[k, w] += 1
                n_k[k] += 1
        if (sweep + 1) % 100 == 0:
            logger.debug(f"Gibbs sweep {sweep + 1}/{iterations}")

    topic_word = (n_kw + beta) / (n_k[:, None] + n_words * beta)
    lengths = n_dk.sum(axis=1, keepdims=True)
    doc_topic_matrix = (n_dk + alpha) / (lengths + n_topics * alpha)
    doc_topic = {doc_ids[i]: doc_topic_matrix[i] for i in range(len(doc_ids))}

    user_topic: Dict[str, np.ndarray] = {}
    doc_clicks: Counter = Counter()
    if user_clicks:
        row = {d: i for i, d in enumerate(doc_ids)}
        users = sorted(user_clicks)
        counts = np.zeros((len(users), n_topics))
        for u_idx, user in enumerate(users):
            for doc in user_clicks[user]:
                doc_clicks[doc] += 1
                if doc in row:
                    counts[u_idx] += n_dk[row[doc]]
        counts += epsilon
        counts /= counts.sum(axis=0, keepdims=True)
        user_topic = {user: counts[i] for i, user in enumerate(users)}

    logger.info(f"Fitted {n_topics} topics on {len(doc_ids)} documents, {n_words} words")
    return TopicModel(
        words=words,
        topic_word=topic_word,
        doc_topic=doc_topic,
        user_topic=user_topic,
        doc_clicks=dict(doc_clicks),
        n_docs=n_docs if n_docs is not None else len(doc_ids),
        alpha=alpha,
        beta=beta,
        lam=lam,
        sigma=sigma,
        assignments=[t.tolist() for t in z],
    )


def ptm_score(tm: TopicModel, user: str, terms: Sequence[str], doc: str) -> float:
    """
    log P(d) + sum over query words of log sum_z P(w|z) P(u|z)^lam P(z|d).

    Words outside the topic vocabulary are skipped. Unknown users contribute a
    constant user term and unclicked documents a uniform P(z|d).
    """
    score = math.log(tm.doc_prior(doc))
    p_zd = tm.doc_topic.get(doc)
    if p_zd is None:
        p_zd = np.full(tm.n_topics, 1.0 / tm.n_topics)
    p_uz = tm.user_topic.get(user)
    log_user = tm.lam * np.log(p_uz) if p_uz is not None else np.zeros(tm.n_topics)
    log_doc = np.log(p_zd)
    for word in terms:
        w = tm.word_index(word)
        if w is None:
            continue
        score += float(logsumexp(np.log(tm.topic_word[:, w]) + log_user + log_doc))
    return score


def ptm_rerank(tm: TopicModel, user: str, event: QueryEvent) -> List[str]:
    """PTM ranking of ``event``'s results fused with the original ranking."""
    docs = list(event.doc_ids)
    scores = [ptm_score(tm, user, event.terms, d) for d in docs]
    return borda_fuse(rank_by_scores(docs, scores), docs, docs)


def training_clicks(logs: Sequence[UserLog], splits: Mapping[str, DatasetSplit]) -> Dict[str, List[str]]:
    """SAT-clicked doc ids per user from training-period sessions."""
    result: Dict[str, List[str]] = {}
    for log in logs:
        split = splits.get(log.user_id)
        training = split.training_period() if split is not None and split.supervised else None
        docs = []
        for s_idx, _, event in log.events():
            if training is not None and s_idx not in training:
                continue
            docs.extend(imp.doc_id for imp in event.impressions if imp.sat)
        result[log.user_id] = docs
    return result


def fit_ptm(logs: Sequence[UserLog], splits: Mapping[str, DatasetSplit],
            documents: Mapping[str, Sequence[str]], n_topics: int = 10, iterations: int = 500,
            seed: int = 0, alpha: Optional[float] = None, beta: float = 0.01,
            lam: float = 1.0, sigma: float = 1.0, epsilon: float = 0.01) -> TopicModel:
    """fit_topics over the training-period clicked corpus of ``logs``."""
    user_clicks = training_clicks(logs, splits)
    clicked = {d for docs in user_clicks.values() for d in docs}
    corpus = {d: documents[d] for d in clicked if d in documents and documents[d]}
    candidates: set = set()
    for log in logs:
        for _, _, event in log.events():
            candidates.update(event.doc_ids)
    return fit_topics(corpus, n_topics, iterations, seed, alpha, beta, user_clicks,
                      epsilon, lam, sigma, n_docs=len(candidates))

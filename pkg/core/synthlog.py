"""
Synthetic personalized click logs with known ground truth.

Users hold a drifting preference over latent topics. Sessions draw a topic from
that preference, queries draw words from the topic (or an ambiguous word shared
by two topics), a noisy term-overlap ranker orders 20 candidates, and clicks
follow an examine-then-click model with position bias.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.query_log import Tokenizer, UserLog, logs_from_records, write_documents, write_records

logger = logging.getLogger(__name__)

START_TS = 1_600_000_000
DAY = 86_400


class SynthConfigError(ValueError):
    pass


@dataclass
class GenConfig:
    """Generator settings; every probability must lie in [0, 1]."""
    n_users: int = 200
    sessions_per_user: Tuple[int, int] = (16, 24)
    queries_per_session: Tuple[int, int] = (1, 5)
    repeat_query_prob: float = 0.2
    ambiguous_fraction: float = 0.3
    n_topics: int = 10
    words_per_topic: int = 30
    n_ambiguous_words: int = 20
    n_neutral_words: int = 40
    docs_per_topic: int = 60
    doc_length: Tuple[int, int] = (15, 30)
    primary_topic_share: float = 0.9
    n_candidates: int = 20
    n_on_topic: int = 8
    n_alternate: int = 8
    base_noise: float = 1.0
    examination_exponent: float = 0.7
    position_bias: bool = True
    binary_relevance: bool = False
    topics_per_user: int = 2
    drift_rate: float = 0.02
    session_topics: str = "preference"
    sat_threshold: float = 0.5
    dwell_sat_seconds: float = 60.0
    dwell_unsat_seconds: float = 10.0
    dwell_sigma: float = 0.4
    dwell_flip_prob: float = 0.05

    def __post_init__(self):
        self.sessions_per_user = tuple(self.sessions_per_user)
        self.queries_per_session = tuple(self.queries_per_session)
        self.doc_length = tuple(self.doc_length)
        self.validate()

    def validate(self):
        """
        Raises:
            SynthConfigError: On out-of-range values
        """
        for name in ("repeat_query_prob", "ambiguous_fraction", "primary_topic_share",
                     "drift_rate", "sat_threshold", "dwell_flip_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise SynthConfigError(f"{name} must be a probability in [0, 1], got {value}")
        for name in ("sessions_per_user", "queries_per_session", "doc_length"):
            low, high = getattr(self, name)
            if low < 1 or high < low:
                raise SynthConfigError(f"{name} must be a range 1 <= low <= high, got {(low, high)}")
        if self.n_users < 1 or self.n_topics < 2:
            raise SynthConfigError("need at least 1 user and 2 topics")
        if not 1 <= self.topics_per_user <= self.n_topics:
            raise SynthConfigError("topics_per_user must be between 1 and n_topics")
        if self.n_on_topic + self.n_alternate > self.n_candidates or self.n_candidates > 20:
            raise SynthConfigError("candidate mix does not fit the result list (at most 20)")
        if self.docs_per_topic < max(self.n_on_topic, self.n_alternate):
            raise SynthConfigError("docs_per_topic is smaller than the on-topic candidate count")
        if self.session_topics not in ("preference", "blocks"):
            raise SynthConfigError("session_topics must be 'preference' or 'blocks'")


@dataclass
class World:
    """Topics, vocabulary, documents and the examination curve shared by all users."""
    seed: int
    n_topics: int
    topic_words: List[List[str]]
    topic_word_probs: List[np.ndarray]
    ambiguous: Dict[str, Tuple[int, int]]
    neutral_words: List[str]
    documents: Dict[str, Tuple[str, ...]]
    doc_topic: Dict[str, np.ndarray]
    doc_primary: Dict[str, int]
    docs_by_topic: List[List[str]]
    examination: np.ndarray

    def topic_of_words(self, words: Sequence[str]) -> Optional[int]:
        for k, vocab in enumerate(self.topic_words):
            if words and words[0] in vocab:
                return k
        return None


def _stable_seed(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def examination_curve(n_positions: int, exponent: float = 0.7, position_bias: bool = True) -> np.ndarray:
    """P(examine | position) = 1 / position^exponent, or all ones without bias."""
    if not position_bias:
        return np.ones(n_positions)
    return 1.0 / np.arange(1, n_positions + 1) ** exponent


def build_world(config: GenConfig, seed: int) -> World:
    rng = np.random.default_rng([seed, 0])
    k = config.n_topics
    topic_words = [[f"t{t}w{j}" for j in range(config.words_per_topic)] for t in range(k)]
    ambiguous: Dict[str, Tuple[int, int]] = {}
    for j in range(config.n_ambiguous_words):
        t1, t2 = sorted(rng.choice(k, size=2, replace=False).tolist())
        word = f"a{j}"
        ambiguous[word] = (t1, t2)
        topic_words[t1].append(word)
        topic_words[t2].append(word)
    probs = [rng.dirichlet(np.ones(len(words))) for words in topic_words]
    neutral = [f"n{j}" for j in range(config.n_neutral_words)]

    documents: Dict[str, Tuple[str, ...]] = {}
    doc_topic: Dict[str, np.ndarray] = {}
    doc_primary: Dict[str, int] = {}
    docs_by_topic: List[List[str]] = [[] for _ in range(k)]
    for t in range(k):
        for j in range(config.docs_per_topic):
            doc_id = f"d{t}_{j}"
            mixture = np.full(k, (1.0 - config.primary_topic_share) / (k - 1))
            mixture[t] = config.primary_topic_share
            length = int(rng.integers(config.doc_length[0], config.doc_length[1] + 1))
            topics = rng.choice(k, size=length, p=mixture)
            tokens = []
            for z in topics:
                if rng.random() < 0.1:
                    tokens.append(neutral[int(rng.integers(len(neutral)))])
                else:
                    tokens.append(topic_words[z][int(rng.choice(len(topic_words[z]), p=probs[z]))])
            documents[doc_id] = tuple(tokens)
            doc_topic[doc_id] = mixture
            doc_primary[doc_id] = t
            docs_by_topic[t].append(doc_id)
    return World(
        seed=seed,
        n_topics=k,
        topic_words=topic_words,
        topic_word_probs=probs,
        ambiguous=ambiguous,
        neutral_words=neutral,
        documents=documents,
        doc_topic=doc_topic,
        doc_primary=doc_primary,
        docs_by_topic=docs_by_topic,
        examination=examination_curve(config.n_candidates, config.examination_exponent, config.position_bias),
    )


@dataclass
class GroundTruth:
    """Intended topic and true relevance of every generated query."""
    query_topic: Dict[str, int] = field(default_factory=dict)
    relevance: Dict[str, Dict[str, float]] = field(default_factory=dict)
    query_user: Dict[str, str] = field(default_factory=dict)
    ambiguous_queries: set = field(default_factory=set)
    session_topics: Dict[str, List[int]] = field(default_factory=dict)

    def merge(self, other: "GroundTruth"):
        self.query_topic.update(other.query_topic)
        self.relevance.update(other.relevance)
        self.query_user.update(other.query_user)
        self.ambiguous_queries.update(other.ambiguous_queries)
        self.session_topics.update(other.session_topics)

    def to_jsonl(self, path: str) -> None:
        """One row per query, then one ``session_topics`` row per user."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for qid in sorted(self.query_topic):
                f.write(json.dumps({
                    "qid": qid,
                    "user": self.query_user.get(qid),
                    "topic": self.query_topic[qid],
                    "ambiguous": qid in self.ambiguous_queries,
                    "relevance": {d: round(float(r), 6) for d, r in sorted(self.relevance[qid].items())},
                }, sort_keys=True) + "\n")
            for user in sorted(self.session_topics):
                f.write(json.dumps({"user": user, "session_topics": [int(t) for t in self.session_topics[user]]},
                                   sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: str) -> "GroundTruth":
        truth = cls()
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                row = json.loads(line)
                if "session_topics" in row:
                    truth.session_topics[row["user"]] = [int(t) for t in row["session_topics"]]
                    continue
                truth.query_topic[row["qid"]] = int(row["topic"])
                truth.relevance[row["qid"]] = {d: float(r) for d, r in row["relevance"].items()}
                if row.get("user") is not None:
                    truth.query_user[row["qid"]] = row["user"]
                if row.get("ambiguous"):
                    truth.ambiguous_queries.add(row["qid"])
        return truth


def candidate_list(world: World, config: GenConfig, query_key: str, topics: Tuple[int, int]) -> List[str]:
    """
    The base ranker's result list for a query text; identical for every user.

    Mixes on-topic, alternate-topic and random documents, ordered by term
    overlap plus Gaussian noise.
    """
    rng = np.random.default_rng([world.seed, _stable_seed(query_key)])
    home, alternate = topics
    chosen = list(rng.choice(world.docs_by_topic[home], size=config.n_on_topic, replace=False))
    chosen += list(rng.choice(world.docs_by_topic[alternate], size=config.n_alternate, replace=False))
    taken = set(chosen)
    pool = [d for d in sorted(world.documents) if d not in taken]
    n_random = config.n_candidates - len(chosen)
    if n_random > 0:
        chosen += list(rng.choice(pool, size=n_random, replace=False))
    terms = query_key.split()
    overlap = np.array([sum(world.documents[d].count(t) for t in terms) for d in chosen], dtype=np.float64)
    noisy = overlap + rng.normal(0.0, config.base_noise, size=len(chosen))
    order = np.argsort(-noisy, kind="stable")
    return [str(chosen[i]) for i in order]


def relevance(world: World, config: GenConfig, doc: str, topic: int, preference: np.ndarray) -> float:
    if config.binary_relevance:
        return 1.0 if world.doc_primary[doc] == topic else 0.0
    mixture = world.doc_topic[doc]
    return float(np.clip(0.8 * mixture[topic] + 0.2 * float(mixture @ preference), 0.0, 1.0))


def _initial_preference(rng: np.random.Generator, config: GenConfig) -> np.ndarray:
    pref = np.zeros(config.n_topics)
    topics = rng.choice(config.n_topics, size=config.topics_per_user, replace=False)
    pref[topics] = rng.dirichlet(np.ones(config.topics_per_user))
    return pref


def _fresh_query(rng: np.random.Generator, world: World, config: GenConfig,
                 topic: int) -> Tuple[str, Tuple[int, int], bool]:
    """(query text, (home, alternate) topics, ambiguous?)"""
    if rng.random() < config.ambiguous_fraction:
        candidates = sorted(w for w, pair in world.ambiguous.items() if topic in pair)
        if candidates:
            word = candidates[int(rng.integers(len(candidates)))]
            neutral = world.neutral_words[int(rng.integers(len(world.neutral_words)))]
            return f"{word} {neutral}", world.ambiguous[word], True
    own = [w for w in world.topic_words[topic] if w not in world.ambiguous]
    probs = np.array([world.topic_word_probs[topic][world.topic_words[topic].index(w)] for w in own])
    probs /= probs.sum()
    words = rng.choice(own, size=2, replace=False, p=probs)
    others = [t for t in range(world.n_topics) if t != topic]
    qrng = np.random.default_rng([world.seed, _stable_seed(" ".join(words))])
    alternate = int(qrng.choice(others))
    return " ".join(str(w) for w in words), (topic, alternate), False


def generate_user(world: World, config: GenConfig, user_index: int,
                  seed_seq: np.random.SeedSequence) -> Tuple[List[dict], GroundTruth]:
    """Raw log records and ground truth for one user."""
    rng = np.random.default_rng(seed_seq)
    user_id = f"u{user_index:04d}"
    truth = GroundTruth()
    preference = _initial_preference(rng, config)
    block_topics = np.flatnonzero(preference)
    if config.session_topics == "blocks" and len(block_topics) < 2:
        block_topics = rng.choice(config.n_topics, size=2, replace=False)
    n_sessions = int(rng.integers(config.sessions_per_user[0], config.sessions_per_user[1] + 1))
    history: Dict[str, Tuple[Tuple[int, int], int, bool]] = {}
    records = []
    session_topics = []
    block = max(1, n_sessions // 4)
    for s in range(n_sessions):
        if s > 0 and config.drift_rate > 0:
            preference = (1.0 - config.drift_rate) * preference + config.drift_rate * rng.dirichlet(np.ones(config.n_topics))
            preference /= preference.sum()
        if config.session_topics == "blocks":
            if s < block:
                topic = int(block_topics[0])
            elif s < 2 * block:
                topic = int(block_topics[1])
            else:
                topic = int(block_topics[int(rng.integers(2))])
        else:
            topic = int(rng.choice(config.n_topics, p=preference))
        session_topics.append(topic)
        session_id = f"{user_id}-s{s:03d}"
        session_start = START_TS + s * DAY + int(rng.integers(0, 3600))
        n_queries = int(rng.integers(config.queries_per_session[0], config.queries_per_session[1] + 1))
        for q in range(n_queries):
            if history and rng.random() < config.repeat_query_prob:
                keys = sorted(history)
                query = keys[int(rng.integers(len(keys)))]
                topics, intent, ambiguous = history[query]
            else:
                for _ in range(20):
                    query, topics, ambiguous = _fresh_query(rng, world, config, topic)
                    if query not in history:
                        break
                intent = topic
                history[query] = (topics, intent, ambiguous)
            qid = f"{session_id}-q{q}"
            ts = session_start + q * 120
            results = candidate_list(world, config, query, topics)
            rel = {d: relevance(world, config, d, intent, preference) for d in results}
            clicks = []
            for pos, doc in enumerate(results, start=1):
                if rng.random() < world.examination[pos - 1] * rel[doc]:
                    satisfied = rel[doc] > config.sat_threshold
                    if rng.random() < config.dwell_flip_prob:
                        satisfied = not satisfied
                    centre = config.dwell_sat_seconds if satisfied else config.dwell_unsat_seconds
                    dwell = int(round(rng.lognormal(np.log(centre), config.dwell_sigma)))
                    clicks.append({"doc": doc, "ts": ts + 5 * pos, "dwell": dwell})
            records.append({
                "user": user_id,
                "session": session_id,
                "qid": qid,
                "ts": ts,
                "query": query,
                "results": [{"doc": d, "pos": i} for i, d in enumerate(results, start=1)],
                "clicks": clicks,
            })
            truth.query_topic[qid] = intent
            truth.relevance[qid] = rel
            truth.query_user[qid] = user_id
            if ambiguous:
                truth.ambiguous_queries.add(qid)
    truth.session_topics[user_id] = session_topics
    return records, truth


def generate_records(world: World, config: GenConfig, seed: int) -> Tuple[List[dict], GroundTruth]:
    """All users' raw records, each user from its own derived seed."""
    children = np.random.SeedSequence(seed).spawn(config.n_users)
    records: List[dict] = []
    truth = GroundTruth()
    for i, child in enumerate(children):
        user_records, user_truth = generate_user(world, config, i, child)
        records.extend(user_records)
        truth.merge(user_truth)
    logger.info(f"Generated {len(records)} query events for {config.n_users} users")
    return records, truth


def generate(world: World, config: GenConfig, seed: int) -> Tuple[List[UserLog], GroundTruth]:
    """Generated users as UserLogs (SAT labels not yet applied) plus ground truth."""
    records, truth = generate_records(world, config, seed)
    return logs_from_records(records, Tokenizer(stopwords=())), truth


def write_synthetic(out_dir: str, config: GenConfig, seed: int, prefix: str = "synth") -> Dict[str, Path]:
    """
    Write the log, document file and ground-truth sidecar under ``out_dir``.

    Returns:
        Mapping of artifact kind to path
    """
    out = Path(out_dir)
    world = build_world(config, seed)
    records, truth = generate_records(world, config, seed)
    paths = {
        "log": out / f"{prefix}_log.jsonl",
        "docs": out / f"{prefix}_docs.jsonl",
        "truth": out / f"{prefix}_truth.jsonl",
    }
    write_records(records, str(paths["log"]))
    write_documents(world.documents, str(paths["docs"]))
    truth.to_jsonl(str(paths["truth"]))
    return paths

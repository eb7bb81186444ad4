"""
Text representation for queries and documents.
Vocabulary with document frequencies, fixed word embeddings, and
TF-IDF weighted embedding averages.
"""

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FALLBACK_SCALE = 0.1


class TextReprError(Exception):
    """Base exception for vocabulary and embedding errors."""
    pass


class EmptyCorpusError(TextReprError):
    pass


class EmbeddingError(TextReprError):
    """Raised when an embedding file is malformed or has the wrong width."""
    pass


class Weighting(Enum):
    """Per-token weight used by ``represent``."""
    TFIDF = "tfidf"
    IDF = "idf"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class Vocabulary:
    """
    Dense word index with document frequencies.

    ``index`` maps every word to 0..|V|-1 in sorted word order.
    """
    index: Mapping[str, int]
    df: Mapping[str, int]
    n_docs: int

    def __len__(self):
        return len(self.index)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def words(self) -> list:
        return sorted(self.index, key=self.index.__getitem__)

    def idf(self, word: str) -> float:
        """ln((N_docs + 1) / (df + 1)) + 1"""
        return math.log((self.n_docs + 1) / (self.df.get(word, 0) + 1)) + 1.0

    def content_hash(self) -> str:
        """sha256 over the TSV dump; stored in checkpoints."""
        digest = hashlib.sha256()
        digest.update(f"{self.n_docs}\n".encode("utf-8"))
        for word in self.words():
            digest.update(f"{word}\t{self.index[word]}\t{self.df[word]}\n".encode("utf-8"))
        return digest.hexdigest()

    def to_tsv(self, path: str) -> None:
        """Write ``word\\tindex\\tdf`` lines; the first line holds the document count."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"#n_docs\t{self.n_docs}\n")
            for word in self.words():
                f.write(f"{word}\t{self.index[word]}\t{self.df[word]}\n")

    @classmethod
    def from_tsv(cls, path: str) -> "Vocabulary":
        index: Dict[str, int] = {}
        df: Dict[str, int] = {}
        n_docs = 0
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                parts = line.rstrip("\n").split("\t")
                if parts[0] == "#n_docs":
                    n_docs = int(parts[1])
                    continue
                if len(parts) != 3:
                    raise TextReprError(f"{path}: line {line_no} is not 'word\\tindex\\tdf'")
                index[parts[0]] = int(parts[1])
                df[parts[0]] = int(parts[2])
        if sorted(index.values()) != list(range(len(index))):
            raise TextReprError(f"{path}: vocabulary indices are not dense")
        return cls(index=index, df=df, n_docs=n_docs)


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """
    Build a vocabulary from tokenized documents.

    Args:
        corpus: One token sequence per document
        min_count: Minimum total corpus frequency for a word to be kept

    Raises:
        EmptyCorpusError: If the corpus holds no documents
    """
    counts: Counter = Counter()
    df: Counter = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        counts.update(doc)
        df.update(set(doc))
    if n_docs == 0:
        raise EmptyCorpusError("Cannot build a vocabulary from an empty corpus")
    kept = sorted(w for w, c in counts.items() if c >= min_count)
    logger.debug(f"Vocabulary: {len(kept)} of {len(counts)} words kept at min_count={min_count}")
    return Vocabulary(
        index={w: i for i, w in enumerate(kept)},
        df={w: df[w] for w in kept},
        n_docs=n_docs,
    )


def _stable_seed(word: str) -> int:
    return int.from_bytes(hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest(), "little")


def fallback_vector(word: str, dim: int) -> np.ndarray:
    """Standard-normal vector seeded by a 64-bit hash of the word, scaled by 0.1."""
    rng = np.random.default_rng(_stable_seed(word))
    return rng.standard_normal(dim) * FALLBACK_SCALE


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Fixed |V| x d_e embedding rows; the array is made read-only."""
    matrix: np.ndarray
    n_from_file: int = 0

    def __post_init__(self):
        self.matrix.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return self.matrix.shape[0]


def fallback_embeddings(vocab: Vocabulary, dim: int) -> EmbeddingMatrix:
    """Embeddings for every vocabulary word from fallback_vector alone."""
    matrix = np.zeros((len(vocab), dim))
    for word, i in vocab.index.items():
        matrix[i] = fallback_vector(word, dim)
    return EmbeddingMatrix(matrix)


def load_embeddings(path: str, vocab: Vocabulary, dim: int = 300) -> EmbeddingMatrix:
    """
    Read a word2vec text file (header "count dim", then "word v1 ... vd").

    Vocabulary words missing from the file get ``fallback_vector``.

    Raises:
        EmbeddingError: On a header width different from ``dim`` or a malformed row
    """
    matrix = np.zeros((len(vocab), dim))
    found = np.zeros(len(vocab), dtype=bool)
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise EmbeddingError(f"{path}: expected header 'count dim'")
        file_dim = int(header[1])
        if file_dim != dim:
            raise EmbeddingError(f"{path}: embedding width {file_dim} does not match configured d_e={dim}")
        for line_no, line in enumerate(f, start=2):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            if len(parts) != dim + 1:
                raise EmbeddingError(f"{path}: line {line_no} has {len(parts) - 1} values, expected {dim}")
            i = vocab.index.get(parts[0])
            if i is None:
                continue
            matrix[i] = np.asarray(parts[1:], dtype=np.float64)
            found[i] = True
    for word, i in vocab.index.items():
        if not found[i]:
            matrix[i] = fallback_vector(word, dim)
    logger.info(f"Loaded {int(found.sum())} of {len(vocab)} vocabulary vectors from {path}")
    return EmbeddingMatrix(matrix, n_from_file=int(found.sum()))


def token_weights(tokens: Sequence[str], vocab: Vocabulary,
                  weighting: Weighting = Weighting.TFIDF) -> Dict[str, float]:
    """Unnormalized weight per in-vocabulary token type."""
    tf = Counter(t for t in tokens if t in vocab)
    if weighting is Weighting.TFIDF:
        return {w: c * vocab.idf(w) for w, c in tf.items()}
    if weighting is Weighting.IDF:
        return {w: vocab.idf(w) for w in tf}
    return {w: float(c) for w, c in tf.items()}


def represent(tokens: Sequence[str], vocab: Vocabulary, emb: EmbeddingMatrix,
              weighting: Weighting = Weighting.TFIDF) -> np.ndarray:
    """
    Weighted mean of embedding rows over in-vocabulary tokens.

    Empty or all-OOV text gives the zero vector.
    """
    weights = token_weights(tokens, vocab, weighting)
    total = sum(weights.values())
    if not weights or total <= 0:
        return np.zeros(emb.dim)
    rows = np.array([vocab.index[w] for w in weights])
    w = np.array(list(weights.values())) / total
    return w @ emb.matrix[rows]


def sat_doc_average(vectors: Sequence[np.ndarray], dim: int) -> np.ndarray:
    """Element-wise mean of SAT-clicked document vectors; zero vector when empty."""
    if len(vectors) == 0:
        return np.zeros(dim)
    return np.mean(np.stack(vectors), axis=0)


@dataclass
class TextEncoder:
    """
    Represents queries and documents against one vocabulary and embedding.

    Document vectors are cached by id.
    """
    vocab: Vocabulary
    embeddings: EmbeddingMatrix
    documents: Mapping[str, Sequence[str]]
    weighting: Weighting = Weighting.TFIDF
    _doc_cache: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.embeddings.dim

    def query_vector(self, terms: Sequence[str]) -> np.ndarray:
        return represent(terms, self.vocab, self.embeddings, self.weighting)

    def doc_vector(self, doc_id: str) -> np.ndarray:
        vec = self._doc_cache.get(doc_id)
        if vec is None:
            tokens = self.documents.get(doc_id)
            if tokens is None:
                vec = np.zeros(self.dim)
            else:
                vec = represent(tokens, self.vocab, self.embeddings, self.weighting)
            self._doc_cache[doc_id] = vec
        return vec

    def doc_matrix(self, doc_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.doc_vector(d) for d in doc_ids])

    def sat_vector(self, doc_ids: Iterable[str]) -> np.ndarray:
        return sat_doc_average([self.doc_vector(d) for d in sorted(doc_ids)], self.dim)


def make_encoder(documents: Mapping[str, Sequence[str]], dim: int,
                 embeddings_path: Optional[str] = None, min_count: int = 1,
                 weighting: Weighting = Weighting.TFIDF) -> TextEncoder:
    """Vocabulary from the document corpus, then file or fallback embeddings."""
    vocab = build_vocab((documents[d] for d in sorted(documents)), min_count)
    if embeddings_path:
        emb = load_embeddings(embeddings_path, vocab, dim)
    else:
        emb = fallback_embeddings(vocab, dim)
    return TextEncoder(vocab, emb, documents, weighting)

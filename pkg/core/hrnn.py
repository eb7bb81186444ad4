"""
Hierarchical recurrent ranker.

A session-level GRU turns (query, SAT-document) pairs into short-term interest
states, a user-level GRU runs over the final states of past sessions, and a
query-aware attention pools those long-term states. Documents are scored by
cosine similarity against both projected interest vectors plus a small
perceptron over click features.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.autodiff import (
    GruParams,
    MlpParams,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    concat,
    cosine_rows,
    glorot_uniform,
    gru_step,
    index,
    matmul,
    mlp_forward,
    mul,
    reshape,
    softmax,
    stack,
    sub,
)
from core.features import N_FEATURES, EncodedEvent, EncodedUser

logger = logging.getLogger(__name__)


class ModelVariant(Enum):
    HRNN_QA = "hrnn-qa"
    HRNN = "hrnn"
    SHORT = "short"
    LONG = "long"
    PLAIN = "plain"

    @property
    def uses_short_term(self) -> bool:
        return self is not ModelVariant.LONG

    @property
    def uses_long_term(self) -> bool:
        return self is not ModelVariant.SHORT

    @property
    def uses_attention(self) -> bool:
        return self is ModelVariant.HRNN_QA

    @property
    def hierarchical(self) -> bool:
        return self in (ModelVariant.HRNN_QA, ModelVariant.HRNN, ModelVariant.LONG)


@dataclass
class ModelConfig:
    """Layer widths and switches of the ranker."""
    d_e: int = 300
    d_s1: int = 300
    d_s2: int = 600
    d_a: int = 1024
    d_f: int = 64
    n_features: int = N_FEATURES
    use_bias: bool = True
    variant: ModelVariant = ModelVariant.HRNN_QA
    dtype: str = "float64"

    def __post_init__(self):
        if isinstance(self.variant, str):
            self.variant = ModelVariant(self.variant)
        for name in ("d_e", "d_s1", "d_s2", "d_a", "d_f", "n_features"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype}")

    def to_dict(self) -> dict:
        return {
            "d_e": self.d_e, "d_s1": self.d_s1, "d_s2": self.d_s2, "d_a": self.d_a,
            "d_f": self.d_f, "n_features": self.n_features, "use_bias": self.use_bias,
            "variant": self.variant.value, "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class ModelParams:
    """
    Every trainable matrix of the ranker. Modules a variant does not use are None.

    ``flat`` replaces the two-level hierarchy in the plain variant.
    """
    config: ModelConfig
    gru1: GruParams
    feat: MlpParams
    gru2: Optional[GruParams] = None
    attn: Optional[MlpParams] = None
    flat: Optional[GruParams] = None
    W_S: Optional[Parameter] = None
    W_L: Optional[Parameter] = None

    @classmethod
    def initialize(cls, config: ModelConfig, seed: Optional[int] = 0) -> "ModelParams":
        """Glorot-uniform weights from ``seed``; ``seed=None`` gives all zeros."""
        rng = np.random.default_rng(seed) if seed is not None else None
        variant = config.variant
        bias = config.use_bias

        def matrix(name, rows, cols):
            value = glorot_uniform(rng, rows, cols) if rng is not None else np.zeros((rows, cols))
            return Parameter(value, name)

        gru1 = GruParams.create(2 * config.d_e, config.d_s1, rng, bias, prefix="gru1")
        gru2 = GruParams.create(config.d_s1, config.d_s2, rng, bias, prefix="gru2") if variant.hierarchical else None
        flat = GruParams.create(2 * config.d_e, config.d_s2, rng, bias, prefix="flat") if variant is ModelVariant.PLAIN else None
        attn = MlpParams.create(config.d_e + config.d_s2, config.d_a, 1, rng, bias, prefix="attn") if variant.uses_attention else None
        feat = MlpParams.create(config.n_features, config.d_f, 1, rng, bias, prefix="feat")
        W_S = matrix("W_S", config.d_s1, config.d_e) if variant.uses_short_term else None
        W_L = matrix("W_L", config.d_s2, config.d_e) if variant.uses_long_term else None
        return cls(config, gru1=gru1, feat=feat, gru2=gru2, attn=attn, flat=flat, W_S=W_S, W_L=W_L)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls.initialize(config, seed=None)

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        """Parameters in checkpoint order."""
        ordered: List[Parameter] = []
        ordered.extend(self.gru1.parameters())
        if self.gru2 is not None:
            ordered.extend(self.gru2.parameters())
        if self.flat is not None:
            ordered.extend(self.flat.parameters())
        if self.attn is not None:
            ordered.extend(self.attn.parameters())
        if self.W_S is not None:
            ordered.append(self.W_S)
        if self.W_L is not None:
            ordered.append(self.W_L)
        ordered.extend(self.feat.parameters())
        return [(p.name, p) for p in ordered]

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def copy_values(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_values(self, values: Dict[str, np.ndarray]):
        """
        Raises:
            ShapeError: If a name is missing or a shape differs
        """
        for name, p in self.named_parameters():
            if name not in values:
                raise ShapeError(f"Missing parameter {name}")
            value = np.asarray(values[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"Parameter {name}: expected {p.shape}, got {value.shape}")
            p.value = value.copy()

    def all_finite(self) -> bool:
        return all(np.isfinite(p.value).all() for p in self.parameters())


@dataclass
class InterestState:
    """
    Interest vectors for one query.

    ``attended`` is the long-term vector actually used for scoring: the
    attention pool for hrnn-qa, otherwise the last long-term state.
    """
    short_term: np.ndarray
    long_states: List[np.ndarray]
    attended: np.ndarray
    attention_weights: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def _pair(tape: Tape, query_vec: np.ndarray, doc_vec: np.ndarray) -> Tensor:
    return tape.constant(np.concatenate([query_vec, doc_vec]))


def encode_session(tape: Tape, p: ModelParams, events: Sequence[Tuple[np.ndarray, np.ndarray]]) -> List[Tensor]:
    """
    Run the session-level GRU over (query vector, SAT-document average) pairs.

    Returns every state h1_1..h1_n; the last one is the session's short-term vector.
    """
    if not events:
        raise ShapeError("encode_session needs at least one event")
    h = tape.constant(np.zeros(p.gru1.n_hidden))
    states = []
    for query_vec, doc_vec in events:
        h = gru_step(tape, p.gru1, _pair(tape, query_vec, doc_vec), h)
        states.append(h)
    return states


def encode_sessions(tape: Tape, gru: GruParams,
                    sessions: Sequence[Sequence[Tuple[np.ndarray, np.ndarray]]]) -> Tensor:
    """
    Final states of several sessions at once, as the rows of a matrix.

    Shorter sessions are padded and masked, so each row equals the last state
    of ``encode_session`` on that session alone.
    """
    n = len(sessions)
    if n == 0:
        raise ShapeError("encode_sessions needs at least one session")
    width = gru.n_in
    steps = max(len(s) for s in sessions)
    h = tape.constant(np.zeros((n, gru.n_hidden)))
    for t in range(steps):
        x = np.zeros((n, width))
        mask = np.zeros((n, 1))
        for i, session in enumerate(sessions):
            if t < len(session):
                query_vec, doc_vec = session[t]
                x[i] = np.concatenate([query_vec, doc_vec])
                mask[i] = 1.0
        h_new = gru_step(tape, gru, tape.constant(x), h)
        if mask.all():
            h = h_new
        else:
            m = tape.constant(mask)
            h = mul(m, h_new) + mul(sub(1.0, m), h)
    return h


def encode_history(tape: Tape, p: ModelParams, session_vectors: Sequence[Tensor]) -> List[Tensor]:
    """User-level GRU over past sessions' short-term vectors; empty in, empty out."""
    if p.gru2 is None:
        raise ShapeError("This model variant has no user-level encoder")
    h = tape.constant(np.zeros(p.gru2.n_hidden))
    states = []
    for vector in session_vectors:
        h = gru_step(tape, p.gru2, vector, h)
        states.append(h)
    return states


def encode_flat(tape: Tape, p: ModelParams, events: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tensor:
    """Flat GRU over all past events; the zero vector when there are none."""
    h = tape.constant(np.zeros(p.flat.n_hidden))
    for query_vec, doc_vec in events:
        h = gru_step(tape, p.flat, _pair(tape, query_vec, doc_vec), h)
    return h


def attend(tape: Tape, p: ModelParams, query_vec: np.ndarray,
           long_states: Sequence[Tensor]) -> Tuple[Tensor, Optional[Tensor]]:
    """
    Query-aware pooling of long-term states.

    e_i = attn_mlp([q; h2_i]), alpha = softmax(e), result = sum_i alpha_i h2_i.
    An empty history gives the zero vector and no weights.
    """
    d_s2 = p.config.d_s2
    if not long_states:
        return tape.constant(np.zeros(d_s2)), None
    n = len(long_states)
    states = stack(list(long_states))
    queries = tape.constant(np.tile(query_vec, (n, 1)))
    energies = reshape(mlp_forward(tape, p.attn, concat([queries, states])), (n,))
    weights = softmax(energies)
    return matmul(weights, states), weights


def _event_pairs(events: Sequence[EncodedEvent]) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [(ev.query_vec, ev.sat_vec) for ev in events]


def long_term_history(tape: Tape, p: ModelParams, user: EncodedUser, session_index: int) -> List[Tensor]:
    """
    Long-term states for a query in session ``session_index``.

    Hierarchical variants return h2_1..h2_{M-1}; the plain variant returns the
    single flat-GRU state (or nothing when there is no past).
    """
    past = user.sessions[:session_index]
    if not past:
        return []
    if p.config.variant is ModelVariant.PLAIN:
        return [encode_flat(tape, p, [pair for s in past for pair in _event_pairs(s)])]
    finals = encode_sessions(tape, p.gru1, [_event_pairs(s) for s in past])
    return encode_history(tape, p, [index(finals, i) for i in range(len(past))])


def short_term_state(tape: Tape, p: ModelParams, user: EncodedUser, session_index: int, query_index: int) -> Tensor:
    """h1 after the session's earlier queries plus the current query with a zero document vector."""
    session = user.sessions[session_index]
    current = session[query_index]
    events = _event_pairs(session[:query_index])
    events.append((current.query_vec, np.zeros_like(current.sat_vec)))
    return encode_session(tape, p, events)[-1]


def long_term_vector(tape: Tape, p: ModelParams, query_vec: np.ndarray,
                     history: Sequence[Tensor]) -> Tuple[Tensor, Optional[Tensor]]:
    if p.config.variant.uses_attention:
        return attend(tape, p, query_vec, history)
    if history:
        return history[-1], None
    return tape.constant(np.zeros(p.config.d_s2)), None


def score_documents(tape: Tape, p: ModelParams, short_term: Optional[Tensor], long_term: Optional[Tensor],
                    docs: np.ndarray, features: np.ndarray) -> Tensor:
    """
    Scores of all candidates:
    feat_mlp(f) + cos(h2q W_L, d) + cos(h1 W_S, d), each term when the variant has it.
    """
    n_docs = docs.shape[0]
    scores = reshape(mlp_forward(tape, p.feat, tape.constant(features)), (n_docs,))
    doc_matrix = tape.constant(docs)
    if p.W_L is not None and long_term is not None:
        scores = scores + cosine_rows(matmul(long_term, tape.param(p.W_L)), doc_matrix)
    if p.W_S is not None and short_term is not None:
        scores = scores + cosine_rows(matmul(short_term, tape.param(p.W_S)), doc_matrix)
    return scores


def forward_query(tape: Tape, p: ModelParams, user: EncodedUser, session_index: int, query_index: int,
                  history: Optional[Sequence[Tensor]] = None) -> Tuple[Tensor, Dict[str, object]]:
    """
    Scores for one query of ``user`` plus the intermediate tensors.

    Args:
        history: Precomputed long-term states for this session; computed when None
    """
    event = user.sessions[session_index][query_index]
    variant = p.config.variant
    short = short_term_state(tape, p, user, session_index, query_index) if variant.uses_short_term else None
    long_vec, weights = None, None
    if variant.uses_long_term:
        if history is None:
            history = long_term_history(tape, p, user, session_index)
        long_vec, weights = long_term_vector(tape, p, event.query_vec, history)
    scores = score_documents(tape, p, short, long_vec, event.docs, event.features)
    return scores, {"short": short, "long": long_vec, "weights": weights, "history": list(history or [])}


def score_document(p: ModelParams, state: InterestState, doc_vec: np.ndarray, features: np.ndarray) -> float:
    """Score a single document against a computed interest state."""
    tape = Tape(record=False)
    short = tape.constant(state.short_term) if p.config.variant.uses_short_term else None
    long_vec = tape.constant(state.attended) if p.config.variant.uses_long_term else None
    scores = score_documents(tape, p, short, long_vec, np.atleast_2d(doc_vec), np.atleast_2d(features))
    return float(scores.value[0])


def rerank(doc_ids: Sequence[str], scores: Sequence[float], positions: Optional[Sequence[int]] = None) -> List[str]:
    """Sort by score descending, ties by original position ascending."""
    if positions is None:
        positions = range(1, len(doc_ids) + 1)
    order = sorted(zip(doc_ids, scores, positions), key=lambda item: (-item[1], item[2]))
    return [doc for doc, _, _ in order]


@dataclass
class HrnnRanker:
    """
    Frozen-parameter scoring with long-term states cached per (user, session).
    """
    params: ModelParams
    _history_cache: Dict[Tuple[str, int], List[np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def dtype(self):
        return np.dtype(self.params.config.dtype)

    def _history(self, tape: Tape, user: EncodedUser, session_index: int) -> List[Tensor]:
        key = (user.user_id, session_index)
        cached = self._history_cache.get(key)
        if cached is None:
            scratch = Tape(self.dtype, record=False)
            cached = [t.value.copy() for t in long_term_history(scratch, self.params, user, session_index)]
            self._history_cache[key] = cached
        return [tape.constant(v) for v in cached]

    def clear_cache(self):
        self._history_cache.clear()

    def _forward(self, user: EncodedUser, session_index: int, query_index: int):
        tape = Tape(self.dtype, record=False)
        history = self._history(tape, user, session_index) if self.params.config.variant.uses_long_term else None
        return forward_query(tape, self.params, user, session_index, query_index, history)

    def score_event(self, user: EncodedUser, session_index: int, query_index: int) -> np.ndarray:
        scores, _ = self._forward(user, session_index, query_index)
        return np.asarray(scores.value, dtype=np.float64)

    def rerank_event(self, user: EncodedUser, session_index: int, query_index: int) -> List[str]:
        event = user.sessions[session_index][query_index]
        scores = self.score_event(user, session_index, query_index)
        return rerank(event.doc_ids, scores, event.positions)

    def interest_state(self, user: EncodedUser, session_index: int, query_index: int) -> InterestState:
        _, parts = self._forward(user, session_index, query_index)
        d_s1, d_s2 = self.params.config.d_s1, self.params.config.d_s2
        short = parts["short"].value if parts["short"] is not None else np.zeros(d_s1)
        attended = parts["long"].value if parts["long"] is not None else np.zeros(d_s2)
        weights = parts["weights"].value if parts["weights"] is not None else None
        return InterestState(
            short_term=np.asarray(short, dtype=np.float64),
            long_states=[np.asarray(t.value, dtype=np.float64) for t in parts["history"]],
            attended=np.asarray(attended, dtype=np.float64),
            attention_weights=np.asarray(weights, dtype=np.float64) if weights is not None else None,
        )

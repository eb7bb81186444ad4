"""
LambdaRank training for the hierarchical ranker.
Pair generation from SAT clicks, |ΔMAP| weights, optimizers and the
early-stopping training loop.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.autodiff import LOG_CLAMP, Parameter, Tape, pairwise_logistic_loss
from core.evaluation import average_precision_labels
from core.features import EncodedEvent, EncodedUser
from core.hrnn import ModelParams, forward_query
from core.query_log import DatasetSplit, QueryEvent

logger = logging.getLogger(__name__)

VALIDATION_SEED_OFFSET = 7919


class TrainingError(Exception):
    """Base exception for training errors."""
    pass


class TrainingDivergedError(TrainingError):
    """Raised when a loss or validation value is not finite."""

    def __init__(self, epoch: int, user: Optional[str] = None, query: Optional[str] = None,
                 value: float = float("nan")):
        self.epoch = epoch
        self.user = user
        self.query = query
        self.value = value
        where = f"epoch {epoch}"
        if user is not None:
            where += f", user {user}"
        if query is not None:
            where += f", query {query}"
        super().__init__(f"Training diverged at {where}: loss={value}")


class OptimizerKind(Enum):
    ADAM = "adam"
    SGD = "sgd"


class DeltaPositions(Enum):
    """Which ranking supplies the positions swapped for |ΔMAP|."""
    PREDICTED = "predicted"
    ORIGINAL = "original"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 20
    patience: int = 3
    pair_cap: int = 50
    seed: int = 0
    optimizer: OptimizerKind = OptimizerKind.ADAM
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    delta_positions: DeltaPositions = DeltaPositions.PREDICTED

    def __post_init__(self):
        if isinstance(self.optimizer, str):
            self.optimizer = OptimizerKind(self.optimizer)
        if isinstance(self.delta_positions, str):
            self.delta_positions = DeltaPositions(self.delta_positions)
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.pair_cap < 1:
            raise ValueError("pair_cap must be >= 1")


@dataclass(frozen=True)
class TrainingPair:
    """A SAT-clicked document and a non-SAT document of the same result list."""
    query_id: str
    relevant_doc: str
    irrelevant_doc: str
    relevant_index: int
    irrelevant_index: int


# ---------------------------------------------------------------------------
# pairs and weights
# ---------------------------------------------------------------------------

def sample_pair_indices(n_candidates: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Indices into a cross product of ``n_candidates``, uniformly subsampled to ``cap``."""
    if n_candidates <= cap:
        return np.arange(n_candidates)
    return np.sort(rng.choice(n_candidates, size=cap, replace=False))


def generate_pairs(event: QueryEvent, cap: int, rng: np.random.Generator) -> List[TrainingPair]:
    """
    Relevant x irrelevant cross product of one query, capped at ``cap`` pairs.

    Queries without a SAT click, or with only SAT clicks, give no pairs.
    """
    relevant = [(i, imp.doc_id) for i, imp in enumerate(event.impressions) if imp.sat]
    irrelevant = [(i, imp.doc_id) for i, imp in enumerate(event.impressions) if not imp.sat]
    if not relevant or not irrelevant:
        return []
    product = [(r, s) for r in relevant for s in irrelevant]
    chosen = sample_pair_indices(len(product), cap, rng)
    return [
        TrainingPair(event.query_id, product[k][0][1], product[k][1][1], product[k][0][0], product[k][1][0])
        for k in chosen
    ]


def pairwise_probability(score_i: float, score_j: float) -> float:
    """1 / (1 + exp(-(s_i - s_j)))"""
    diff = score_i - score_j
    if diff >= 0:
        return 1.0 / (1.0 + math.exp(-diff))
    e = math.exp(diff)
    return e / (1.0 + e)


def delta_map_labels(labels: Sequence[bool], i: int, j: int) -> float:
    """|AP after swapping ranks i and j - AP before|, ranks 0-based in ``labels``."""
    labels = list(labels)
    if labels[i] == labels[j]:
        return 0.0
    before = average_precision_labels(labels)
    labels[i], labels[j] = labels[j], labels[i]
    return abs(average_precision_labels(labels) - before)


def delta_map(ranking: Sequence[str], relevant, i: int, j: int) -> float:
    """|ΔMAP| of swapping the documents at 0-based ranks ``i`` and ``j`` of ``ranking``."""
    relevant = set(relevant)
    return delta_map_labels([doc in relevant for doc in ranking], i, j)


def pair_loss(p_ij: float, label: float, delta: float) -> float:
    """(-label log p_ij - (1 - label) log p_ji) |delta|, log arguments clamped at 1e-12."""
    p_ji = 1.0 - p_ij
    loss = -label * math.log(max(p_ij, LOG_CLAMP)) - (1.0 - label) * math.log(max(p_ji, LOG_CLAMP))
    return loss * abs(delta)


def ranking_positions(scores: np.ndarray, original_positions: np.ndarray) -> np.ndarray:
    """0-based rank of each document after sorting by (-score, original position)."""
    order = np.lexsort((original_positions, -scores))
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(len(scores))
    return ranks


def pair_deltas(event: EncodedEvent, pairs: Sequence[TrainingPair], scores: np.ndarray,
                mode: DeltaPositions = DeltaPositions.PREDICTED) -> np.ndarray:
    """|ΔMAP| for every pair under the predicted or the original ranking."""
    if mode is DeltaPositions.PREDICTED:
        ranks = ranking_positions(scores, event.positions)
    else:
        ranks = event.positions - 1
    labels = np.zeros(event.n_docs, dtype=bool)
    labels[ranks] = event.relevance
    return np.array([
        delta_map_labels(labels, int(ranks[p.relevant_index]), int(ranks[p.irrelevant_index]))
        for p in pairs
    ])


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Sgd:
    def __init__(self, params: Sequence[Parameter], lr: float):
        self.params = list(params)
        self.lr = lr
        self.step_count = 0

    def step(self):
        self.step_count += 1
        for p in self.params:
            p.value = p.value - self.lr * p.grad

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: Mapping[str, np.ndarray], step_count: int = 0):
        self.step_count = step_count


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: Sequence[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        for k, p in enumerate(self.params):
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / (1.0 - self.beta1 ** t)
            v_hat = self.v[k] / (1.0 - self.beta2 ** t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for k, p in enumerate(self.params):
            state[f"adam.m.{p.name}"] = self.m[k].copy()
            state[f"adam.v.{p.name}"] = self.v[k].copy()
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], step_count: int = 0):
        """
        Raises:
            TrainingError: If a moment array is missing or has the wrong shape
        """
        for k, p in enumerate(self.params):
            for prefix, slots in (("adam.m.", self.m), ("adam.v.", self.v)):
                value = state.get(prefix + p.name)
                if value is None or np.shape(value) != p.shape:
                    raise TrainingError(f"Optimizer state for {p.name} is missing or has the wrong shape")
                slots[k] = np.asarray(value, dtype=np.float64).copy()
        self.step_count = step_count


def make_optimizer(params: ModelParams, config: TrainConfig):
    if config.optimizer is OptimizerKind.SGD:
        return Sgd(params.parameters(), config.lr)
    return Adam(params.parameters(), config.lr, config.beta1, config.beta2, config.eps)


# ---------------------------------------------------------------------------
# dataset and loop
# ---------------------------------------------------------------------------

QueryRef = Tuple[str, int, int]


@dataclass
class RankingDataset:
    """
    Encoded users plus the (user, session index, query index) references of
    training and validation queries, in time order per user.
    """
    users: Dict[str, EncodedUser]
    train: List[QueryRef] = field(default_factory=list)
    validation: List[QueryRef] = field(default_factory=list)

    @classmethod
    def from_splits(cls, users: Mapping[str, EncodedUser], splits: Mapping[str, DatasetSplit]) -> "RankingDataset":
        dataset = cls(dict(users))
        for user_id in sorted(users):
            split = splits.get(user_id)
            if split is None or not split.supervised:
                continue
            user = users[user_id]
            for kind, sessions in (("train", split.train_sessions), ("validation", split.validation_sessions)):
                target = dataset.train if kind == "train" else dataset.validation
                for s_idx in sessions:
                    for q_idx, event in enumerate(user.sessions[s_idx]):
                        if event.has_pairs:
                            target.append((user_id, s_idx, q_idx))
        return dataset

    def event(self, ref: QueryRef) -> EncodedEvent:
        user_id, s_idx, q_idx = ref
        return self.users[user_id].sessions[s_idx][q_idx]

    def train_by_user(self) -> Dict[str, List[QueryRef]]:
        grouped: Dict[str, List[QueryRef]] = {}
        for ref in self.train:
            grouped.setdefault(ref[0], []).append(ref)
        return grouped


def query_loss(tape: Tape, params: ModelParams, dataset: RankingDataset, ref: QueryRef,
               pairs: Sequence[TrainingPair], mode: DeltaPositions = DeltaPositions.PREDICTED):
    """Sum of |ΔMAP|-weighted pairwise logistic losses of one query."""
    user_id, s_idx, q_idx = ref
    event = dataset.event(ref)
    scores, _ = forward_query(tape, params, dataset.users[user_id], s_idx, q_idx)
    deltas = pair_deltas(event, pairs, np.asarray(scores.value, dtype=np.float64), mode)
    index_pairs = np.array([(p.relevant_index, p.irrelevant_index) for p in pairs], dtype=int)
    return pairwise_logistic_loss(scores, index_pairs, deltas)


def mean_loss(params: ModelParams, dataset: RankingDataset, refs: Sequence[QueryRef],
              config: TrainConfig, seed_offset: int = VALIDATION_SEED_OFFSET) -> float:
    """Mean per-query loss with a fixed pair sample; no gradients."""
    if not refs:
        return float("nan")
    rng = np.random.default_rng([config.seed, seed_offset])
    dtype = np.dtype(params.config.dtype)
    total = 0.0
    for ref in refs:
        pairs = generate_pairs(dataset.event(ref).event, config.pair_cap, rng)
        tape = Tape(dtype, record=False)
        total += float(query_loss(tape, params, dataset, ref, pairs, config.delta_positions).value)
    return total / len(refs)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    validation_loss: float
    n_queries: int
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        data = {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "validation_loss": self.validation_loss,
            "n_queries": self.n_queries,
        }
        if include_timing:
            data["wall_time"] = self.wall_time
        return data


@dataclass
class TrainingReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_validation_loss: float = float("inf")
    stop_epoch: int = 0
    stop_reason: str = ""
    initial_train_loss: Optional[float] = None
    initial_validation_loss: Optional[float] = None
    optimizer_step: int = 0
    epochs_without_improvement: int = 0
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_dict(self, include_timing: bool = False) -> dict:
        return {
            "epochs": [e.to_dict(include_timing) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_validation_loss": self.best_validation_loss,
            "stop_epoch": self.stop_epoch,
            "stop_reason": self.stop_reason,
            "initial_train_loss": self.initial_train_loss,
            "initial_validation_loss": self.initial_validation_loss,
        }

    def timing(self) -> dict:
        return {"epochs": [{"epoch": e.epoch, "wall_time": e.wall_time} for e in self.epochs]}


Validator = Callable[[ModelParams, int], float]


def train(params: ModelParams, dataset: RankingDataset, config: TrainConfig,
          validator: Optional[Validator] = None,
          optimizer_state: Optional[Mapping[str, np.ndarray]] = None,
          start_epoch: int = 0, optimizer_step: int = 0,
          best_validation_loss: float = float("inf"),
          epochs_without_improvement: int = 0,
          measure_initial: bool = True) -> TrainingReport:
    """
    Train ``params`` in place and leave them at the best validation epoch.

    Each epoch visits users in a seeded shuffled order and their training
    queries in time order, taking one optimizer step per query. Training stops
    when the validation loss has not decreased for ``config.patience`` epochs.

    Args:
        params: Model to train
        dataset: Training and validation queries
        config: Optimizer and stopping settings
        validator: Replaces the dataset validation loss; called as validator(params, epoch)
        optimizer_state: Moment arrays to resume from
        start_epoch: Number of epochs already completed
        optimizer_step: Optimizer step count to resume from
        best_validation_loss: Best validation loss reached before resuming
        epochs_without_improvement: Stale-epoch counter before resuming
        measure_initial: Record train and validation loss before the first update

    Raises:
        TrainingError: If there are no training or validation queries
        TrainingDivergedError: On a non-finite loss
    """
    if not dataset.train:
        raise TrainingError("No training queries with both SAT and non-SAT results")
    if validator is None and not dataset.validation:
        raise TrainingError("No validation queries with both SAT and non-SAT results")
    if validator is None:
        def validator(model: ModelParams, epoch: int) -> float:
            return mean_loss(model, dataset, dataset.validation, config)

    optimizer = make_optimizer(params, config)
    if optimizer_state:
        optimizer.load_state_dict(optimizer_state, optimizer_step)
    dtype = np.dtype(params.config.dtype)
    report = TrainingReport(best_validation_loss=best_validation_loss,
                            epochs_without_improvement=epochs_without_improvement,
                            best_epoch=start_epoch)
    if measure_initial and start_epoch == 0:
        report.initial_train_loss = mean_loss(params, dataset, dataset.train, config, seed_offset=0)
        if dataset.validation:
            report.initial_validation_loss = mean_loss(params, dataset, dataset.validation, config)
    best_values = params.copy_values()
    best_state = (optimizer.state_dict(), optimizer.step_count)
    by_user = dataset.train_by_user()
    users = sorted(by_user)

    epoch = start_epoch
    report.stop_reason = "max_epochs"
    for epoch in range(start_epoch + 1, config.max_epochs + 1):
        started = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        total, n_queries = 0.0, 0
        for u in rng.permutation(len(users)):
            user_id = users[u]
            for ref in by_user[user_id]:
                event = dataset.event(ref)
                pairs = generate_pairs(event.event, config.pair_cap, rng)
                if not pairs:
                    continue
                tape = Tape(dtype)
                loss = query_loss(tape, params, dataset, ref, pairs, config.delta_positions)
                value = float(loss.value)
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch, user_id, event.query_id, value)
                params.zero_grad()
                tape.backward(loss)
                optimizer.step()
                total += value
                n_queries += 1
            logger.debug(f"epoch {epoch}: finished user {user_id}")
        if not params.all_finite():
            raise TrainingDivergedError(epoch, value=float("nan"))

        train_loss = total / max(n_queries, 1)
        validation_loss = float(validator(params, epoch))
        if not math.isfinite(validation_loss):
            raise TrainingDivergedError(epoch, value=validation_loss)
        elapsed = time.perf_counter() - started
        report.epochs.append(EpochRecord(epoch, train_loss, validation_loss, n_queries, elapsed))
        logger.info(
            f"epoch {epoch}: train loss {train_loss:.6f}, validation loss {validation_loss:.6f} ({elapsed:.1f}s)"
        )

        if validation_loss < report.best_validation_loss:
            report.best_validation_loss = validation_loss
            report.best_epoch = epoch
            report.epochs_without_improvement = 0
            best_values = params.copy_values()
            best_state = (optimizer.state_dict(), optimizer.step_count)
        else:
            report.epochs_without_improvement += 1
            if report.epochs_without_improvement >= config.patience:
                report.stop_reason = "early_stop"
                break

    report.stop_epoch = epoch
    report.optimizer_state, report.optimizer_step = best_state
    params.load_values(best_values)
    logger.info(f"Training stopped at epoch {epoch} ({report.stop_reason}); best epoch {report.best_epoch}")
    return report

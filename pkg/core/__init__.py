"""
Core module for personalized re-ranking with hierarchical recurrent interest encoders.
"""

from core.hrnn import HrnnRanker, ModelConfig, ModelParams, ModelVariant
from core.query_log import ingest_log, label_sat_clicks, split_dataset
from core.queue import JobStatus, ScoringJob, ScoringQueue
from core.ranker_training import TrainConfig, train

__all__ = [
    'HrnnRanker',
    'ModelConfig',
    'ModelParams',
    'ModelVariant',
    'ingest_log',
    'label_sat_clicks',
    'split_dataset',
    'JobStatus',
    'ScoringJob',
    'ScoringQueue',
    'TrainConfig',
    'train',
]

"""Tolerance-controlled prompt projection with a finite-space TV theory simulator."""

from __future__ import annotations

from .cascade import CascadeConfig, CascadeDeps, CascadeOutcome, projected_reference_sample
from .errors import (
    BackendUnavailableError,
    CascadeError,
    ConfigError,
    InfeasibleProjectionError,
    InvalidEmbeddingError,
    ProjectionUnavailableError,
    ProtocolError,
    SafeProjError,
    ScorerUnavailableError,
)
from .metric import HashingEmbedder, angular_distance, normalize
from .projection import GraphProposer, ProjectionConfig, local_search_project
from .scoring import LabelTokenSets, Scorer, ScoringProtocol, TableBackend, TopKLogprobs, UnsafetyScore, ab_score

__version__ = "0.1.0"

__all__ = [
    "BackendUnavailableError",
    "CascadeConfig",
    "CascadeDeps",
    "CascadeError",
    "CascadeOutcome",
    "ConfigError",
    "GraphProposer",
    "HashingEmbedder",
    "InfeasibleProjectionError",
    "InvalidEmbeddingError",
    "LabelTokenSets",
    "ProjectionConfig",
    "ProjectionUnavailableError",
    "ProtocolError",
    "SafeProjError",
    "Scorer",
    "ScorerUnavailableError",
    "ScoringProtocol",
    "TableBackend",
    "TopKLogprobs",
    "UnsafetyScore",
    "ab_score",
    "angular_distance",
    "local_search_project",
    "normalize",
    "projected_reference_sample",
]

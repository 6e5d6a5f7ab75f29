"""Desk-scale composed image retrieval with learnable entity mapping.

A trainable retrieval pipeline over deterministic pluggable encoders:
from-scratch reverse-mode autodiff, transformer aggregation of
modification clauses into entity channels, a three-part contrastive
objective, and an exact recall evaluation harness.
"""

from .autodiff import Node, backward, finite_difference_check
from .dataset import TripletRecord, generate_synthetic, load_jsonl
from .encoders import EncoderConfig, FeatureBundle, SyntheticEncoder
from .losses import LossBreakdown, LossWeights
from .mapping import ArchConfig, ComposerModel
from .retrieval import MetricsReport, build_index, evaluate_model, rank_candidates
from .training import AblationFlags, TrainConfig, load_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "ArchConfig",
    "ComposerModel",
    "EncoderConfig",
    "FeatureBundle",
    "LossBreakdown",
    "LossWeights",
    "MetricsReport",
    "Node",
    "SyntheticEncoder",
    "TrainConfig",
    "TripletRecord",
    "backward",
    "build_index",
    "evaluate_model",
    "finite_difference_check",
    "generate_synthetic",
    "load_checkpoint",
    "load_jsonl",
    "rank_candidates",
    "train",
]

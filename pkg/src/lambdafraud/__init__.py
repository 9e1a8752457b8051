"""Leakage-safe graph fraud scoring with decoupled batch and real-time inference."""

from .datagen import DatasetConfig, Dataset, EntityKey, EntityType, TransactionRecord, generate, generate_dataset, split_masks
from .graph import TDGraph, transform, validate_leakage_freedom
from .encoder import GBDTModel, GBDTParams, train_gbdt
from .nn import LNNModel, TrainConfig
from .metrics import average_precision, evaluate, roc_auc

__version__ = "0.1.0"

__all__ = [
    "DatasetConfig", "Dataset", "EntityKey", "EntityType", "TransactionRecord", "generate", "generate_dataset", "split_masks",
    "TDGraph", "transform", "validate_leakage_freedom", "GBDTModel", "GBDTParams", "train_gbdt",
    "LNNModel", "TrainConfig", "average_precision", "evaluate", "roc_auc",
]

"""Last-layer feature reweighting for robustness to spurious correlations.

Train a feature extractor by ERM, then retrain only its linear head on a
small group-balanced reweighting set with l1-regularized logistic
regression, averaging heads over several balanced subsamples.
"""

__version__ = "0.1.0"

from .data import (
    DatasetSplit,
    EmbeddingDataset,
    GroupEntry,
    GroupSchema,
    load_embeddings,
    save_embeddings,
    split,
    validate,
)
from .erm import ERMNetwork, MlpModel, TrainConfig, extract_features, train_erm
from .metrics import GroupMetrics, evaluate, worst_group_accuracy
from .preprocessing import Scaler, apply_scaler, fit_scaler
from .reweighting import DFRClassifier, DfrConfig, DfrResult, run_dfr
from .solver import LinearHead, LogisticHead, SolverConfig, fit_logreg
from .synth import RawDataset, SpuriousSpec, generate

__all__ = [
    "DatasetSplit", "EmbeddingDataset", "GroupEntry", "GroupSchema", "load_embeddings",
    "save_embeddings", "split", "validate",
    "ERMNetwork", "MlpModel", "TrainConfig", "extract_features", "train_erm",
    "GroupMetrics", "evaluate", "worst_group_accuracy",
    "Scaler", "apply_scaler", "fit_scaler",
    "DFRClassifier", "DfrConfig", "DfrResult", "run_dfr",
    "LinearHead", "LogisticHead", "SolverConfig", "fit_logreg",
    "RawDataset", "SpuriousSpec", "generate",
]

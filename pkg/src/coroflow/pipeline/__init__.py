"""Dataset generation, joint training, evaluation, and reporting."""

from .dataset import (DatasetConfig, generate_dataset, load_case,
                      load_manifest, select_cases)
from .cloud import PointBatch, build_whole_cloud
from .training import TrainConfig, Trainer, load_training_state
from .evaluate import (bland_altman, classification_stats, evaluate_cases,
                       nmae, pearson)

__all__ = [
    "DatasetConfig", "generate_dataset", "load_manifest", "select_cases",
    "load_case", "PointBatch", "build_whole_cloud", "TrainConfig", "Trainer",
    "load_training_state", "nmae", "pearson", "bland_altman",
    "classification_stats", "evaluate_cases",
]

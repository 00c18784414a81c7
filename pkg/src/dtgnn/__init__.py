"""Categorical-state graph networks distilled into decision trees."""

__version__ = "0.1.0"

from .graphs import Graph, Dataset, FoldSplit, make_folds, holdout_split
from .diffgnn import ModelConfig, GraphBatch, train, train_fold
from .distill import (DecisionTree, DTGNNModel, detect_used_capacity,
                      dtgnn_forward, predict_units)
from .prune import (COMBINED, TRAIN_ONLY, VALIDATION_ONLY, lossless_prune,
                    lossy_prune_schedule, model_size)
from .explain import (Explainer, explain_layer, explain_prediction,
                      tree_shap)
from .harness import (ExperimentConfig, export_bundle, load_bundle,
                      run_experiment, shrink_and_retrain)

__all__ = [
    "Graph",
    "Dataset",
    "FoldSplit",
    "make_folds",
    "holdout_split",
    "ModelConfig",
    "GraphBatch",
    "train",
    "train_fold",
    "DecisionTree",
    "DTGNNModel",
    "detect_used_capacity",
    "dtgnn_forward",
    "predict_units",
    "COMBINED",
    "TRAIN_ONLY",
    "VALIDATION_ONLY",
    "lossless_prune",
    "lossy_prune_schedule",
    "model_size",
    "Explainer",
    "explain_layer",
    "explain_prediction",
    "tree_shap",
    "ExperimentConfig",
    "export_bundle",
    "load_bundle",
    "run_experiment",
    "shrink_and_retrain",
    "__version__",
]

"""Binary essential / non-essential classifiers and their file format."""

from __future__ import annotations

import numpy as np

from ..core import Prediction
from .forest import ForestConfig, ForestModel, TrainingError, forest_scores, predict_forest, train_forest
from .io import ModelFileError, dumps_model, load_model, loads_model, save_model
from .mlp import MlpConfig, MlpModel, TrainingDiverged, mlp_scores, predict_mlp, train_mlp


def scores(model, X: np.ndarray) -> np.ndarray:
    """P(essential) per row for either model kind."""
    if isinstance(model, ForestModel):
        return forest_scores(model, X)
    return mlp_scores(model, X)


def predict(model, v: np.ndarray) -> Prediction:
    if isinstance(model, ForestModel):
        return predict_forest(model, v)
    return predict_mlp(model, v)


__all__ = [
    "ForestConfig",
    "ForestModel",
    "MlpConfig",
    "MlpModel",
    "ModelFileError",
    "TrainingDiverged",
    "TrainingError",
    "dumps_model",
    "forest_scores",
    "load_model",
    "loads_model",
    "mlp_scores",
    "predict",
    "predict_forest",
    "predict_mlp",
    "save_model",
    "scores",
    "train_forest",
    "train_mlp",
]

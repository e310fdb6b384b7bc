"""Velocity predictors, a small autograd engine, and their training loop."""

from crowdslam.neuralnet.models import (
    GatWeights,
    MlpWeights,
    SceneGraph,
    SingleAgentPredictor,
    gat_encode,
    gat_predict,
    history_features,
    mlp_forward,
    velocity_jacobian,
)
from crowdslam.neuralnet.serialization import WeightsFormatError, load_weights, save_weights
from crowdslam.neuralnet.training import TrainHyper, TrainingDivergedError, train_predictor

__all__ = [
    "GatWeights",
    "MlpWeights",
    "SceneGraph",
    "SingleAgentPredictor",
    "TrainHyper",
    "TrainingDivergedError",
    "WeightsFormatError",
    "gat_encode",
    "gat_predict",
    "history_features",
    "load_weights",
    "mlp_forward",
    "save_weights",
    "train_predictor",
    "velocity_jacobian",
]

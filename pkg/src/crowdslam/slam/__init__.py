"""Sliding-window dynamic GraphSLAM."""

from crowdslam.slam.graph import Factor, FactorGraph, VariableId, VarKind, normal_equations
from crowdslam.slam.pipeline import (
    NoiseModel,
    PedPrediction,
    SlamError,
    SlamResult,
    SlamRunner,
    SlamSettings,
    WindowInputs,
    build_window_graph,
    predict_future,
    run_sequence,
    slide_window,
)
from crowdslam.slam.io import load_result, read_rollout_stream, save_result, write_rollout_stream
from crowdslam.slam.solver import SingularSystemError, SolveDiagnostics, SolverSettings, check_rank, marginal_covariances, solve

__all__ = [
    "Factor",
    "FactorGraph",
    "NoiseModel",
    "PedPrediction",
    "SingularSystemError",
    "SlamError",
    "SlamResult",
    "SlamRunner",
    "SlamSettings",
    "SolveDiagnostics",
    "SolverSettings",
    "VarKind",
    "VariableId",
    "WindowInputs",
    "build_window_graph",
    "check_rank",
    "marginal_covariances",
    "normal_equations",
    "predict_future",
    "run_sequence",
    "solve",
    "slide_window",
    "load_result",
    "save_result",
    "read_rollout_stream",
    "write_rollout_stream",
]

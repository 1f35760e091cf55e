"""Physics-informed inverse problem: scales, losses, networks and training."""

from .losses import (
    TERMS,
    DegreeTooLow,
    LossWeights,
    OutletFlow,
    TooFewTimes,
    ZeroGradient,
    loss_bc,
    loss_gradp,
    loss_ns,
    loss_pdata,
    loss_udata,
    loss_wk,
    ns_residuals,
    pbar_prediction,
    update_weights_auto,
    velocity_from_potential,
)
from .model import PiNet, PinnModel
from .scales import EstimatedParams, Scales, estimate_compliance, init_windkessel_guess
from .train import Problem, TrainConfig, TrainResult, history_columns, realization_seed, train

__all__ = [
    "TERMS", "DegreeTooLow", "EstimatedParams", "LossWeights", "OutletFlow", "PiNet", "PinnModel",
    "Problem", "Scales", "TooFewTimes", "TrainConfig", "TrainResult", "ZeroGradient",
    "estimate_compliance", "history_columns", "init_windkessel_guess", "loss_bc", "loss_gradp",
    "loss_ns", "loss_pdata", "loss_udata", "loss_wk", "ns_residuals", "pbar_prediction",
    "realization_seed", "train", "update_weights_auto", "velocity_from_potential",
]

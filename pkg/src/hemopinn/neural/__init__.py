"""Jets, swish MLPs and ADAM."""

from .jet import Jet, JetBasis, basis, compose, linear, mul, sigmoid_jet, stack, swish_jet
from .mlp import (
    MlpSpec,
    NonFiniteLoss,
    ParamVector,
    forward,
    forward_jet,
    init_params,
    load_checkpoint,
    loss_gradient,
    save_checkpoint,
    unpack,
)
from .optim import AdamState, adam_init, adam_step

__all__ = [
    "AdamState", "Jet", "JetBasis", "MlpSpec", "NonFiniteLoss", "ParamVector",
    "adam_init", "adam_step", "basis", "compose", "forward", "forward_jet", "init_params",
    "linear", "load_checkpoint", "loss_gradient", "mul", "save_checkpoint", "sigmoid_jet",
    "stack", "swish_jet", "unpack",
]

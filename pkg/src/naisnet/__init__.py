"""Residual blocks built from stable non-autonomous dynamical systems."""
from .dynamics import (
    Activation,
    AdaptiveUnroll,
    Affine,
    BlockChain,
    ConvBlockParams,
    FcBlock,
    FcBlockParams,
    FixedUnroll,
    Trajectory,
    cascade_forward,
    conv_step,
    fc_step,
    steady_state_tanh,
    unroll,
    unroll_adaptive,
    unroll_fixed,
)
from .projection import ProjectionOutcome, project_block, project_conv, project_fc
from .stability import StabilityReport, check_condition1

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "AdaptiveUnroll",
    "Affine",
    "BlockChain",
    "ConvBlockParams",
    "FcBlock",
    "FcBlockParams",
    "FixedUnroll",
    "ProjectionOutcome",
    "StabilityReport",
    "Trajectory",
    "cascade_forward",
    "check_condition1",
    "conv_step",
    "fc_step",
    "project_block",
    "project_conv",
    "project_fc",
    "steady_state_tanh",
    "unroll",
    "unroll_adaptive",
    "unroll_fixed",
]

"""Desk-scale encoder-decoder caption model with masked codec modeling."""

from .adapter import CaptionStepScorer
from .network import (
    MaskedExample,
    compose_inputs,
    forward,
    joint_loss,
    loss_and_grads,
)
from .params import ModelConfig, ModelParams, init_params, sinusoidal_positions
from .training import (
    Adam,
    TraceRow,
    TrainConfig,
    TrainItem,
    TrainStage,
    apply_mcm_mask,
    grad_check,
    mask_item,
    mcm_accuracy,
    train,
)
from .vocab import CaptionVocab

__all__ = [
    "Adam",
    "CaptionStepScorer",
    "CaptionVocab",
    "MaskedExample",
    "ModelConfig",
    "ModelParams",
    "TraceRow",
    "TrainConfig",
    "TrainItem",
    "TrainStage",
    "apply_mcm_mask",
    "compose_inputs",
    "forward",
    "grad_check",
    "init_params",
    "joint_loss",
    "loss_and_grads",
    "mask_item",
    "mcm_accuracy",
    "sinusoidal_positions",
    "train",
]

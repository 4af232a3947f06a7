"""Learnable agent, its differentiation core, parameters and checkpoints."""

from .agent import Agent, EncodedState, ModelConfig, ModelInput
from .autograd import Tape, Tensor, backward
from .params import Adam, ParameterStore, optimizer_step, read_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "Agent",
    "EncodedState",
    "ModelConfig",
    "ModelInput",
    "ParameterStore",
    "Tape",
    "Tensor",
    "backward",
    "optimizer_step",
    "read_checkpoint",
    "save_checkpoint",
]

"""Minimal reverse-mode tensor engine with the layers and optimizers the models use."""
from . import checkpoint, nn, ops
from .gradcheck import gradcheck, numeric_grad
from .nn import BiGRU, Dropout, Embedding, GRUCell, Linear, Module, clip_grad_norm
from .optim import Adafactor, Adam, OptimizerState, Schedule
from .tensor import ShapeError, Tensor, no_grad, parameter, precision

__all__ = [
    "Adafactor", "Adam", "BiGRU", "Dropout", "Embedding", "GRUCell", "Linear", "Module",
    "OptimizerState", "Schedule", "ShapeError", "Tensor", "checkpoint", "clip_grad_norm",
    "gradcheck", "nn", "no_grad", "numeric_grad", "ops", "parameter", "precision",
]

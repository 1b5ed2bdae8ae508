"""Numeric substrate: tensors, tape autodiff, LSTMs, Adam, grad checks."""

from . import tensor as ops
from .gradcheck import grad_check
from .lstm import LSTMCellParams, lstm_cell, run_bilstm, run_lstm
from .optim import Adam, Parameter, clip_global_norm, init_uniform
from .tensor import (
    ContractError,
    DimensionError,
    InvalidMaskError,
    NumericError,
    Tape,
    Tensor,
    TensorError,
    get_precision,
    set_precision,
    softmax,
    softmax_masked,
)

__all__ = [
    "ops",
    "grad_check",
    "LSTMCellParams",
    "lstm_cell",
    "run_bilstm",
    "run_lstm",
    "Adam",
    "Parameter",
    "clip_global_norm",
    "init_uniform",
    "ContractError",
    "DimensionError",
    "InvalidMaskError",
    "NumericError",
    "Tape",
    "Tensor",
    "TensorError",
    "get_precision",
    "set_precision",
    "softmax",
    "softmax_masked",
]

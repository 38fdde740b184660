"""Numerical core: tensors-as-arrays, LSTM cell math, sequence kernels."""

from .core import (
    AdamState,
    CellCache,
    DenseLayer,
    LstmCellWeights,
    LstmState,
    adam_step,
    as_tensor,
    clip_gradients,
    dense_backward,
    dense_forward,
    dropout_forward,
    init_dense_layer,
    init_lstm_weights,
    lstm_cell_backward,
    lstm_cell_forward,
    mse_loss,
    sigmoid,
    softmax,
)
from .kernels import SeqCache, backend_name, seq_backward, seq_forward

__all__ = [
    "AdamState",
    "CellCache",
    "DenseLayer",
    "LstmCellWeights",
    "LstmState",
    "SeqCache",
    "adam_step",
    "as_tensor",
    "backend_name",
    "clip_gradients",
    "dense_backward",
    "dense_forward",
    "dropout_forward",
    "init_dense_layer",
    "init_lstm_weights",
    "lstm_cell_backward",
    "lstm_cell_forward",
    "mse_loss",
    "seq_backward",
    "seq_forward",
    "sigmoid",
    "softmax",
]

"""Dense-tensor numeric core: layer kernels, LSTM, Adam and checkpoints.

Tensors are plain numpy arrays; float32 for training, float64 for
gradient verification.
"""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import (
    ConvSpec,
    check_finite,
    conv3d_backward,
    conv3d_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    maxpool3d_backward,
    maxpool3d_forward,
    pool_output_size,
    relu_backward,
    relu_forward,
    same_padding,
    softmax,
    softmax_crossentropy,
)
from .lstm import lstm_backward, lstm_cell_backward, lstm_cell_forward, lstm_forward, sigmoid
from .params import LayerParams, NumericError, adam_step, he_uniform, xavier_uniform

"""Batch normalization, activations, pooling and softmax."""
from .activation import ActivationMode, activation_backward, activation_forward
from .batchnorm import (
    BatchNormMode,
    BatchNormParams,
    batchnorm_backward,
    batchnorm_forward_infer,
    batchnorm_forward_train,
)
from .pooling import PoolingMode, pooling_backward, pooling_forward
from .softmax import softmax_backward, softmax_forward

__all__ = [
    "ActivationMode",
    "BatchNormMode",
    "BatchNormParams",
    "PoolingMode",
    "activation_backward",
    "activation_forward",
    "batchnorm_backward",
    "batchnorm_forward_infer",
    "batchnorm_forward_train",
    "pooling_backward",
    "pooling_forward",
    "softmax_backward",
    "softmax_forward",
]

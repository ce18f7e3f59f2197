"""CPU deep-learning primitives.

Convolution through interchangeable solvers (im2col+GEMM, direct, Winograd,
FFT, implicit GEMM) with Find, auto-tuning, a text performance database and
a two-level plan cache; batch normalization, activations, pooling, softmax;
vanilla RNN and LSTM layers built on fused GEMMs; and fusion plans checked
against a constraint graph.
"""
from .errors import PrimkitError
from .solver import Handle, find_convolution
from .tensor import ElementType, OpCounters, Tensor, TensorDescriptor, round_bf16

__version__ = "0.1.0"

__all__ = [
    "ElementType",
    "Handle",
    "OpCounters",
    "PrimkitError",
    "Tensor",
    "TensorDescriptor",
    "__version__",
    "find_convolution",
    "round_bf16",
]

"""Multi-frame cross-channel attention for multi-speaker ASR, at desk scale."""

from . import attention, encoder, masking, sim, sot, tensor
from .errors import ContractError, DimensionError, NumericError, VocabularyError
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "attention", "encoder", "masking", "sim", "sot", "tensor", "Tensor",
    "ContractError", "DimensionError", "NumericError", "VocabularyError",
]

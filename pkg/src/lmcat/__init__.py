"""Lightweight multimodal contrastive attention transformer for SAR + optical patches."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DataError, DivergenceError, LmcatError, ParseError, ShapeError
from .kernels import BACKEND
from .model import LMCAT, ModelConfig, build_variant, count_flops, count_params, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad

__all__ = [
    "BACKEND",
    "LMCAT",
    "ModelConfig",
    "Tensor",
    "build_variant",
    "count_flops",
    "count_params",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "ConfigError",
    "ContractError",
    "DataError",
    "DivergenceError",
    "LmcatError",
    "ParseError",
    "ShapeError",
]

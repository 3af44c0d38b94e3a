"""Lookup-free quantized image tokenizer with a factorized autoregressive generator."""

from .autodiff import Tensor, finite_diff_check, no_grad
from .config import RunConfig, load_config, parse_config
from .estimators import FactorizedARGenerator, LFQTokenizer
from .factorize import FactorizationScheme, defactorize, factorize
from .generator import ARConfig, ARModel, generate, large_config
from .lfq import LFQConfig, code_to_index, codebook_usage, entropy_loss, index_to_code, quantize_sign
from .tokenizer import TokenizerConfig, TokenizerModel

__all__ = [
    "ARConfig", "ARModel", "FactorizationScheme", "FactorizedARGenerator", "LFQConfig",
    "LFQTokenizer", "RunConfig", "Tensor", "TokenizerConfig", "TokenizerModel",
    "code_to_index", "codebook_usage", "defactorize", "entropy_loss", "factorize",
    "finite_diff_check", "generate", "index_to_code", "load_config", "no_grad",
    "large_config", "parse_config", "quantize_sign",
]

__version__ = "0.1.0"

"""Rate-compatible raptor-like LDPC codes with classic and neural decoders."""
from .channel import ChannelModel, llr_from_channel, modulate
from .classic import DecodeTrace, decode
from .code_model import BaseGraph, BaseGraphError, RaptorLikeCode, TannerGraph, edge_counts, load_code, parse_base_graph
from .neural import NeuralDecoder, NeuralDecoderConfig, ParameterMatrix, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "BaseGraph",
    "BaseGraphError",
    "ChannelModel",
    "DecodeTrace",
    "NeuralDecoder",
    "NeuralDecoderConfig",
    "ParameterMatrix",
    "RaptorLikeCode",
    "TannerGraph",
    "decode",
    "edge_counts",
    "llr_from_channel",
    "load_code",
    "load_model",
    "modulate",
    "parse_base_graph",
    "save_model",
]

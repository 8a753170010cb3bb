"""Attribute-aware text adapters (prefix adapter + K/V modulator) for fine-grained open-vocabulary detection."""

from .adapters import DsaaParams
from .config import RunConfig
from .encoder import EncoderConfig
from .losses import LossWeights
from .pipeline import PipelineFlags, TextPipeline

__all__ = ["DsaaParams", "EncoderConfig", "LossWeights", "PipelineFlags", "RunConfig", "TextPipeline"]

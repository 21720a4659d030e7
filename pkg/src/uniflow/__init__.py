"""Unified image tokenizer: a self-distilled ViT encoder with a patch-wise pixel flow decoder."""

from .config import RunConfig, load_config, toy_config
from .model import UniFlow, build_model

__version__ = "0.1.0"

__all__ = ["RunConfig", "UniFlow", "build_model", "load_config", "toy_config"]

"""Unified scaling law for quantization-aware training, at desk scale."""

__version__ = "0.1.0"

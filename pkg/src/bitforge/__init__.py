"""Quantization-aware self-distillation at desk scale."""

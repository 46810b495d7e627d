"""Dynamic distillation for cross-domain few-shot learning, at desk scale."""

__version__ = "0.1.0"

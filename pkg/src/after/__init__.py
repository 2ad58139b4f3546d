"""Domain-adversarial fine-tuning on a minimal autodiff engine."""

__version__ = "0.1.0"

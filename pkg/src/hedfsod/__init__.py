"""Few-shot transfer of a set-prediction detector with a hybrid ensemble decoder."""

__version__ = "0.1.0"

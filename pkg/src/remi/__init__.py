"""Privacy-guided machine unlearning on a small numpy network engine."""

__version__ = "0.1.0"

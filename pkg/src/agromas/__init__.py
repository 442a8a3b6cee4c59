"""Self-reflective multi-agent orchestration for multi-image agricultural VQA."""

__version__ = "0.1.0"
